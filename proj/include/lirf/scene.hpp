#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lirf/geometry.hpp"

namespace lirf {

// Procedural textures; all view-independent so a radiance field can fit them.
struct Texture {
  enum class Kind { solid, checker, noise, stripes };
  Kind kind = Kind::solid;
  Vec3 color_a{0.8, 0.8, 0.8};
  Vec3 color_b{0.2, 0.2, 0.2};
  double period = 0.5;     // world units (checker/noise) or angular repeats (stripes)
  std::uint64_t seed = 0;  // noise lattice seed
};

struct PlaneObject {
  Vec3 point{0, 0, 0};
  Vec3 normal{0, 0, 1};
  double extent = 3.0;  // half side length of the finite square
  Texture texture;
};

struct SphereObject {
  Vec3 center{0, 0, 0.8};
  double radius = 0.6;
  Texture texture;
};

// Axis-aligned box, usually the occluder.
struct SlabObject {
  Vec3 center{0, 0, 1.5};
  Vec3 half_extents{0.4, 0.4, 0.05};
  Vec3 color{0.85, 0.1, 0.1};
  bool occluder = true;
};

struct RigSpec {
  std::string type = "ring";
  int views = 12;
  double radius = 4.0;
  double height = 1.6;
  Vec3 look_at{0, 0, 0.4};
  double fov_deg = 40.0;
  std::int64_t width = 64, height_px = 64;
  double near = 2.0, far = 7.5;
};

struct SceneSpec {
  std::uint64_t seed = 1;
  RigSpec rig;
  std::vector<int> test_views{0, 6};
  std::vector<double> target_scales{0.5, 1.0, 2.0, 4.0};
  std::vector<PlaneObject> planes;
  std::vector<SphereObject> spheres;
  std::vector<SlabObject> slabs;
};

SceneSpec default_scene_spec();                        // textured plane + striped sphere
SceneSpec checkerboard_scene_spec(double period_px);   // high-frequency fronto plane
SceneSpec occluder_scene_spec();                       // plane + slab blocking one view
SceneSpec parse_scene_spec(const std::string& json_text);
std::string scene_spec_to_json(const SceneSpec& spec);

struct SceneHit {
  bool hit = false;
  double t = 0;
  Vec3 point;
  Vec3 normal;
  Vec3 color;
  bool on_occluder = false;
};

// Analytic scene: exact intersections and per-pixel supersampled area
// integration (16 stratified subrays) as the anti-aliased reference.
class SyntheticScene {
 public:
  SyntheticScene(SceneSpec spec);

  const SceneSpec& spec() const { return spec_; }
  const std::vector<Camera>& cameras() const { return cameras_; }
  bool is_test_view(int view) const;

  SceneHit first_hit(const Vec3& origin, const Vec3& dir) const;
  bool point_visible_from(const Vec3& p, const Vec3& eye) const;

  // Anti-aliased reference render at the camera's resolution ([h,w,3] floats).
  std::vector<float> render(const Camera& cam, int subrays = 16) const;

  // Pixels of `cam` whose first hit is an occluder slab.
  std::vector<std::uint8_t> occluder_mask(const Camera& cam) const;

  // Pixels of `cam` whose first-hit point (on non-occluder geometry) is
  // blocked from `source`'s center by some other surface.
  std::vector<std::uint8_t> occlusion_mask_between(const Camera& cam,
                                                   const Camera& source) const;

  bool has_occluder() const;

 private:
  Vec3 shade(const SceneHit& hit) const;
  SceneSpec spec_;
  std::vector<Camera> cameras_;
};

// Writes the dataset directory: cameras.json, train images at x1 plus every
// target scale, test images at every target scale, and occlusion masks when
// the scene has an occluder.
void write_scene_dataset(const SyntheticScene& scene, const std::filesystem::path& out_dir);

std::string format_scale_tag(double scale);

}  // namespace lirf
