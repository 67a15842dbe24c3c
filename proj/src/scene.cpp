#include "lirf/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "lirf/png_io.hpp"

namespace lirf {

using nlohmann::json;

namespace {

constexpr double kHitEps = 1e-6;

double value_noise(std::uint64_t seed, double u, double v) {
  auto lattice = [seed](std::int64_t ix, std::int64_t iy) {
    std::uint64_t data[3] = {seed, static_cast<std::uint64_t>(ix) * 0x9E3779B97F4A7C15ULL,
                             static_cast<std::uint64_t>(iy) * 0xBF58476D1CE4E5B9ULL};
    std::uint64_t h = fnv1a(data, sizeof(data));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  };
  double fx = std::floor(u), fy = std::floor(v);
  double tx = u - fx, ty = v - fy;
  auto smooth = [](double t) { return t * t * (3 - 2 * t); };
  double sx = smooth(tx), sy = smooth(ty);
  auto ix = static_cast<std::int64_t>(fx);
  auto iy = static_cast<std::int64_t>(fy);
  double a = lattice(ix, iy), b = lattice(ix + 1, iy);
  double c = lattice(ix, iy + 1), d = lattice(ix + 1, iy + 1);
  return (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy;
}

Vec3 lerp(const Vec3& a, const Vec3& b, double t) { return a * (1 - t) + b * t; }

Vec3 texture_color(const Texture& tex, double u, double v) {
  switch (tex.kind) {
    case Texture::Kind::solid:
      return tex.color_a;
    case Texture::Kind::checker: {
      auto cell = static_cast<std::int64_t>(std::floor(u / tex.period)) +
                  static_cast<std::int64_t>(std::floor(v / tex.period));
      return (cell & 1) == 0 ? tex.color_a : tex.color_b;
    }
    case Texture::Kind::noise:
      return lerp(tex.color_a, tex.color_b, value_noise(tex.seed, u / tex.period, v / tex.period));
    case Texture::Kind::stripes:
      return lerp(tex.color_a, tex.color_b, 0.5 + 0.5 * std::sin(u * tex.period));
  }
  return tex.color_a;
}

void plane_basis(const Vec3& n, Vec3& tu, Vec3& tv) {
  Vec3 ref = std::abs(n.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
  tu = normalized(cross(ref, n));
  tv = cross(n, tu);
}

struct ObjectHit {
  bool hit = false;
  double t = 0;
  Vec3 normal;
  Vec3 color;
};

ObjectHit hit_plane(const PlaneObject& p, const Vec3& o, const Vec3& d) {
  ObjectHit h;
  double denom = dot(d, p.normal);
  if (std::abs(denom) < 1e-12) return h;
  double t = dot(p.point - o, p.normal) / denom;
  if (t < kHitEps) return h;
  Vec3 q = o + d * t;
  Vec3 tu, tv;
  plane_basis(p.normal, tu, tv);
  double u = dot(q - p.point, tu), v = dot(q - p.point, tv);
  if (std::abs(u) > p.extent || std::abs(v) > p.extent) return h;
  h.hit = true;
  h.t = t;
  h.normal = denom < 0 ? p.normal : -p.normal;
  h.color = texture_color(p.texture, u, v);
  return h;
}

ObjectHit hit_sphere(const SphereObject& s, const Vec3& o, const Vec3& d) {
  ObjectHit h;
  Vec3 oc = o - s.center;
  double b = dot(oc, d);
  double c = dot(oc, oc) - s.radius * s.radius;
  double disc = b * b - c;
  if (disc < 0) return h;
  double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t < kHitEps) t = -b + sq;
  if (t < kHitEps) return h;
  Vec3 q = o + d * t;
  Vec3 n = normalized(q - s.center);
  double lon = std::atan2(n.y, n.x);
  double lat = std::asin(std::clamp(n.z, -1.0, 1.0));
  h.hit = true;
  h.t = t;
  h.normal = n;
  h.color = texture_color(s.texture, lon, lat);
  return h;
}

ObjectHit hit_slab(const SlabObject& s, const Vec3& o, const Vec3& d) {
  ObjectHit h;
  double tmin = -1e300, tmax = 1e300;
  int axis = -1;
  const double od[3] = {o.x - s.center.x, o.y - s.center.y, o.z - s.center.z};
  const double dd[3] = {d.x, d.y, d.z};
  const double he[3] = {s.half_extents.x, s.half_extents.y, s.half_extents.z};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dd[a]) < 1e-12) {
      if (std::abs(od[a]) > he[a]) return h;
      continue;
    }
    double t0 = (-he[a] - od[a]) / dd[a];
    double t1 = (he[a] - od[a]) / dd[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      axis = a;
    }
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return h;
  }
  double t = tmin > kHitEps ? tmin : tmax;
  if (t < kHitEps || tmin > tmax) return h;
  h.hit = true;
  h.t = t;
  Vec3 n{0, 0, 0};
  if (axis == 0) n.x = od[0] > 0 ? 1 : -1;
  if (axis == 1) n.y = od[1] > 0 ? 1 : -1;
  if (axis == 2) n.z = od[2] > 0 ? 1 : -1;
  h.normal = n;
  h.color = s.color;
  return h;
}

}  // namespace

SceneSpec default_scene_spec() {
  SceneSpec spec;
  spec.rig.near = 0.9;
  spec.rig.far = 7.8;
  PlaneObject ground;
  ground.extent = 2.0;
  ground.texture.kind = Texture::Kind::noise;
  ground.texture.color_a = {0.95, 0.55, 0.25};
  ground.texture.color_b = {0.15, 0.35, 0.75};
  ground.texture.period = 0.9;
  ground.texture.seed = 7;
  spec.planes.push_back(ground);
  SphereObject ball;
  ball.texture.kind = Texture::Kind::stripes;
  ball.texture.color_a = {0.9, 0.9, 0.2};
  ball.texture.color_b = {0.4, 0.1, 0.5};
  ball.texture.period = 3.5;
  spec.spheres.push_back(ball);
  return spec;
}

SceneSpec checkerboard_scene_spec(double period_px) {
  SceneSpec spec;
  spec.rig.views = 10;
  spec.rig.width = 48;
  spec.rig.height_px = 48;
  spec.rig.near = 0.9;
  spec.rig.far = 7.8;
  spec.test_views = {0, 5};
  // Pixel footprint on the plane from the ring distance; the period is given
  // in x1 pixels.
  double dist = std::sqrt(spec.rig.radius * spec.rig.radius +
                          (spec.rig.height - spec.rig.look_at.z) *
                              (spec.rig.height - spec.rig.look_at.z));
  double fx = 0.5 * static_cast<double>(spec.rig.width) /
              std::tan(0.5 * spec.rig.fov_deg * 3.14159265358979323846 / 180.0);
  double footprint = dist / fx;
  PlaneObject ground;
  ground.extent = 2.0;
  ground.texture.kind = Texture::Kind::checker;
  ground.texture.color_a = {0.95, 0.95, 0.95};
  ground.texture.color_b = {0.05, 0.05, 0.05};
  ground.texture.period = period_px * footprint;
  spec.planes.push_back(ground);
  return spec;
}

SceneSpec occluder_scene_spec() {
  SceneSpec spec = default_scene_spec();
  spec.rig.width = 48;
  spec.rig.height_px = 48;
  spec.spheres.clear();
  spec.planes[0].texture.period = 0.7;
  // View 0 sits on the +x side of the ring and must stay a source view; the
  // held-out views look at the blocked plane region from the far side.
  spec.test_views = {5, 7};
  SlabObject slab;
  slab.center = {1.9, 0.0, 1.05};
  slab.half_extents = {0.38, 0.55, 0.06};
  slab.color = {0.1, 0.85, 0.25};
  slab.occluder = true;
  spec.slabs.push_back(slab);
  return spec;
}

SyntheticScene::SyntheticScene(SceneSpec spec) : spec_(std::move(spec)) {
  if (spec_.rig.type != "ring")
    throw UserError("scene: unsupported rig type '" + spec_.rig.type + "'");
  if (spec_.rig.views < 3) throw UserError("scene: a ring rig needs at least 3 views");
  for (int i = 0; i < spec_.rig.views; ++i) {
    double a = 2.0 * 3.14159265358979323846 * i / spec_.rig.views;
    Vec3 eye{spec_.rig.radius * std::cos(a), spec_.rig.radius * std::sin(a), spec_.rig.height};
    cameras_.push_back(make_lookat_camera(eye, spec_.rig.look_at, {0, 0, 1}, spec_.rig.fov_deg,
                                          spec_.rig.width, spec_.rig.height_px, spec_.rig.near,
                                          spec_.rig.far));
  }
  for (int tv : spec_.test_views)
    if (tv < 0 || tv >= spec_.rig.views)
      throw UserError("scene: test view " + std::to_string(tv) + " out of range");

  // Scene bounding sphere, then the depth-range invariant per camera.
  Vec3 c{0, 0, 0};
  double r = 0;
  auto grow = [&](const Vec3& p, double rad) {
    double d = norm(p - c) + rad;
    r = std::max(r, d);
  };
  c = spec_.rig.look_at;
  for (const auto& p : spec_.planes) grow(p.point, p.extent * std::sqrt(2.0));
  for (const auto& s : spec_.spheres) grow(s.center, s.radius);
  for (const auto& s : spec_.slabs) grow(s.center, norm(s.half_extents));
  for (const auto& cam : cameras_) {
    double depth = dot(c - cam.center, cam.optical_axis());
    if (depth - r < cam.near || depth + r > cam.far)
      throw UserError("scene: geometry leaves the [near, far] range of a camera (depth " +
                      std::to_string(depth - r) + ".." + std::to_string(depth + r) + " vs [" +
                      std::to_string(cam.near) + "," + std::to_string(cam.far) + "])");
  }
}

bool SyntheticScene::is_test_view(int view) const {
  return std::find(spec_.test_views.begin(), spec_.test_views.end(), view) !=
         spec_.test_views.end();
}

bool SyntheticScene::has_occluder() const {
  for (const auto& s : spec_.slabs)
    if (s.occluder) return true;
  return false;
}

SceneHit SyntheticScene::first_hit(const Vec3& origin, const Vec3& dir) const {
  SceneHit best;
  auto consider = [&](const ObjectHit& oh, bool occluder) {
    if (oh.hit && (!best.hit || oh.t < best.t)) {
      best.hit = true;
      best.t = oh.t;
      best.point = origin + dir * oh.t;
      best.normal = oh.normal;
      best.color = oh.color;
      best.on_occluder = occluder;
    }
  };
  for (const auto& p : spec_.planes) consider(hit_plane(p, origin, dir), false);
  for (const auto& s : spec_.spheres) consider(hit_sphere(s, origin, dir), false);
  for (const auto& s : spec_.slabs) consider(hit_slab(s, origin, dir), s.occluder);
  return best;
}

bool SyntheticScene::point_visible_from(const Vec3& p, const Vec3& eye) const {
  Vec3 d = eye - p;
  double dist = norm(d);
  if (dist < 1e-9) return true;
  Vec3 dir = d / dist;
  SceneHit h = first_hit(p + dir * 1e-5, dir);
  return !h.hit || h.t >= dist - 1e-4;
}

Vec3 SyntheticScene::shade(const SceneHit& hit) const {
  static const Vec3 light = normalized({0.35, 0.25, 0.9});
  double lambert = 0.65 + 0.35 * std::max(0.0, dot(hit.normal, light));
  return hit.color * lambert;
}

std::vector<float> SyntheticScene::render(const Camera& cam, int subrays) const {
  const std::int64_t w = cam.width, h = cam.height;
  std::vector<float> out(static_cast<std::size_t>(w * h * 3), 0.f);
  int grid = std::max(1, static_cast<int>(std::lround(std::sqrt(double(subrays)))));

  std::uint64_t cam_tag = fnv1a(&cam.center, sizeof(cam.center));
  cam_tag = fnv1a(&cam.rotation, sizeof(cam.rotation), cam_tag);
  cam_tag = fnv1a(&w, sizeof(w), cam_tag);
  Rng base = Rng(spec_.seed).stream("render").stream(cam_tag);

  parallel_for(w * h, [&](std::int64_t p0, std::int64_t p1) {
    for (std::int64_t p = p0; p < p1; ++p) {
      std::int64_t px = p % w, py = p / w;
      Rng rng = base.stream(static_cast<std::uint64_t>(p));
      Vec3 acc{0, 0, 0};
      for (int sy = 0; sy < grid; ++sy)
        for (int sx = 0; sx < grid; ++sx) {
          double u = static_cast<double>(px) + (sx + rng.uniform()) / grid;
          double v = static_cast<double>(py) + (sy + rng.uniform()) / grid;
          SceneHit hit = first_hit(cam.center, cam.ray_direction(u, v));
          if (hit.hit) acc = acc + shade(hit);
        }
      double inv = 1.0 / (grid * grid);
      out[p * 3 + 0] = static_cast<float>(std::clamp(acc.x * inv, 0.0, 1.0));
      out[p * 3 + 1] = static_cast<float>(std::clamp(acc.y * inv, 0.0, 1.0));
      out[p * 3 + 2] = static_cast<float>(std::clamp(acc.z * inv, 0.0, 1.0));
    }
  });
  return out;
}

std::vector<std::uint8_t> SyntheticScene::occluder_mask(const Camera& cam) const {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(cam.width * cam.height), 0);
  for (std::int64_t p = 0; p < cam.width * cam.height; ++p) {
    double u = static_cast<double>(p % cam.width) + 0.5;
    double v = static_cast<double>(p / cam.width) + 0.5;
    SceneHit hit = first_hit(cam.center, cam.ray_direction(u, v));
    mask[static_cast<std::size_t>(p)] = hit.hit && hit.on_occluder ? 255 : 0;
  }
  return mask;
}

std::vector<std::uint8_t> SyntheticScene::occlusion_mask_between(const Camera& cam,
                                                                 const Camera& source) const {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(cam.width * cam.height), 0);
  for (std::int64_t p = 0; p < cam.width * cam.height; ++p) {
    double u = static_cast<double>(p % cam.width) + 0.5;
    double v = static_cast<double>(p / cam.width) + 0.5;
    SceneHit hit = first_hit(cam.center, cam.ray_direction(u, v));
    if (!hit.hit || hit.on_occluder) continue;
    mask[static_cast<std::size_t>(p)] = point_visible_from(hit.point, source.center) ? 0 : 255;
  }
  return mask;
}

// --- spec serialization -----------------------------------------------------

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw UserError("scene spec: unknown key '" + it.key() + "' in " + where);
}

Vec3 parse_vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw UserError("scene spec: expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json vec3_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

Texture parse_texture(const json& j) {
  check_keys(j, {"kind", "color_a", "color_b", "period", "seed"}, "texture");
  Texture t;
  std::string kind = j.value("kind", "solid");
  if (kind == "solid")
    t.kind = Texture::Kind::solid;
  else if (kind == "checker")
    t.kind = Texture::Kind::checker;
  else if (kind == "noise")
    t.kind = Texture::Kind::noise;
  else if (kind == "stripes")
    t.kind = Texture::Kind::stripes;
  else
    throw UserError("scene spec: unknown texture kind '" + kind + "'");
  if (j.contains("color_a")) t.color_a = parse_vec3(j["color_a"]);
  if (j.contains("color_b")) t.color_b = parse_vec3(j["color_b"]);
  t.period = j.value("period", t.period);
  t.seed = j.value("seed", t.seed);
  return t;
}

json texture_json(const Texture& t) {
  const char* kind = t.kind == Texture::Kind::solid     ? "solid"
                     : t.kind == Texture::Kind::checker ? "checker"
                     : t.kind == Texture::Kind::noise   ? "noise"
                                                        : "stripes";
  return json{{"kind", kind},
              {"color_a", vec3_json(t.color_a)},
              {"color_b", vec3_json(t.color_b)},
              {"period", t.period},
              {"seed", t.seed}};
}

}  // namespace

SceneSpec parse_scene_spec(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    throw UserError(std::string("scene spec: invalid JSON: ") + e.what());
  }
  check_keys(j, {"seed", "rig", "test_views", "target_scales", "objects"}, "scene spec");
  SceneSpec spec;
  spec.seed = j.value("seed", spec.seed);
  if (j.contains("rig")) {
    const json& r = j["rig"];
    check_keys(r, {"type", "views", "radius", "height", "look_at", "fov_deg", "width",
                   "height_px", "near", "far"},
               "rig");
    spec.rig.type = r.value("type", spec.rig.type);
    spec.rig.views = r.value("views", spec.rig.views);
    spec.rig.radius = r.value("radius", spec.rig.radius);
    spec.rig.height = r.value("height", spec.rig.height);
    if (r.contains("look_at")) spec.rig.look_at = parse_vec3(r["look_at"]);
    spec.rig.fov_deg = r.value("fov_deg", spec.rig.fov_deg);
    spec.rig.width = r.value("width", spec.rig.width);
    spec.rig.height_px = r.value("height_px", spec.rig.height_px);
    spec.rig.near = r.value("near", spec.rig.near);
    spec.rig.far = r.value("far", spec.rig.far);
  }
  if (j.contains("test_views")) spec.test_views = j["test_views"].get<std::vector<int>>();
  if (j.contains("target_scales"))
    spec.target_scales = j["target_scales"].get<std::vector<double>>();
  if (j.contains("objects")) {
    spec.planes.clear();
    spec.spheres.clear();
    spec.slabs.clear();
    for (const json& o : j["objects"]) {
      std::string type = o.value("type", "");
      if (type == "plane") {
        check_keys(o, {"type", "point", "normal", "extent", "texture"}, "plane");
        PlaneObject p;
        if (o.contains("point")) p.point = parse_vec3(o["point"]);
        if (o.contains("normal")) p.normal = normalized(parse_vec3(o["normal"]));
        p.extent = o.value("extent", p.extent);
        if (o.contains("texture")) p.texture = parse_texture(o["texture"]);
        spec.planes.push_back(p);
      } else if (type == "sphere") {
        check_keys(o, {"type", "center", "radius", "texture"}, "sphere");
        SphereObject s;
        if (o.contains("center")) s.center = parse_vec3(o["center"]);
        s.radius = o.value("radius", s.radius);
        if (o.contains("texture")) s.texture = parse_texture(o["texture"]);
        spec.spheres.push_back(s);
      } else if (type == "slab") {
        check_keys(o, {"type", "center", "half_extents", "color", "occluder"}, "slab");
        SlabObject s;
        if (o.contains("center")) s.center = parse_vec3(o["center"]);
        if (o.contains("half_extents")) s.half_extents = parse_vec3(o["half_extents"]);
        if (o.contains("color")) s.color = parse_vec3(o["color"]);
        s.occluder = o.value("occluder", s.occluder);
        spec.slabs.push_back(s);
      } else {
        throw UserError("scene spec: unknown object type '" + type + "'");
      }
    }
  }
  return spec;
}

std::string scene_spec_to_json(const SceneSpec& spec) {
  json objects = json::array();
  for (const auto& p : spec.planes)
    objects.push_back(json{{"type", "plane"},
                           {"point", vec3_json(p.point)},
                           {"normal", vec3_json(p.normal)},
                           {"extent", p.extent},
                           {"texture", texture_json(p.texture)}});
  for (const auto& s : spec.spheres)
    objects.push_back(json{{"type", "sphere"},
                           {"center", vec3_json(s.center)},
                           {"radius", s.radius},
                           {"texture", texture_json(s.texture)}});
  for (const auto& s : spec.slabs)
    objects.push_back(json{{"type", "slab"},
                           {"center", vec3_json(s.center)},
                           {"half_extents", vec3_json(s.half_extents)},
                           {"color", vec3_json(s.color)},
                           {"occluder", s.occluder}});
  json j{{"seed", spec.seed},
         {"rig",
          {{"type", spec.rig.type},
           {"views", spec.rig.views},
           {"radius", spec.rig.radius},
           {"height", spec.rig.height},
           {"look_at", vec3_json(spec.rig.look_at)},
           {"fov_deg", spec.rig.fov_deg},
           {"width", spec.rig.width},
           {"height_px", spec.rig.height_px},
           {"near", spec.rig.near},
           {"far", spec.rig.far}}},
         {"test_views", spec.test_views},
         {"target_scales", spec.target_scales},
         {"objects", objects}};
  return j.dump(2);
}

std::string format_scale_tag(double scale) {
  if (scale == std::floor(scale) && scale < 1e6)
    return std::to_string(static_cast<long long>(scale));
  std::string s = std::to_string(scale);
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}

void write_scene_dataset(const SyntheticScene& scene, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  json views = json::array();
  char name[64];
  for (int vi = 0; vi < scene.spec().rig.views; ++vi) {
    const Camera& cam = scene.cameras()[static_cast<std::size_t>(vi)];
    bool test = scene.is_test_view(vi);
    const char* split = test ? "test" : "train";
    for (double scale : scene.spec().target_scales) {
      Camera scaled = cam.scaled(scale);
      std::snprintf(name, sizeof(name), "%s_%04d_%s.png", split, vi,
                    format_scale_tag(scale).c_str());
      auto img = scene.render(scaled);
      write_png_rgb(out_dir / name, img, scaled.width, scaled.height);

      json k = json::array({json::array({scaled.fx, 0.0, scaled.cx}),
                            json::array({0.0, scaled.fy, scaled.cy}),
                            json::array({0.0, 0.0, 1.0})});
      json c2w = json::array();
      for (int r = 0; r < 3; ++r)
        c2w.push_back(json::array({scaled.rotation.m[r][0], scaled.rotation.m[r][1],
                                   scaled.rotation.m[r][2],
                                   r == 0   ? scaled.center.x
                                   : r == 1 ? scaled.center.y
                                            : scaled.center.z}));
      c2w.push_back(json::array({0.0, 0.0, 0.0, 1.0}));
      views.push_back(json{{"split", split},
                           {"view", vi},
                           {"scale", scale},
                           {"width", scaled.width},
                           {"height", scaled.height},
                           {"near", scaled.near},
                           {"far", scaled.far},
                           {"intrinsics", k},
                           {"camera_to_world", c2w},
                           {"image", name}});
    }
    if (scene.has_occluder()) {
      std::snprintf(name, sizeof(name), "occlusion_mask_%04d.png", vi);
      PngImage mask;
      mask.width = cam.width;
      mask.height = cam.height;
      mask.channels = 1;
      mask.pixels = scene.occluder_mask(cam);
      write_png(out_dir / name, mask);
    }
  }

  json root{{"scene_seed", scene.spec().seed}, {"views", views}};
  std::ofstream f(out_dir / "cameras.json");
  if (!f) throw UserError("dataset: cannot write cameras.json in '" + out_dir.string() + "'");
  f << root.dump(2) << "\n";

  std::ofstream sf(out_dir / "scene_spec.json");
  sf << scene_spec_to_json(scene.spec()) << "\n";
}

}  // namespace lirf
