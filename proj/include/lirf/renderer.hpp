#pragma once

#include <memory>
#include <vector>

#include "lirf/encoders.hpp"
#include "lirf/geometry.hpp"
#include "lirf/radiance.hpp"
#include "lirf/rayfn.hpp"
#include "lirf/visibility.hpp"

namespace lirf {

// The four learned modules over one parameter store; parameter layout is
// fixed by construction order, initialization by per-parameter seed streams.
struct Pipeline {
  ModelConfig cfg;
  ParamStore params;
  Encoder encoder;
  RayFunction rayfn;
  Visibility visibility;
  Radiance radiance;

  Pipeline(const ModelConfig& c, std::uint64_t init_seed);
};

struct RenderOptions {
  std::int64_t samples_per_ray = 32;  // N
  bool jitter = false;                // stratified sample depths (training)
  DepthSampling depth_mode = DepthSampling::uniform;
};

// Cone radius policy in normalized image units: the pixel width of the
// lowest-resolution target. Training targets span x1 and up, so the radius is
// 1/base_width; below x1 rendering widens it to the coarser pixel
// (doubling it at x0.5). In target pixels this is max(scale, 1).
double cone_radius_pixels(double scale);

struct SourceViewData {
  Camera camera;
  FeatureMaps maps;  // extracted from the x1-resolution source image
};

struct RenderContext {
  Pipeline* pipeline = nullptr;
  Camera base_camera;    // x1 target camera; defines the cone-sharing grid
  Camera target_camera;  // base_camera.scaled(scale)
  double scale = 1.0;    // effective scale (target width / base width)
  std::vector<SourceViewData> sources;
  RenderOptions options;
};

RenderContext make_render_context(Pipeline& pipeline, const Camera& base_camera, double scale,
                                  std::vector<SourceViewData> sources,
                                  const RenderOptions& options);

struct RenderStats {
  std::int64_t vertex_feature_taps = 0;  // bilinear lookups of frustum vertices
  std::int64_t cones_built = 0;
};

struct RayBatchResult {
  Tensor rgb;         // [R,3]; tape-connected when a tape is active
  Tensor alpha;       // [R] detached
  Tensor weights;     // [R,N] detached compositing weights
  Tensor visibility;  // [R,V] detached compositing-weighted visibility
};

// Renders the rays through the given target pixel centers (target-scale
// pixel units). Above x1, rays falling in one base-grid cell share that
// cone's frustum-vertex features; ray-specific offsets, visibility and
// radiance are always recomputed per ray.
RayBatchResult render_rays(const RenderContext& ctx, std::span<const double> pixel_uv,
                           Rng& rng, RenderStats* stats = nullptr);

// Convenience single-ray entry point.
RayBatchResult render_ray(const RenderContext& ctx, double u, double v, Rng& rng);

struct ImageRender {
  std::vector<float> rgb;  // row-major [H,W,3]
  std::int64_t width = 0, height = 0;
  std::vector<float> view_visibility;  // [H*W, V] when requested
};

ImageRender render_image(const RenderContext& ctx, Rng& rng, RenderStats* stats = nullptr,
                         bool want_visibility = false, std::int64_t chunk_rays = 256);

// Finite-difference check of d rgb / d parameter on a tiny two-view
// instance at 32-bit; returns the max relative error over probed parameters.
double render_ray_gradcheck(std::uint64_t seed, int probes = 24);

}  // namespace lirf
