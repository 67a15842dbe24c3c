#pragma once

#include <vector>

#include "lirf/model.hpp"

namespace lirf {

struct FeatureMaps {
  Tensor f_w;  // [H,W,C] visibility-head features
  Tensor f_c;  // [H,W,C] color/density-head features
};

// Reduced EDSR-style extractor: conv stem, residual blocks without any
// normalization layers, and two head convolutions producing the visibility
// and color/density feature maps at full input resolution.
class Encoder {
 public:
  Encoder(const ModelConfig& cfg, ParamStore& store, const Rng& init);

  // image [H,W,3] with values in [0,1].
  FeatureMaps extract(const Tensor& image) const;

  std::int64_t channels() const { return channels_; }

 private:
  std::int64_t channels_;
  Conv stem_;
  std::vector<Conv> block_convs_;  // two per residual block
  Conv head_w_, head_c_;
};

struct PointSample {
  Tensor features;                      // [P, C]
  std::vector<std::uint8_t> in_bounds;  // per point
};

// Differentiable bilinear lookup of per-point features; identical to the
// underlying bilinear primitive.
PointSample sample_point_features(const Tensor& map, std::span<const double> uv);

struct PatchSample {
  Tensor features;               // [P, patch*patch*C], taps row-major, channels fastest
  std::vector<double> coverage;  // fraction of in-bounds taps per point
};

// patch x patch bilinear taps on the unit pixel grid centered at each uv.
PatchSample extract_patch_features(const Tensor& map, std::span<const double> uv,
                                   std::int64_t patch);

}  // namespace lirf
