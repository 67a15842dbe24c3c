#pragma once

#include "lirf/model.hpp"

namespace lirf {

// Fuses per-view sample features and visibility weights into color and
// density: view tokens plus a weighted-moments consistency token, a
// multi-layer self-attention transformer over views + consistency token,
// density from an along-ray encoder-decoder, and color from the explicit
// visibility-weighted blend.
class Radiance {
 public:
  Radiance(const ModelConfig& cfg, ParamStore& store, const Rng& init);

  struct FusionTokens {
    Tensor view_tokens;   // [S,V,D]
    Tensor consistency;   // [S,D]
  };

  // z [S,V,Z], w [S,V] with rows summing to 1.
  FusionTokens fuse(const Tensor& z, const Tensor& w) const;

  // Joint self-attention over V view tokens plus the consistency token.
  FusionTokens cross_attend(const FusionTokens& tokens) const;

  // consistency tokens in ray-major sample order [R*N, D] -> densities [R,N].
  // N is padded to a multiple of four (at least four) for the two
  // downsampling levels and cropped back.
  Tensor density_along_ray(const Tensor& consistency, std::int64_t rays,
                           std::int64_t samples_per_ray) const;

  // [S,V,D] tokens blended by w then mapped to rgb in [0,1]: [S,3].
  Tensor predict_color(const Tensor& view_tokens, const Tensor& w) const;

 private:
  const ModelConfig cfg_;
  std::int64_t dim_;
  Linear t1_mlp0_, t1_mlp1_;
  Linear t2_mlp0_, t2_mlp1_;
  std::vector<TransformerBlock> t2_blocks_;
  Conv ae_down1_, ae_down2_, ae_up1_, ae_up2_;
  Linear sigma0_, sigma1_;
  Linear color0_, color1_, color2_;
};

}  // namespace lirf
