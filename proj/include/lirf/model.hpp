#pragma once

#include <cstdint>
#include <string>

#include "lirf/adam.hpp"
#include "lirf/ops.hpp"
#include "lirf/tensor.hpp"

namespace lirf {

struct AblationFlags {
  bool single_ray = false;     // render a pixel from one infinitesimal ray
  bool no_scale = false;       // drop the scale latent s
  bool no_position = false;    // drop the encoded relative position
  bool no_patch = false;       // visibility patches collapse to 1x1
  bool no_direction = false;   // drop the encoded source-ray direction
  bool no_vis_weights = false; // uniform 1/V everywhere instead of learned w
};

struct ModelConfig {
  Dtype dtype = Dtype::f32;
  std::int64_t feature_channels = 16;  // extractor output channels (C_w = C_c)
  std::int64_t residual_blocks = 4;
  std::int64_t token_dim = 32;
  std::int64_t heads = 4;
  std::int64_t ff_dim = 64;
  std::int64_t t2_layers = 4;
  std::int64_t pe_position_freqs = 6;  // frequencies for relative positions
  std::int64_t pe_direction_freqs = 4; // frequencies for ray directions
  std::int64_t patch_size = 7;
  std::int64_t vertices = 8;           // M per conical frustum (4, 8 or 10)
  bool inverse_distance_weights = false;
  bool raw_visibility = false;         // sigmoid + explicit normalization
  AblationFlags ablation;

  std::int64_t effective_patch() const { return ablation.no_patch ? 1 : patch_size; }
};

// Dense layer, weight [in,out], zero bias at init.
struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out,
         Dtype dt, const Rng& init, bool zero_init = false);
  Tensor operator()(const Tensor& x) const { return ops::matmul(x, w, b); }
};

// 2D convolution over HWC maps, kernel [Cout,Cin,kh,kw].
struct Conv {
  Tensor k, b;
  std::int64_t kh = 3, kw = 3;
  Conv() = default;
  Conv(ParamStore& store, const std::string& name, std::int64_t cin, std::int64_t cout,
       std::int64_t ksize, Dtype dt, const Rng& init)
      : Conv(store, name, cin, cout, ksize, ksize, dt, init) {}
  Conv(ParamStore& store, const std::string& name, std::int64_t cin, std::int64_t cout,
       std::int64_t kh, std::int64_t kw, Dtype dt, const Rng& init);
  Tensor operator()(const Tensor& x, std::int64_t stride_h = 1, std::int64_t stride_w = 1,
                    std::int64_t pad_h = -1, std::int64_t pad_w = -1) const;
};

// Pre-norm self-attention block; attention and feed-forward output
// projections start at zero so a fresh block is the identity map.
struct TransformerBlock {
  Linear wq, wk, wv, wo, ff1, ff2;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  std::int64_t heads = 4;
  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& name, std::int64_t dim,
                   std::int64_t heads, std::int64_t ff_dim, Dtype dt, const Rng& init);
  Tensor operator()(const Tensor& x) const;  // [B,S,D] -> [B,S,D]
};

// Sinusoidal positional encoding: per component, per frequency l < L, the
// pair (sin(2^l pi p), cos(2^l pi p)); component-major layout.
void positional_encode(std::span<const double> v, std::int64_t freqs, double* out);
std::vector<double> positional_encode(std::span<const double> v, std::int64_t freqs);

}  // namespace lirf
