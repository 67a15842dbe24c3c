#pragma once

#include "lirf/geometry.hpp"
#include "lirf/model.hpp"

namespace lirf {

// Distance-proportional frustum vertex weights:
//   W_j = ||dx_j|| / sum_l ||dx_l||
// implemented exactly as written (larger weight for farther vertices); the
// inverse_distance flag provides the conventional alternative for studies.
// All-zero offsets are an error here; aggregation substitutes uniform
// weights for that degenerate case before calling.
std::vector<double> frustum_weights(std::span<const Vec3> offsets, bool inverse_distance = false);

// The local implicit ray function R: a 3-layer MLP over
// (vertex feature || encoded relative position || scale latent), combined
// across the M frustum vertices by the distance weights.
class RayFunction {
 public:
  RayFunction(const ModelConfig& cfg, ParamStore& store, const Rng& init);

  std::int64_t input_dim() const { return input_dim_; }
  std::int64_t output_dim() const { return out_dim_; }
  std::int64_t pe_dim() const { return pe_dim_; }
  // Width of the constant tail (encoded offsets and/or scale) of the input.
  std::int64_t rest_dim() const { return input_dim_ - cfg_.feature_channels; }

  // rows [B, input_dim] -> [B, output_dim]
  Tensor apply(const Tensor& rows) const;

  // Same function as build_rows + aggregate but with the constant tail kept
  // out of the gradient path: feature rows [S*M, C] and constant rows
  // [S*M, rest_dim] (undefined when rest_dim is 0) enter the first layer
  // through split products.
  Tensor aggregate_split(const Tensor& vertex_features, const Tensor& const_rows,
                         const Tensor& weights) const;

  // Builds MLP input rows from vertex features [B, C], encoded offsets
  // [B, pe_dim] (ignored under the no-position ablation) and the raw scale
  // latent (ignored under the no-scale ablation).
  Tensor build_rows(const Tensor& vertex_features, const Tensor& encoded_offsets,
                    const Tensor& scale_column) const;

  // z = sum_j W_j R(row_j) over M vertices: rows [S*M, input_dim],
  // weights [S, M] -> [S, output_dim].
  Tensor aggregate(const Tensor& rows, const Tensor& weights) const;

  // Single-ray ablation: one projected sample feature, zero offset, weight 1.
  Tensor single_ray(const Tensor& sample_features, const Tensor& scale_column) const;

 private:
  const ModelConfig cfg_;
  std::int64_t input_dim_, out_dim_, pe_dim_;
  Linear l0_, l1_, l2_;
};

}  // namespace lirf
