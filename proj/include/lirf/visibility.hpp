#pragma once

#include "lirf/model.hpp"

namespace lirf {

// Per-sample, per-source-view visibility weights: token construction from
// feature patches, one cross-view self-attention block, and a weight head
// normalized across views. Views flagged fully out of frame are excluded
// before normalization and receive weight zero.
//
// The patch half of the token layer is held as a PxP convolution kernel:
// flattening bilinear patch taps into a dense layer is algebraically a
// convolution over the feature map followed by one bilinear lookup, and the
// conv form touches far less memory. build_tokens keeps the flattened-row
// contract for the spec'd op; both routes share the same parameters.
class Visibility {
 public:
  Visibility(const ModelConfig& cfg, ParamStore& store, const Rng& init);

  std::int64_t token_dim() const { return dim_; }
  std::int64_t input_dim() const { return patch_dim_ + rest_dim_; }
  std::int64_t rest_dim() const { return rest_dim_; }  // encoded dirs + scale

  // Conv response of a source feature map (replicate-padded): [H,W,D].
  Tensor patch_response(const Tensor& f_w) const;

  // Tokens from bilinear-sampled responses [S*V, D] plus the constant
  // direction/scale rows [S*V, rest_dim] (undefined when rest_dim is 0).
  Tensor tokens_from_responses(const Tensor& responses, const Tensor& rest_rows,
                               std::int64_t samples, std::int64_t views) const;

  // Flattened-patch route: patch_rows [S*V, P*P*C] (view-minor), encoded
  // directions, raw scale latent.
  Tensor build_tokens(const Tensor& patch_rows, const Tensor& encoded_dirs,
                      const Tensor& scale_column, std::int64_t samples,
                      std::int64_t views) const;

  // Cross-view matching; needs at least two views.
  Tensor match_views(const Tensor& tokens) const;

  // [S,V] weights summing to 1 over views. valid flags samples*views entries;
  // a sample with every view masked is an error (invisible everywhere).
  Tensor predict(const Tensor& matched_tokens,
                 std::span<const std::uint8_t> valid = {}) const;

 private:
  Tensor patch_weight_matrix() const;  // [P*P*C, D] view of the conv kernel

  const ModelConfig cfg_;
  std::int64_t dim_, patch_dim_, rest_dim_;
  Tensor patch_kernel_;  // [D, C, P, P]
  Linear rest_;          // carries the token-layer bias
  Linear token1_;
  TransformerBlock matcher_;
  Linear head0_, head1_;
};

}  // namespace lirf
