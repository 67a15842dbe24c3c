#include "lirf/visibility.hpp"

#include <cmath>

namespace lirf {

Visibility::Visibility(const ModelConfig& cfg, ParamStore& store, const Rng& init)
    : cfg_(cfg), dim_(cfg.token_dim) {
  const std::int64_t patch = cfg.effective_patch();
  const std::int64_t c = cfg.feature_channels;
  patch_dim_ = patch * patch * c;
  rest_dim_ = 0;
  if (!cfg.ablation.no_direction) rest_dim_ += 2 * cfg.pe_direction_freqs * 3;
  if (!cfg.ablation.no_scale) rest_dim_ += 1;

  patch_kernel_ = store.create("visibility.patch_conv.weight", cfg.dtype, {dim_, c, patch, patch});
  {
    double bound = std::sqrt(6.0 / static_cast<double>(patch_dim_ + rest_dim_ + dim_));
    Rng r = init.stream("visibility.patch_conv.weight");
    for (std::int64_t i = 0; i < patch_kernel_.numel(); ++i)
      patch_kernel_.values().set(i, r.uniform(-bound, bound));
  }
  rest_ = Linear(store, "visibility.token0_rest", std::max<std::int64_t>(rest_dim_, 1), dim_,
                 cfg.dtype, init);
  if (rest_dim_ == 0) rest_.w.values().fill(0.0);
  token1_ = Linear(store, "visibility.token1", dim_, dim_, cfg.dtype, init);
  matcher_ =
      TransformerBlock(store, "visibility.t1", dim_, cfg.heads, cfg.ff_dim, cfg.dtype, init);
  head0_ = Linear(store, "visibility.head0", dim_, dim_, cfg.dtype, init);
  head1_ = Linear(store, "visibility.head1", dim_, 1, cfg.dtype, init);
}

Tensor Visibility::patch_response(const Tensor& f_w) const {
  const std::int64_t h = f_w.dim(0), w = f_w.dim(1), c = f_w.dim(2);
  const std::int64_t pad = cfg_.effective_patch() / 2;
  Tensor padded = f_w;
  if (pad > 0) {
    // Replicate padding via a row gather, matching border-clamped patch taps.
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>((h + 2 * pad) * (w + 2 * pad)));
    for (std::int64_t y = -pad; y < h + pad; ++y)
      for (std::int64_t x = -pad; x < w + pad; ++x) {
        std::int64_t cy = std::clamp<std::int64_t>(y, 0, h - 1);
        std::int64_t cx = std::clamp<std::int64_t>(x, 0, w - 1);
        idx.push_back(cy * w + cx);
      }
    padded = ops::reshape(ops::gather_rows(ops::reshape(f_w, {h * w, c}), idx),
                          {h + 2 * pad, w + 2 * pad, c});
  }
  return ops::conv2d(padded, patch_kernel_, 1, 1, 0, 0);
}

Tensor Visibility::tokens_from_responses(const Tensor& responses, const Tensor& rest_rows,
                                         std::int64_t samples, std::int64_t views) const {
  Tensor pre;
  if (rest_dim_ > 0) {
    if (!rest_rows.defined() || rest_rows.dim(1) != rest_dim_)
      throw ShapeError("build_tokens", "expected direction/scale rows of width " +
                                           std::to_string(rest_dim_));
    pre = ops::add(responses, rest_(rest_rows));
  } else {
    pre = ops::add(responses, rest_.b);
  }
  Tensor t0 = token1_(ops::elu(pre));
  return ops::reshape(t0, {samples, views, dim_});
}

Tensor Visibility::patch_weight_matrix() const {
  // kernel [D, C, P, P] -> rows ordered (dy, dx, c) to match the flattened
  // patch layout (taps row-major, channels fastest).
  const std::int64_t patch = cfg_.effective_patch();
  const std::int64_t c = cfg_.feature_channels;
  Tensor flat = ops::transpose2d(ops::reshape(patch_kernel_, {dim_, c * patch * patch}));
  std::vector<std::int64_t> perm;
  perm.reserve(static_cast<std::size_t>(patch * patch * c));
  for (std::int64_t t = 0; t < patch * patch; ++t)
    for (std::int64_t ch = 0; ch < c; ++ch) perm.push_back(ch * patch * patch + t);
  return ops::gather_rows(flat, perm);
}

Tensor Visibility::build_tokens(const Tensor& patch_rows, const Tensor& encoded_dirs,
                                const Tensor& scale_column, std::int64_t samples,
                                std::int64_t views) const {
  if (patch_rows.dim(1) != patch_dim_)
    throw ShapeError("build_tokens", "patch width " + std::to_string(patch_rows.dim(1)) +
                                         " does not match configured " +
                                         std::to_string(patch_dim_));
  Tensor responses = ops::matmul(patch_rows, patch_weight_matrix());
  Tensor rest_rows;
  if (rest_dim_ > 0) {
    std::vector<Tensor> parts;
    if (!cfg_.ablation.no_direction) parts.push_back(encoded_dirs);
    if (!cfg_.ablation.no_scale) parts.push_back(scale_column);
    rest_rows = parts.size() == 1
                    ? parts[0]
                    : ops::concat(std::span<const Tensor>(parts.data(), parts.size()), 1);
  }
  return tokens_from_responses(responses, rest_rows, samples, views);
}

Tensor Visibility::match_views(const Tensor& tokens) const {
  if (tokens.rank() != 3)
    throw ShapeError("match_views", "tokens must be [S,V,D], got " +
                                        format_shape(tokens.shape().data(), tokens.rank()));
  if (tokens.dim(1) < 2)
    throw std::runtime_error("match_views: cross-view matching needs at least 2 views");
  return matcher_(tokens);
}

Tensor Visibility::predict(const Tensor& matched_tokens,
                           std::span<const std::uint8_t> valid) const {
  std::int64_t s = matched_tokens.dim(0), v = matched_tokens.dim(1);
  Tensor flat = ops::reshape(matched_tokens, {s * v, dim_});
  Tensor logits = ops::reshape(head1_(ops::elu(head0_(flat))), {s, v});
  if (!valid.empty() && static_cast<std::int64_t>(valid.size()) != s * v)
    throw ShapeError("predict_visibility", "validity mask size mismatch");
  if (!valid.empty()) {
    for (std::int64_t i = 0; i < s; ++i) {
      bool any = false;
      for (std::int64_t k = 0; k < v; ++k) any = any || valid[i * v + k];
      if (!any)
        throw std::runtime_error(
            "predict_visibility: sample invisible in every source view");
    }
  }
  if (cfg_.raw_visibility) {
    Tensor pos = ops::sigmoid(logits);
    return ops::normalize(pos, valid);
  }
  return ops::softmax(logits, 1, valid);
}

}  // namespace lirf
