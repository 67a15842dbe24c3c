#include "lirf/rayfn.hpp"

#include <cmath>

namespace lirf {

std::vector<double> frustum_weights(std::span<const Vec3> offsets, bool inverse_distance) {
  if (offsets.empty()) throw std::runtime_error("frustum_weights: no offsets");
  std::vector<double> dist(offsets.size());
  double sum = 0;
  for (std::size_t j = 0; j < offsets.size(); ++j) {
    dist[j] = norm(offsets[j]);
    sum += dist[j];
  }
  if (sum == 0.0)
    throw std::runtime_error("frustum_weights: degenerate frustum (all offsets zero)");

  std::vector<double> w(offsets.size());
  if (!inverse_distance) {
    for (std::size_t j = 0; j < w.size(); ++j) w[j] = dist[j] / sum;
    return w;
  }
  // Inverse-distance alternative; coincident vertices take the full weight.
  std::size_t zeros = 0;
  for (double d : dist)
    if (d == 0.0) ++zeros;
  if (zeros > 0) {
    for (std::size_t j = 0; j < w.size(); ++j)
      w[j] = dist[j] == 0.0 ? 1.0 / static_cast<double>(zeros) : 0.0;
    return w;
  }
  double inv_sum = 0;
  for (double d : dist) inv_sum += 1.0 / d;
  for (std::size_t j = 0; j < w.size(); ++j) w[j] = (1.0 / dist[j]) / inv_sum;
  return w;
}

RayFunction::RayFunction(const ModelConfig& cfg, ParamStore& store, const Rng& init)
    : cfg_(cfg), out_dim_(cfg.token_dim) {
  pe_dim_ = 2 * cfg.pe_position_freqs * 3;
  input_dim_ = cfg.feature_channels;
  if (!cfg.ablation.no_position) input_dim_ += pe_dim_;
  if (!cfg.ablation.no_scale) input_dim_ += 1;
  l0_ = Linear(store, "rayfn.l0", input_dim_, out_dim_, cfg.dtype, init);
  l1_ = Linear(store, "rayfn.l1", out_dim_, out_dim_, cfg.dtype, init);
  l2_ = Linear(store, "rayfn.l2", out_dim_, out_dim_, cfg.dtype, init);
}

Tensor RayFunction::apply(const Tensor& rows) const {
  return l2_(ops::elu(l1_(ops::elu(l0_(rows)))));
}

Tensor RayFunction::aggregate_split(const Tensor& vertex_features, const Tensor& const_rows,
                                    const Tensor& weights) const {
  std::int64_t s = weights.dim(0), m = weights.dim(1);
  if (vertex_features.dim(0) != s * m)
    throw ShapeError("aggregate_sample", "row count mismatch in split aggregation");
  std::int64_t c = cfg_.feature_channels, rest = rest_dim();
  Tensor pre;
  if (rest > 0) {
    if (!const_rows.defined() || const_rows.dim(1) != rest)
      throw ShapeError("aggregate_sample",
                       "expected constant rows of width " + std::to_string(rest));
    Tensor w_feat = ops::slice(l0_.w, 0, 0, c);
    Tensor w_rest = ops::slice(l0_.w, 0, c, rest);
    pre = ops::add(ops::matmul(vertex_features, w_feat, l0_.b),
                   ops::matmul(const_rows, w_rest));
  } else {
    pre = l0_(vertex_features);
  }
  Tensor feats = l2_(ops::elu(l1_(ops::elu(pre))));
  Tensor grouped = ops::reshape(feats, {s, m, out_dim_});
  return ops::reduce_mean(grouped, 1, weights);
}

Tensor RayFunction::build_rows(const Tensor& vertex_features, const Tensor& encoded_offsets,
                               const Tensor& scale_column) const {
  std::vector<Tensor> parts{vertex_features};
  if (!cfg_.ablation.no_position) parts.push_back(encoded_offsets);
  if (!cfg_.ablation.no_scale) parts.push_back(scale_column);
  if (parts.size() == 1) return vertex_features;
  return ops::concat(std::span<const Tensor>(parts.data(), parts.size()), 1);
}

Tensor RayFunction::aggregate(const Tensor& rows, const Tensor& weights) const {
  std::int64_t s = weights.dim(0), m = weights.dim(1);
  if (rows.dim(0) != s * m)
    throw ShapeError("aggregate_sample", "row count " + std::to_string(rows.dim(0)) +
                                             " does not match weights " + std::to_string(s) +
                                             "x" + std::to_string(m));
  Tensor feats = apply(rows);
  Tensor grouped = ops::reshape(feats, {s, m, out_dim_});
  return ops::reduce_mean(grouped, 1, weights);  // literal sum of W_j * R_j
}

Tensor RayFunction::single_ray(const Tensor& sample_features, const Tensor& scale_column) const {
  std::int64_t s = sample_features.dim(0);
  std::int64_t rest = rest_dim();
  Tensor const_rows;
  if (rest > 0) {
    // gamma(0) = (0, 1, 0, 1, ...) per component/frequency pair, then the
    // raw scale latent.
    const_rows = Tensor::zeros(sample_features.dtype(), {s, rest});
    for (std::int64_t r = 0; r < s; ++r) {
      if (!cfg_.ablation.no_position)
        for (std::int64_t i = 1; i < pe_dim_; i += 2)
          const_rows.values().set(r * rest + i, 1.0);
      if (!cfg_.ablation.no_scale)
        const_rows.values().set(r * rest + rest - 1, scale_column.value_at(r));
    }
  }
  std::int64_t c = cfg_.feature_channels;
  Tensor pre;
  if (rest > 0) {
    Tensor w_feat = ops::slice(l0_.w, 0, 0, c);
    Tensor w_rest = ops::slice(l0_.w, 0, c, rest);
    pre = ops::add(ops::matmul(sample_features, w_feat, l0_.b),
                   ops::matmul(const_rows, w_rest));
  } else {
    pre = l0_(sample_features);
  }
  return l2_(ops::elu(l1_(ops::elu(pre))));
}

}  // namespace lirf
