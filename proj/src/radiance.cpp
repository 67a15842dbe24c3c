#include "lirf/radiance.hpp"

namespace lirf {

Radiance::Radiance(const ModelConfig& cfg, ParamStore& store, const Rng& init)
    : cfg_(cfg), dim_(cfg.token_dim) {
  Dtype dt = cfg.dtype;
  t1_mlp0_ = Linear(store, "radiance.t1_mlp0", dim_ + 1, dim_, dt, init);
  t1_mlp1_ = Linear(store, "radiance.t1_mlp1", dim_, dim_, dt, init);
  t2_mlp0_ = Linear(store, "radiance.t2_mlp0", 2 * dim_, dim_, dt, init);
  t2_mlp1_ = Linear(store, "radiance.t2_mlp1", dim_, dim_, dt, init);
  for (std::int64_t l = 0; l < cfg.t2_layers; ++l)
    t2_blocks_.emplace_back(store, "radiance.t2_block" + std::to_string(l), dim_, cfg.heads,
                            cfg.ff_dim, dt, init);
  ae_down1_ = Conv(store, "radiance.ae.down1", dim_, 2 * dim_, 1, 3, dt, init);
  ae_down2_ = Conv(store, "radiance.ae.down2", 2 * dim_, 4 * dim_, 1, 3, dt, init);
  ae_up1_ = Conv(store, "radiance.ae.up1", 4 * dim_ + 2 * dim_, 2 * dim_, 1, 3, dt, init);
  ae_up2_ = Conv(store, "radiance.ae.up2", 2 * dim_ + dim_, dim_, 1, 3, dt, init);
  sigma0_ = Linear(store, "radiance.sigma0", dim_, dim_, dt, init);
  sigma1_ = Linear(store, "radiance.sigma1", dim_, 1, dt, init);
  color0_ = Linear(store, "radiance.color0", dim_, dim_, dt, init);
  color1_ = Linear(store, "radiance.color1", dim_, dim_, dt, init);
  color2_ = Linear(store, "radiance.color2", dim_, 3, dt, init);
}

Radiance::FusionTokens Radiance::fuse(const Tensor& z, const Tensor& w) const {
  if (z.rank() != 3 || w.rank() != 2 || z.dim(0) != w.dim(0) || z.dim(1) != w.dim(1))
    throw ShapeError("fuse_features", "expected z [S,V,Z] with w [S,V], got " +
                                          format_shape(z.shape().data(), z.rank()) + " and " +
                                          format_shape(w.shape().data(), w.rank()));
  std::int64_t s = z.dim(0), v = z.dim(1), zc = z.dim(2);

  Tensor w_col = ops::reshape(w, {s, v, 1});
  Tensor zw = ops::concat({z, w_col}, 2);
  Tensor t1 = t1_mlp1_(ops::elu(t1_mlp0_(ops::reshape(zw, {s * v, zc + 1}))));

  Tensor mean = ops::reduce_mean(z, 1, w);
  Tensor var = ops::reduce_var(z, 1, w);
  Tensor t2 = t2_mlp1_(ops::elu(t2_mlp0_(ops::concat({mean, var}, 1))));

  return {ops::reshape(t1, {s, v, dim_}), t2};
}

Radiance::FusionTokens Radiance::cross_attend(const FusionTokens& tokens) const {
  std::int64_t s = tokens.view_tokens.dim(0), v = tokens.view_tokens.dim(1);
  Tensor joint = ops::concat({tokens.view_tokens, ops::reshape(tokens.consistency, {s, 1, dim_})}, 1);
  for (const auto& block : t2_blocks_) joint = block(joint);
  FusionTokens out;
  out.view_tokens = ops::slice(joint, 1, 0, v);
  out.consistency = ops::reshape(ops::slice(joint, 1, v, 1), {s, dim_});
  return out;
}

Tensor Radiance::density_along_ray(const Tensor& consistency, std::int64_t rays,
                                   std::int64_t n) const {
  if (consistency.dim(0) != rays * n)
    throw ShapeError("density_along_ray", "token count " + std::to_string(consistency.dim(0)) +
                                              " does not match " + std::to_string(rays) + "x" +
                                              std::to_string(n));
  std::int64_t padded = std::max<std::int64_t>(4, (n + 3) / 4 * 4);
  Tensor x = ops::reshape(consistency, {rays, n, dim_});
  if (padded != n) {
    Tensor pad = Tensor::zeros(consistency.dtype(), {rays, padded - n, dim_});
    x = ops::concat({x, pad}, 1);
  }

  // Along-ray encoder-decoder; kernel height 1 keeps rays independent.
  auto conv_along = [](const Conv& c, const Tensor& t, std::int64_t stride_w) {
    return ops::add(ops::conv2d(t, c.k, 1, stride_w, 0, 1), c.b);
  };
  Tensor d1 = ops::elu(conv_along(ae_down1_, x, 2));                       // [R, P/2, 2D]
  Tensor d2 = ops::elu(conv_along(ae_down2_, d1, 2));                      // [R, P/4, 4D]
  Tensor u1 = ops::elu(conv_along(ae_up1_, ops::concat({ops::upsample2x_w(d2), d1}, 2), 1));
  Tensor u2 = ops::elu(conv_along(ae_up2_, ops::concat({ops::upsample2x_w(u1), x}, 2), 1));
  Tensor along = padded != n ? ops::slice(u2, 1, 0, n) : u2;

  Tensor flat = ops::reshape(along, {rays * n, dim_});
  Tensor sigma = ops::softplus(sigma1_(ops::elu(sigma0_(flat))));
  return ops::reshape(sigma, {rays, n});
}

Tensor Radiance::predict_color(const Tensor& view_tokens, const Tensor& w) const {
  if (view_tokens.dim(0) != w.dim(0) || view_tokens.dim(1) != w.dim(1))
    throw ShapeError("predict_color", "token/weight shape mismatch");
  Tensor blend = ops::reduce_mean(view_tokens, 1, w);  // sum_k w_k t1'_k
  Tensor h = ops::elu(color1_(ops::elu(color0_(blend))));
  return ops::sigmoid(color2_(h));
}

}  // namespace lirf
