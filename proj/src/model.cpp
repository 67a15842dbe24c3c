#include "lirf/model.hpp"

#include <cmath>

namespace lirf {

namespace {

void fill_uniform(Tensor& t, double bound, Rng rng) {
  for (std::int64_t i = 0; i < t.numel(); ++i) t.values().set(i, rng.uniform(-bound, bound));
}

}  // namespace

Linear::Linear(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out,
               Dtype dt, const Rng& init, bool zero_init) {
  w = store.create(name + ".weight", dt, {in, out});
  b = store.create(name + ".bias", dt, {out});
  if (!zero_init) {
    double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    fill_uniform(w, bound, init.stream(name + ".weight"));
  }
}

Conv::Conv(ParamStore& store, const std::string& name, std::int64_t cin, std::int64_t cout,
           std::int64_t kh_in, std::int64_t kw_in, Dtype dt, const Rng& init)
    : kh(kh_in), kw(kw_in) {
  k = store.create(name + ".weight", dt, {cout, cin, kh, kw});
  b = store.create(name + ".bias", dt, {cout});
  double fan_in = static_cast<double>(cin * kh * kw);
  fill_uniform(k, std::sqrt(6.0 / fan_in), init.stream(name + ".weight"));
}

Tensor Conv::operator()(const Tensor& x, std::int64_t stride_h, std::int64_t stride_w,
                        std::int64_t pad_h, std::int64_t pad_w) const {
  if (pad_h < 0) pad_h = kh / 2;
  if (pad_w < 0) pad_w = kw / 2;
  return ops::add(ops::conv2d(x, k, stride_h, stride_w, pad_h, pad_w), b);
}

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& name,
                                   std::int64_t dim, std::int64_t nheads, std::int64_t ff_dim,
                                   Dtype dt, const Rng& init)
    : heads(nheads) {
  wq = Linear(store, name + ".wq", dim, dim, dt, init);
  wk = Linear(store, name + ".wk", dim, dim, dt, init);
  wv = Linear(store, name + ".wv", dim, dim, dt, init);
  wo = Linear(store, name + ".wo", dim, dim, dt, init, /*zero_init=*/true);
  ff1 = Linear(store, name + ".ff1", dim, ff_dim, dt, init);
  ff2 = Linear(store, name + ".ff2", ff_dim, dim, dt, init, /*zero_init=*/true);
  ln1_g = store.create(name + ".ln1.gamma", dt, {dim});
  ln1_b = store.create(name + ".ln1.beta", dt, {dim});
  ln2_g = store.create(name + ".ln2.gamma", dt, {dim});
  ln2_b = store.create(name + ".ln2.beta", dt, {dim});
  ln1_g.values().fill(1.0);
  ln2_g.values().fill(1.0);
}

Tensor TransformerBlock::operator()(const Tensor& x) const {
  const auto shape = x.shape();
  std::int64_t d = shape.back();
  std::int64_t rows = x.numel() / d;

  auto affine_norm = [&](const Tensor& t, const Tensor& g, const Tensor& bb) {
    return ops::add(ops::mul(ops::layer_norm(t), g), bb);
  };

  Tensor n1 = affine_norm(x, ln1_g, ln1_b);
  Tensor flat = ops::reshape(n1, {rows, d});
  Tensor q = ops::reshape(wq(flat), shape);
  Tensor k = ops::reshape(wk(flat), shape);
  Tensor v = ops::reshape(wv(flat), shape);
  Tensor att = ops::multi_head_attention(q, k, v, heads);
  Tensor proj = ops::reshape(wo(ops::reshape(att, {rows, d})), shape);
  Tensor h = ops::add(x, proj);

  Tensor n2 = affine_norm(h, ln2_g, ln2_b);
  Tensor ff = ff2(ops::elu(ff1(ops::reshape(n2, {rows, d}))));
  return ops::add(h, ops::reshape(ff, shape));
}

void positional_encode(std::span<const double> v, std::int64_t freqs, double* out) {
  constexpr double pi = 3.14159265358979323846;
  for (std::size_t c = 0; c < v.size(); ++c) {
    double scaled = pi * v[c];
    for (std::int64_t l = 0; l < freqs; ++l) {
      out[c * 2 * freqs + 2 * l] = std::sin(scaled);
      out[c * 2 * freqs + 2 * l + 1] = std::cos(scaled);
      scaled *= 2.0;
    }
  }
}

std::vector<double> positional_encode(std::span<const double> v, std::int64_t freqs) {
  std::vector<double> out(v.size() * 2 * static_cast<std::size_t>(freqs));
  positional_encode(v, freqs, out.data());
  return out;
}

}  // namespace lirf
