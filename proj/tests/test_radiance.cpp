#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "lirf/gradcheck.hpp"
#include "lirf/radiance.hpp"

using namespace lirf;

namespace {

ModelConfig rad_cfg(Dtype dt = Dtype::f64) {
  ModelConfig cfg;
  cfg.dtype = dt;
  cfg.token_dim = 8;
  cfg.heads = 2;
  cfg.ff_dim = 12;
  cfg.t2_layers = 2;
  return cfg;
}

Tensor random_tensor(Rng& rng, std::vector<std::int64_t> shape, double lo = -1, double hi = 1,
                     Dtype dt = Dtype::f64) {
  Tensor t = Tensor::zeros(dt, std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.values().set(i, rng.uniform(lo, hi));
  return t;
}

Tensor normalized_weights(Rng& rng, std::int64_t s, std::int64_t v) {
  Tensor w = Tensor::zeros(Dtype::f64, {s, v});
  for (std::int64_t i = 0; i < s; ++i) {
    double sum = 0;
    std::vector<double> raw(v);
    for (std::int64_t k = 0; k < v; ++k) {
      raw[k] = rng.uniform(0.05, 1.0);
      sum += raw[k];
    }
    for (std::int64_t k = 0; k < v; ++k) w.values().set(i * v + k, raw[k] / sum);
  }
  return w;
}

}  // namespace

TEST_CASE("weighted moments: hand case, identical views, one-hot weights") {
  // V=2, w=(0.5,0.5), z values (0,2): mean 1, var 1.
  Tensor z = Tensor::from(Dtype::f64, {1, 2, 1}, std::vector<double>{0.0, 2.0});
  Tensor w = Tensor::from(Dtype::f64, {1, 2}, std::vector<double>{0.5, 0.5});
  CHECK(ops::reduce_mean(z, 1, w).value_at(0) == doctest::Approx(1.0));
  CHECK(ops::reduce_var(z, 1, w).value_at(0) == doctest::Approx(1.0));

  Rng rng(1);
  Tensor zi = Tensor::zeros(Dtype::f64, {2, 3, 4});
  for (std::int64_t i = 0; i < 2; ++i) {
    std::vector<double> row;
    for (std::int64_t c = 0; c < 4; ++c) row.push_back(rng.uniform(-1, 1));
    for (std::int64_t k = 0; k < 3; ++k)
      for (std::int64_t c = 0; c < 4; ++c) zi.values().set((i * 3 + k) * 4 + c, row[c]);
  }
  Tensor wi = normalized_weights(rng, 2, 3);
  Tensor var = ops::reduce_var(zi, 1, wi);
  for (std::int64_t i = 0; i < var.numel(); ++i)
    CHECK(std::abs(var.value_at(i)) < 1e-12);  // identical views -> zero variance

  Tensor zoh = random_tensor(rng, {1, 3, 4});
  Tensor woh = Tensor::from(Dtype::f64, {1, 3}, std::vector<double>{0.0, 1.0, 0.0});
  Tensor moh = ops::reduce_mean(zoh, 1, woh);
  for (std::int64_t c = 0; c < 4; ++c)
    CHECK(moh.value_at(c) == doctest::Approx(zoh.value_at(1 * 4 + c)));
  Tensor voh = ops::reduce_var(zoh, 1, woh);
  for (std::int64_t c = 0; c < 4; ++c) CHECK(std::abs(voh.value_at(c)) < 1e-12);
}

TEST_CASE("fuse produces per-view and consistency tokens of the configured width") {
  ModelConfig cfg = rad_cfg();
  ParamStore store;
  Radiance rad(cfg, store, Rng(2).stream("init"));
  Rng rng(3);
  Tensor z = random_tensor(rng, {5, 3, cfg.token_dim});
  Tensor w = normalized_weights(rng, 5, 3);
  auto tokens = rad.fuse(z, w);
  CHECK(tokens.view_tokens.shape() == std::vector<std::int64_t>{5, 3, cfg.token_dim});
  CHECK(tokens.consistency.shape() == std::vector<std::int64_t>{5, cfg.token_dim});
}

TEST_CASE("freshly initialized attention blocks pass tokens through unchanged") {
  ModelConfig cfg = rad_cfg();
  ParamStore store;
  Radiance rad(cfg, store, Rng(4).stream("init"));
  Rng rng(5);
  Radiance::FusionTokens tokens;
  tokens.view_tokens = random_tensor(rng, {4, 3, cfg.token_dim});
  tokens.consistency = random_tensor(rng, {4, cfg.token_dim});
  auto out = rad.cross_attend(tokens);
  for (std::int64_t i = 0; i < tokens.view_tokens.numel(); ++i)
    CHECK(out.view_tokens.value_at(i) ==
          doctest::Approx(tokens.view_tokens.value_at(i)).epsilon(1e-12));
  for (std::int64_t i = 0; i < tokens.consistency.numel(); ++i)
    CHECK(out.consistency.value_at(i) ==
          doctest::Approx(tokens.consistency.value_at(i)).epsilon(1e-12));
}

TEST_CASE("view permutation permutes view tokens and fixes the consistency token") {
  ModelConfig cfg = rad_cfg();
  ParamStore store;
  Radiance rad(cfg, store, Rng(6).stream("init"));
  // Break the identity initialization so the test is non-trivial.
  Rng noise(7);
  for (auto p : store.all())
    for (std::int64_t i = 0; i < p.numel(); ++i)
      p.values().set(i, p.value_at(i) + noise.uniform(-0.05, 0.05));

  Rng rng(8);
  const std::int64_t s = 3, v = 4;
  Tensor z = random_tensor(rng, {s, v, cfg.token_dim});
  Tensor w = normalized_weights(rng, s, v);
  auto out = rad.cross_attend(rad.fuse(z, w));

  const int perm[4] = {3, 1, 0, 2};
  Tensor zp = Tensor::zeros(Dtype::f64, {s, v, cfg.token_dim});
  Tensor wp = Tensor::zeros(Dtype::f64, {s, v});
  for (std::int64_t i = 0; i < s; ++i)
    for (std::int64_t k = 0; k < v; ++k) {
      wp.values().set(i * v + k, w.value_at(i * v + perm[k]));
      for (std::int64_t c = 0; c < cfg.token_dim; ++c)
        zp.values().set((i * v + k) * cfg.token_dim + c,
                        z.value_at((i * v + perm[k]) * cfg.token_dim + c));
    }
  auto outp = rad.cross_attend(rad.fuse(zp, wp));

  for (std::int64_t i = 0; i < s; ++i)
    for (std::int64_t k = 0; k < v; ++k)
      for (std::int64_t c = 0; c < cfg.token_dim; ++c)
        CHECK(outp.view_tokens.value_at((i * v + k) * cfg.token_dim + c) ==
              doctest::Approx(out.view_tokens.value_at((i * v + perm[k]) * cfg.token_dim + c))
                  .epsilon(1e-9));
  for (std::int64_t i = 0; i < outp.consistency.numel(); ++i)
    CHECK(outp.consistency.value_at(i) ==
          doctest::Approx(out.consistency.value_at(i)).epsilon(1e-9));

  // Colors and densities are then view-permutation invariant as well.
  Tensor rgb = rad.predict_color(out.view_tokens, w);
  Tensor rgbp = rad.predict_color(outp.view_tokens, wp);
  for (std::int64_t i = 0; i < rgb.numel(); ++i)
    CHECK(rgb.value_at(i) == doctest::Approx(rgbp.value_at(i)).epsilon(1e-9));
}

TEST_CASE("cross_attend gradients match finite differences on a 3-view instance") {
  ModelConfig cfg = rad_cfg();
  ParamStore store;
  Radiance rad(cfg, store, Rng(9).stream("init"));
  Rng noise(10);
  for (auto p : store.all())
    for (std::int64_t i = 0; i < p.numel(); ++i)
      p.values().set(i, p.value_at(i) + noise.uniform(-0.05, 0.05));

  Rng rng(11);
  Tensor z = random_tensor(rng, {2, 3, cfg.token_dim});
  z.set_requires_grad(true);
  Tensor w = normalized_weights(rng, 2, 3);
  Tensor t1_target = Tensor::zeros(Dtype::f64, {2, 3, cfg.token_dim});

  std::vector<Tensor> inputs{z};
  auto fwd = [&]() {
    auto out = rad.cross_attend(rad.fuse(inputs[0], w));
    return ops::mse(out.view_tokens, t1_target);
  };
  CHECK(finite_difference_check(inputs, fwd, 1e-5) < 1e-4);
}

TEST_CASE("density along a ray: nonnegative, correct length, and shift covariant") {
  ModelConfig cfg = rad_cfg();
  ParamStore store;
  Radiance rad(cfg, store, Rng(12).stream("init"));
  Rng rng(13);

  const std::int64_t rays = 2, n = 32;
  Tensor tokens = random_tensor(rng, {rays * n, cfg.token_dim});
  Tensor sigma = rad.density_along_ray(tokens, rays, n);
  CHECK(sigma.shape() == std::vector<std::int64_t>{rays, n});
  for (std::int64_t i = 0; i < sigma.numel(); ++i) CHECK(sigma.value_at(i) >= 0.0);

  // A localized token bump translated by 4 samples (the total stride product)
  // translates the density response in the valid interior.
  Tensor base = Tensor::zeros(Dtype::f64, {n, cfg.token_dim});
  Tensor moved = Tensor::zeros(Dtype::f64, {n, cfg.token_dim});
  for (std::int64_t c = 0; c < cfg.token_dim; ++c) {
    double bump = rng.uniform(0.5, 1.5);
    base.values().set(12 * cfg.token_dim + c, bump);
    moved.values().set(16 * cfg.token_dim + c, bump);
  }
  Tensor s0 = rad.density_along_ray(base, 1, n);
  Tensor s1 = rad.density_along_ray(moved, 1, n);
  for (std::int64_t i = 8; i < 20; ++i)
    CHECK(s1.value_at(i + 4) == doctest::Approx(s0.value_at(i)).epsilon(1e-6));

  // Padded lengths still come back at the requested sample count.
  Tensor odd = random_tensor(rng, {1 * 7, cfg.token_dim});
  CHECK(rad.density_along_ray(odd, 1, 7).shape() == std::vector<std::int64_t>{1, 7});
}

TEST_CASE("color prediction: convexity, range, one-hot selection") {
  ModelConfig cfg = rad_cfg();
  ParamStore store;
  Radiance rad(cfg, store, Rng(14).stream("init"));
  Rng rng(15);
  const std::int64_t s = 3, v = 4;

  // Identical tokens across views: any normalized w gives the same color.
  Tensor t1 = Tensor::zeros(Dtype::f64, {s, v, cfg.token_dim});
  for (std::int64_t i = 0; i < s; ++i) {
    std::vector<double> row;
    for (std::int64_t c = 0; c < cfg.token_dim; ++c) row.push_back(rng.uniform(-1, 1));
    for (std::int64_t k = 0; k < v; ++k)
      for (std::int64_t c = 0; c < cfg.token_dim; ++c)
        t1.values().set((i * v + k) * cfg.token_dim + c, row[c]);
  }
  Tensor w1 = normalized_weights(rng, s, v);
  Tensor w2 = normalized_weights(rng, s, v);
  Tensor c1 = rad.predict_color(t1, w1);
  Tensor c2 = rad.predict_color(t1, w2);
  for (std::int64_t i = 0; i < c1.numel(); ++i) {
    CHECK(c1.value_at(i) == doctest::Approx(c2.value_at(i)).epsilon(1e-10));
    CHECK(c1.value_at(i) >= 0.0);
    CHECK(c1.value_at(i) <= 1.0);
  }

  // One-hot weights select exactly one view's token.
  Tensor tr = random_tensor(rng, {1, v, cfg.token_dim});
  Tensor onehot = Tensor::zeros(Dtype::f64, {1, v});
  onehot.values().set(2, 1.0);
  Tensor sel = rad.predict_color(tr, onehot);
  Tensor only = Tensor::zeros(Dtype::f64, {1, 1, cfg.token_dim});
  for (std::int64_t c = 0; c < cfg.token_dim; ++c)
    only.values().set(c, tr.value_at(2 * cfg.token_dim + c));
  Tensor wone = Tensor::full(Dtype::f64, {1, 1}, 1.0);
  Tensor ref = rad.predict_color(only, wone);
  for (std::int64_t i = 0; i < 3; ++i)
    CHECK(sel.value_at(i) == doctest::Approx(ref.value_at(i)).epsilon(1e-12));
}

TEST_CASE("end-to-end sample gradient (z,w) -> (c,sigma) matches finite differences") {
  ModelConfig cfg = rad_cfg();
  ParamStore store;
  Radiance rad(cfg, store, Rng(16).stream("init"));
  Rng noise(17);
  for (auto p : store.all())
    for (std::int64_t i = 0; i < p.numel(); ++i)
      p.values().set(i, p.value_at(i) + noise.uniform(-0.05, 0.05));

  Rng rng(18);
  const std::int64_t rays = 1, n = 4, v = 2;
  Tensor z = random_tensor(rng, {rays * n, v, cfg.token_dim});
  Tensor w = normalized_weights(rng, rays * n, v);
  z.set_requires_grad(true);
  w.set_requires_grad(true);
  Tensor ct = Tensor::zeros(Dtype::f64, {rays * n, 3});
  Tensor st = Tensor::zeros(Dtype::f64, {rays, n});

  std::vector<Tensor> inputs{z, w};
  auto fwd = [&]() {
    auto out = rad.cross_attend(rad.fuse(inputs[0], inputs[1]));
    Tensor sigma = rad.density_along_ray(out.consistency, rays, n);
    Tensor rgb = rad.predict_color(out.view_tokens, inputs[1]);
    return ops::add(ops::mse(rgb, ct), ops::mse(sigma, st));
  };
  CHECK(finite_difference_check(inputs, fwd, 1e-5) < 1e-4);
}
