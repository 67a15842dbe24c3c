#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "lirf/encoders.hpp"
#include "lirf/gradcheck.hpp"

using namespace lirf;

namespace {

Tensor random_image(Rng& rng, std::int64_t h, std::int64_t w, Dtype dt = Dtype::f32) {
  Tensor img = Tensor::zeros(dt, {h, w, 3});
  for (std::int64_t i = 0; i < img.numel(); ++i) img.values().set(i, rng.uniform(0, 1));
  return img;
}

ModelConfig small_cfg(Dtype dt = Dtype::f32) {
  ModelConfig cfg;
  cfg.dtype = dt;
  cfg.feature_channels = 8;
  cfg.residual_blocks = 2;
  return cfg;
}

}  // namespace

TEST_CASE("positional encoding: zeros, pi case, and output length") {
  std::vector<double> zero{0.0};
  auto enc = positional_encode(zero, 3);
  REQUIRE(enc.size() == 6);
  for (std::size_t i = 0; i < enc.size(); i += 2) {
    CHECK(enc[i] == doctest::Approx(0.0));      // sin
    CHECK(enc[i + 1] == doctest::Approx(1.0));  // cos
  }

  std::vector<double> one{1.0};
  auto enc1 = positional_encode(one, 1);
  CHECK(enc1[0] == doctest::Approx(std::sin(3.14159265358979323846)));
  CHECK(enc1[1] == doctest::Approx(-1.0));

  std::vector<double> v3{0.1, 0.2, 0.3};
  CHECK(positional_encode(v3, 6).size() == 36);
}

TEST_CASE("positional encoding is deterministic and bounded") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v{rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    auto a = positional_encode(v, 6);
    auto b = positional_encode(v, 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] == b[i]);
      CHECK(a[i] >= -1.0);
      CHECK(a[i] <= 1.0);
    }
  }
}

TEST_CASE("zero image with zero-initialized heads gives zero feature maps") {
  ModelConfig cfg = small_cfg();
  ParamStore store;
  Encoder enc(cfg, store, Rng(1).stream("init"));
  store.get("encoder.head_w.weight").values().fill(0.0);
  store.get("encoder.head_c.weight").values().fill(0.0);

  Tensor zero_img = Tensor::zeros(Dtype::f32, {16, 16, 3});
  FeatureMaps maps = enc.extract(zero_img);
  for (std::int64_t i = 0; i < maps.f_w.numel(); ++i) CHECK(maps.f_w.value_at(i) == 0.0);
  for (std::int64_t i = 0; i < maps.f_c.numel(); ++i) CHECK(maps.f_c.value_at(i) == 0.0);
}

TEST_CASE("feature maps keep the input spatial extents") {
  ModelConfig cfg = small_cfg();
  ParamStore store;
  Encoder enc(cfg, store, Rng(2).stream("init"));
  Rng rng(3);
  for (auto [h, w] : {std::pair<int, int>{16, 16}, {17, 19}, {24, 20}}) {
    FeatureMaps maps = enc.extract(random_image(rng, h, w));
    CHECK(maps.f_w.shape() == std::vector<std::int64_t>{h, w, cfg.feature_channels});
    CHECK(maps.f_c.shape() == std::vector<std::int64_t>{h, w, cfg.feature_channels});
  }
  CHECK_THROWS_AS(enc.extract(Tensor::zeros(Dtype::f32, {16, 16, 4})), ShapeError);
}

TEST_CASE("shifting the input shifts interior features") {
  ModelConfig cfg = small_cfg();
  ParamStore store;
  Encoder enc(cfg, store, Rng(4).stream("init"));
  Rng rng(7);
  const std::int64_t hw = 32, shift = 4;
  Tensor img = random_image(rng, hw, hw);
  Tensor shifted = Tensor::zeros(Dtype::f32, {hw, hw, 3});
  for (std::int64_t y = 0; y < hw; ++y)
    for (std::int64_t x = 0; x < hw; ++x)
      for (std::int64_t c = 0; c < 3; ++c) {
        std::int64_t sy = (y + hw - shift) % hw, sx = (x + hw - shift) % hw;
        shifted.values().set((y * hw + x) * 3 + c, img.value_at((sy * hw + sx) * 3 + c));
      }
  FeatureMaps a = enc.extract(img);
  FeatureMaps b = enc.extract(shifted);
  // Interior only: receptive field margin plus the shift.
  for (std::int64_t y = 14; y < 18; ++y)
    for (std::int64_t x = 14; x < 18; ++x)
      for (std::int64_t c = 0; c < cfg.feature_channels; ++c) {
        double va = a.f_c.value_at((y * hw + x) * cfg.feature_channels + c);
        double vb = b.f_c.value_at(((y + shift) * hw + (x + shift)) * cfg.feature_channels + c);
        CHECK(std::abs(va - vb) < 1e-4);
      }
}

TEST_CASE("point feature lookup: texel centers, clamping, and primitive equality") {
  Rng rng(8);
  Tensor map = Tensor::zeros(Dtype::f64, {4, 5, 3});
  for (std::int64_t i = 0; i < map.numel(); ++i) map.values().set(i, rng.uniform(-1, 1));

  std::vector<double> uv{2.5, 3.5};  // texel (2,3) center
  auto ps = sample_point_features(map, uv);
  for (std::int64_t c = 0; c < 3; ++c)
    CHECK(ps.features.value_at(c) == doctest::Approx(map.value_at((3 * 5 + 2) * 3 + c)));
  CHECK(ps.in_bounds[0] == 1);

  std::vector<double> far_uv{50.0, 50.0};
  auto pf = sample_point_features(map, far_uv);
  CHECK(pf.in_bounds[0] == 0);
  for (std::int64_t c = 0; c < 3; ++c)
    CHECK(pf.features.value_at(c) == doctest::Approx(map.value_at((3 * 5 + 4) * 3 + c)));

  std::vector<double> ruv{1.3, 2.8, 0.1, 3.9};
  auto direct = ops::bilinear_sample(map, ruv);
  auto wrapped = sample_point_features(map, ruv);
  for (std::int64_t i = 0; i < direct.features.numel(); ++i)
    CHECK(direct.features.value_at(i) == wrapped.features.value_at(i));
}

TEST_CASE("patch features: P=1 reduction, constant maps, center tap") {
  Rng rng(9);
  Tensor map = Tensor::zeros(Dtype::f64, {6, 6, 2});
  for (std::int64_t i = 0; i < map.numel(); ++i) map.values().set(i, rng.uniform(-1, 1));

  std::vector<double> uv{2.7, 3.1, 4.2, 1.5};
  auto p1 = extract_patch_features(map, uv, 1);
  auto pt = sample_point_features(map, uv);
  for (std::int64_t i = 0; i < p1.features.numel(); ++i)
    CHECK(p1.features.value_at(i) == pt.features.value_at(i));

  Tensor cmap = Tensor::full(Dtype::f64, {8, 8, 2}, 0.37);
  std::vector<double> cuv{4.0, 4.0};
  auto cp = extract_patch_features(cmap, cuv, 3);
  for (std::int64_t i = 0; i < cp.features.numel(); ++i)
    CHECK(cp.features.value_at(i) == doctest::Approx(0.37));
  CHECK(cp.coverage[0] == doctest::Approx(1.0));

  // Center tap of the flattened 5x5 patch equals the point feature.
  auto p5 = extract_patch_features(map, uv, 5);
  std::int64_t taps = 25, center = (taps - 1) / 2, c = 2;
  for (std::size_t pnt = 0; pnt < 2; ++pnt)
    for (std::int64_t ch = 0; ch < c; ++ch)
      CHECK(p5.features.value_at(pnt * taps * c + center * c + ch) ==
            doctest::Approx(pt.features.value_at(pnt * c + ch)));

  CHECK_THROWS_AS(extract_patch_features(map, uv, 4), ShapeError);
}

TEST_CASE("patch flattening order matches an independent index computation") {
  // Delta map: a single hot texel; taps that hit it are identified by index
  // arithmetic over (dy,dx) offsets.
  Tensor map = Tensor::zeros(Dtype::f64, {9, 9, 1});
  map.values().set((4 * 9 + 5) * 1, 1.0);  // texel (x=5, y=4)
  std::vector<double> uv{4.5, 3.5};        // centered on texel (4,3)
  auto ps = extract_patch_features(map, uv, 5);
  for (std::int64_t t = 0; t < 25; ++t) {
    std::int64_t dy = t / 5 - 2, dx = t % 5 - 2;
    bool hits = (4 + dx == 5) && (3 + dy == 4);  // tap lands on the hot texel
    CHECK(ps.features.value_at(t) == doctest::Approx(hits ? 1.0 : 0.0));
  }
}

namespace {

double extractor_fd_error(Dtype dt, double h_scale, int probes) {
  ModelConfig cfg = small_cfg(dt);
  cfg.residual_blocks = 1;
  ParamStore store;
  Encoder enc(cfg, store, Rng(11).stream("init"));
  Rng rng(12);
  Tensor img = random_image(rng, 8, 8, dt);
  Tensor target = Tensor::zeros(dt, {8, 8, cfg.feature_channels});
  for (std::int64_t i = 0; i < target.numel(); ++i) target.values().set(i, rng.uniform(0, 1));

  auto forward = [&]() {
    FeatureMaps maps = enc.extract(img);
    return ops::mse(maps.f_c, target);
  };
  Tape tape;
  std::vector<Tensor> leaves = store.all();
  std::vector<Tensor> grads;
  {
    TapeScope scope(tape);
    grads = backward(tape, forward(), leaves);
  }
  Rng pick(13);
  double max_rel = 0;
  for (int probe = 0; probe < probes; ++probe) {
    std::size_t li = static_cast<std::size_t>(pick.below(leaves.size()));
    std::size_t ei =
        static_cast<std::size_t>(pick.below(static_cast<std::uint64_t>(leaves[li].numel())));
    double saved = leaves[li].value_at(ei);
    double h = h_scale * std::max(0.5, std::abs(saved));
    leaves[li].values().set(ei, saved + h);
    double lp = forward().scalar_value();
    leaves[li].values().set(ei, saved - h);
    double lm = forward().scalar_value();
    leaves[li].values().set(ei, saved);
    double fd = (lp - lm) / (2 * h);
    double an = grads[li].value_at(ei);
    max_rel = std::max(max_rel, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-2}));
  }
  return max_rel;
}

}  // namespace

TEST_CASE("extractor gradient w.r.t. parameters matches finite differences") {
  // The tight check runs at 64-bit (the gradient-checking precision); central
  // differences through a 32-bit conv stack have a noise floor near 1e-3, so
  // the 32-bit pass only needs to clear that.
  CHECK(extractor_fd_error(Dtype::f64, 1e-5, 12) < 1e-4);
  CHECK(extractor_fd_error(Dtype::f32, 1e-2, 12) < 1e-2);
}
