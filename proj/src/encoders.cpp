#include "lirf/encoders.hpp"

namespace lirf {

Encoder::Encoder(const ModelConfig& cfg, ParamStore& store, const Rng& init)
    : channels_(cfg.feature_channels) {
  Dtype dt = cfg.dtype;
  stem_ = Conv(store, "encoder.stem", 3, channels_, 3, dt, init);
  for (std::int64_t b = 0; b < cfg.residual_blocks; ++b) {
    std::string base = "encoder.block" + std::to_string(b);
    block_convs_.emplace_back(store, base + ".conv0", channels_, channels_, 3, dt, init);
    block_convs_.emplace_back(store, base + ".conv1", channels_, channels_, 3, dt, init);
  }
  head_w_ = Conv(store, "encoder.head_w", channels_, channels_, 3, dt, init);
  head_c_ = Conv(store, "encoder.head_c", channels_, channels_, 3, dt, init);
}

FeatureMaps Encoder::extract(const Tensor& image) const {
  if (image.rank() != 3 || image.shape().back() != 3)
    throw ShapeError("extract_features", "image must be [H,W,3], got " +
                                             format_shape(image.shape().data(), image.rank()));
  Tensor x = stem_(image);
  for (std::size_t b = 0; b + 1 < block_convs_.size(); b += 2) {
    Tensor y = block_convs_[b + 1](ops::elu(block_convs_[b](x)));
    x = ops::add(x, y);
  }
  FeatureMaps maps;
  maps.f_w = head_w_(x);
  maps.f_c = head_c_(x);
  return maps;
}

PointSample sample_point_features(const Tensor& map, std::span<const double> uv) {
  auto res = ops::bilinear_sample(map, uv);
  return {res.features, std::move(res.in_bounds)};
}

PatchSample extract_patch_features(const Tensor& map, std::span<const double> uv,
                                   std::int64_t patch) {
  if (patch < 1 || patch % 2 == 0)
    throw ShapeError("extract_patch_feature", "patch size must be odd and positive, got " +
                                                  std::to_string(patch));
  std::int64_t points = static_cast<std::int64_t>(uv.size() / 2);
  std::int64_t taps = patch * patch;
  std::int64_t half = patch / 2;

  std::vector<double> tap_uv;
  tap_uv.reserve(static_cast<std::size_t>(points * taps * 2));
  for (std::int64_t p = 0; p < points; ++p) {
    double u = uv[2 * p], v = uv[2 * p + 1];
    for (std::int64_t dy = -half; dy <= half; ++dy)
      for (std::int64_t dx = -half; dx <= half; ++dx) {
        tap_uv.push_back(u + static_cast<double>(dx));
        tap_uv.push_back(v + static_cast<double>(dy));
      }
  }

  auto res = ops::bilinear_sample(map, tap_uv);
  std::int64_t c = map.shape().back();
  PatchSample out;
  out.features = ops::reshape(res.features, {points, taps * c});
  out.coverage.resize(static_cast<std::size_t>(points));
  for (std::int64_t p = 0; p < points; ++p) {
    int inb = 0;
    for (std::int64_t t = 0; t < taps; ++t) inb += res.in_bounds[p * taps + t] ? 1 : 0;
    out.coverage[p] = static_cast<double>(inb) / static_cast<double>(taps);
  }
  return out;
}

}  // namespace lirf
