#include "lirf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace lirf {

double image_mse(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty())
    throw std::runtime_error("metrics: images must be non-empty and the same shape");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double psnr(std::span<const float> a, std::span<const float> b) {
  return psnr_from_mse(image_mse(a, b));
}

namespace {

struct Window {
  std::vector<double> taps;  // 11x11 normalized Gaussian, sigma 1.5
  int radius = 5;
  Window() {
    const int size = 11;
    taps.resize(size * size);
    double sum = 0;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double dy = y - radius, dx = x - radius;
        taps[y * size + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
        sum += taps[y * size + x];
      }
    for (double& t : taps) t /= sum;
  }
};

double ssim_channel(std::span<const float> a, std::span<const float> b, std::int64_t w,
                    std::int64_t h, int channel) {
  static const Window win;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  auto at = [&](std::span<const float> img, std::int64_t x, std::int64_t y) {
    return static_cast<double>(img[(y * w + x) * 3 + channel]);
  };

  if (w < 11 || h < 11) {
    // Single global window for tiny images.
    double ma = 0, mb = 0;
    for (std::int64_t i = 0; i < w * h; ++i) {
      ma += at(a, i % w, i / w);
      mb += at(b, i % w, i / w);
    }
    ma /= double(w * h);
    mb /= double(w * h);
    double va = 0, vb = 0, cov = 0;
    for (std::int64_t i = 0; i < w * h; ++i) {
      double da = at(a, i % w, i / w) - ma, db = at(b, i % w, i / w) - mb;
      va += da * da;
      vb += db * db;
      cov += da * db;
    }
    va /= double(w * h);
    vb /= double(w * h);
    cov /= double(w * h);
    return ((2 * ma * mb + c1) * (2 * cov + c2)) /
           ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }

  double total = 0;
  std::int64_t count = 0;
  for (std::int64_t cy = win.radius; cy < h - win.radius; ++cy)
    for (std::int64_t cx = win.radius; cx < w - win.radius; ++cx) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      int k = 0;
      for (std::int64_t dy = -win.radius; dy <= win.radius; ++dy)
        for (std::int64_t dx = -win.radius; dx <= win.radius; ++dx, ++k) {
          double tap = win.taps[k];
          double va = at(a, cx + dx, cy + dy);
          double vb = at(b, cx + dx, cy + dy);
          ma += tap * va;
          mb += tap * vb;
          saa += tap * va * va;
          sbb += tap * vb * vb;
          sab += tap * va * vb;
        }
      double var_a = saa - ma * ma;
      double var_b = sbb - mb * mb;
      double cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

}  // namespace

double ssim(std::span<const float> a, std::span<const float> b, std::int64_t width,
            std::int64_t height) {
  if (a.size() != b.size() || a.size() != static_cast<std::size_t>(width * height * 3))
    throw std::runtime_error("metrics: ssim inputs must be [h,w,3] of matching shape");
  double acc = 0;
  for (int c = 0; c < 3; ++c) acc += ssim_channel(a, b, width, height, c);
  return acc / 3.0;
}

double avg2_metric(double psnr_db, double ssim_value) {
  double mse = std::pow(10.0, -psnr_db / 10.0);
  double s = std::sqrt(std::max(0.0, 1.0 - ssim_value));
  return std::sqrt(mse * s);
}

}  // namespace lirf
