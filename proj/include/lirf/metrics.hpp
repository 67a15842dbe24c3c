#pragma once

#include <cstdint>
#include <span>

namespace lirf {

// Image metrics over row-major [h,w,3] floats in [0,1].
double image_mse(std::span<const float> a, std::span<const float> b);

// 10 log10(1/mse); identical images are capped at 99 dB.
double psnr(std::span<const float> a, std::span<const float> b);
double psnr_from_mse(double mse);

// Windowed structural similarity: 11x11 Gaussian (sigma 1.5), K1=0.01,
// K2=0.03 on unit range, channel-averaged, valid windows only. Images
// smaller than the window fall back to a single global window.
double ssim(std::span<const float> a, std::span<const float> b, std::int64_t width,
            std::int64_t height);

// Two-term geometric mean sqrt(MSE * sqrt(1 - SSIM)); reported as "avg2"
// since the three-term average would need a perceptual metric.
double avg2_metric(double psnr_db, double ssim_value);

}  // namespace lirf
