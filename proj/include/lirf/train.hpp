#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include "lirf/config.hpp"
#include "lirf/dataset.hpp"
#include "lirf/renderer.hpp"

namespace lirf {

struct TrainHooks {
  // Called after every optimizer step; returning false stops training early.
  std::function<bool(std::int64_t step, double loss)> on_step;
};

struct TrainResult {
  std::vector<double> loss_trace;  // one entry per executed step
  std::int64_t final_step = 0;     // global step index after training
};

// Runs the multi-scale training loop: each step samples one training target
// view and one scale from the configured band, draws a ray batch, renders it
// through the cone pipeline and applies one Adam step on the batch MSE.
// Checkpoints land in out_dir (empty path disables them), a loss CSV is
// appended alongside. `start_step` continues a resumed run; per-step
// randomness is derived from (seed, step) so resumption replays exactly.
TrainResult train_loop(Pipeline& pipeline, Adam& optimizer, const Dataset& dataset,
                       const RunConfig& cfg, const std::filesystem::path& out_dir,
                       std::int64_t start_step, std::int64_t steps,
                       const TrainHooks& hooks = {});

struct EvalRow {
  std::string scene;
  int view = 0;
  double scale = 1.0;
  double psnr = 0, ssim = 0, avg2 = 0;
};

struct EvalOptions {
  std::vector<double> scales{0.5, 1.0, 2.0, 4.0};
  bool write_images = false;  // renders and GT|render side-by-sides
  std::filesystem::path out_dir;
  std::string scene_name = "scene";
};

// Renders every held-out view at every requested scale against the stored
// ground truth; missing ground truth for a scale skips it with a warning.
std::vector<EvalRow> evaluate(Pipeline& pipeline, const Dataset& dataset, const RunConfig& cfg,
                              const EvalOptions& options);

void write_metric_csv(const std::filesystem::path& path, std::span<const EvalRow> rows);

// Per-ray ground truth colors for a pixel batch from a loaded image.
std::vector<double> gather_pixel_colors(std::span<const float> image, std::int64_t width,
                                        std::span<const double> pixel_uv);

// Source-view context shared by training and evaluation: nearest train views
// (excluding the target itself) with freshly extracted feature maps.
RenderContext build_context_for_target(Pipeline& pipeline, const Dataset& dataset,
                                       const RunConfig& cfg, const Camera& base_camera,
                                       int exclude_view, double scale, bool jitter);

}  // namespace lirf
