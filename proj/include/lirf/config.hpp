#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lirf/model.hpp"

namespace lirf {

struct TrainSettings {
  std::int64_t steps = 10000;
  std::int64_t batch_rays = 256;
  double lr = 5e-4;
  double decay_gamma = 0.999;   // applied per decay_every steps
  std::int64_t decay_every = 100;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<double> scales{1.0, 2.0, 4.0};  // multi-scale supervision band
  std::int64_t checkpoint_every = 2000;
  std::int64_t eval_every = 0;  // 0 = only on demand
};

struct RenderSettings {
  std::int64_t source_views = 4;     // V
  std::int64_t samples_per_ray = 32; // N
  bool jitter = true;                // training-time stratified depths
  std::string depth_sampling = "uniform";
};

// Every knob in one tree; a single seed feeds named sub-streams for data,
// initialization and training-time sampling.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string precision = "f32";  // f32 | f64
  int threads = 0;                // 0 = hardware default
  bool paper_scale = false;       // V=8, N=128, batch 512, 32-channel features
  ModelConfig model;
  RenderSettings render;
  TrainSettings train;

  Dtype dtype() const { return precision == "f64" ? Dtype::f64 : Dtype::f32; }
};

RunConfig default_run_config();
RunConfig parse_run_config(const std::string& json_text);  // unknown keys rejected
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_to_json(const RunConfig& cfg);

// FNV-1a of the canonical serialization; stored in checkpoints so a model
// cannot silently load under a different configuration.
std::uint64_t config_digest(const RunConfig& cfg);

}  // namespace lirf
