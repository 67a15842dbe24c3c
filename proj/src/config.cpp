#include "lirf/config.hpp"

#include <fstream>
#include <set>

#include "json.hpp"

namespace lirf {

using nlohmann::json;

RunConfig default_run_config() { return RunConfig{}; }

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw UserError("config: unknown key '" + it.key() + "' in " + where);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const std::exception& e) {
    throw UserError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(j, {"seed", "precision", "threads", "paper_scale", "model", "render", "train"},
             "config");
  RunConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.precision = j.value("precision", cfg.precision);
  if (cfg.precision != "f32" && cfg.precision != "f64")
    throw UserError("config: precision must be 'f32' or 'f64'");
  cfg.threads = j.value("threads", cfg.threads);
  cfg.paper_scale = j.value("paper_scale", cfg.paper_scale);

  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m,
               {"feature_channels", "residual_blocks", "token_dim", "heads", "ff_dim",
                "t2_layers", "pe_position_freqs", "pe_direction_freqs", "patch_size",
                "vertices", "inverse_distance_weights", "raw_visibility", "ablation"},
               "model");
    ModelConfig& mc = cfg.model;
    mc.feature_channels = m.value("feature_channels", mc.feature_channels);
    mc.residual_blocks = m.value("residual_blocks", mc.residual_blocks);
    mc.token_dim = m.value("token_dim", mc.token_dim);
    mc.heads = m.value("heads", mc.heads);
    mc.ff_dim = m.value("ff_dim", mc.ff_dim);
    mc.t2_layers = m.value("t2_layers", mc.t2_layers);
    mc.pe_position_freqs = m.value("pe_position_freqs", mc.pe_position_freqs);
    mc.pe_direction_freqs = m.value("pe_direction_freqs", mc.pe_direction_freqs);
    mc.patch_size = m.value("patch_size", mc.patch_size);
    mc.vertices = m.value("vertices", mc.vertices);
    mc.inverse_distance_weights =
        m.value("inverse_distance_weights", mc.inverse_distance_weights);
    mc.raw_visibility = m.value("raw_visibility", mc.raw_visibility);
    if (m.contains("ablation")) {
      const json& a = m["ablation"];
      check_keys(a,
                 {"single_ray", "no_scale", "no_position", "no_patch", "no_direction",
                  "no_vis_weights"},
                 "ablation");
      mc.ablation.single_ray = a.value("single_ray", false);
      mc.ablation.no_scale = a.value("no_scale", false);
      mc.ablation.no_position = a.value("no_position", false);
      mc.ablation.no_patch = a.value("no_patch", false);
      mc.ablation.no_direction = a.value("no_direction", false);
      mc.ablation.no_vis_weights = a.value("no_vis_weights", false);
    }
    if (mc.vertices != 4 && mc.vertices != 8 && mc.vertices != 10)
      throw UserError("config: vertices must be 4, 8 or 10");
    if (mc.patch_size < 1 || mc.patch_size % 2 == 0)
      throw UserError("config: patch_size must be odd and positive");
    if (mc.token_dim % mc.heads != 0)
      throw UserError("config: token_dim must be divisible by heads");
  }

  if (j.contains("render")) {
    const json& r = j["render"];
    check_keys(r, {"source_views", "samples_per_ray", "jitter", "depth_sampling"}, "render");
    cfg.render.source_views = r.value("source_views", cfg.render.source_views);
    cfg.render.samples_per_ray = r.value("samples_per_ray", cfg.render.samples_per_ray);
    cfg.render.jitter = r.value("jitter", cfg.render.jitter);
    cfg.render.depth_sampling = r.value("depth_sampling", cfg.render.depth_sampling);
    if (cfg.render.depth_sampling != "uniform" && cfg.render.depth_sampling != "inverse")
      throw UserError("config: depth_sampling must be 'uniform' or 'inverse'");
  }

  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t,
               {"steps", "batch_rays", "lr", "decay_gamma", "decay_every", "beta1", "beta2",
                "eps", "scales", "checkpoint_every", "eval_every"},
               "train");
    cfg.train.steps = t.value("steps", cfg.train.steps);
    cfg.train.batch_rays = t.value("batch_rays", cfg.train.batch_rays);
    cfg.train.lr = t.value("lr", cfg.train.lr);
    cfg.train.decay_gamma = t.value("decay_gamma", cfg.train.decay_gamma);
    cfg.train.decay_every = t.value("decay_every", cfg.train.decay_every);
    cfg.train.beta1 = t.value("beta1", cfg.train.beta1);
    cfg.train.beta2 = t.value("beta2", cfg.train.beta2);
    cfg.train.eps = t.value("eps", cfg.train.eps);
    if (t.contains("scales")) cfg.train.scales = t["scales"].get<std::vector<double>>();
    cfg.train.checkpoint_every = t.value("checkpoint_every", cfg.train.checkpoint_every);
    cfg.train.eval_every = t.value("eval_every", cfg.train.eval_every);
    for (double s : cfg.train.scales)
      if (!(s >= 0.5 && s <= 4.0))
        throw UserError("config: training scales must lie in [0.5, 4]");
  }

  cfg.model.dtype = cfg.dtype();
  if (cfg.paper_scale) {
    cfg.model.feature_channels = 32;
    cfg.render.source_views = 8;
    cfg.render.samples_per_ray = 128;
    cfg.train.batch_rays = 512;
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw UserError("config: cannot open '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string run_config_to_json(const RunConfig& cfg) {
  json j{
      {"seed", cfg.seed},
      {"precision", cfg.precision},
      {"threads", cfg.threads},
      {"paper_scale", cfg.paper_scale},
      {"model",
       {{"feature_channels", cfg.model.feature_channels},
        {"residual_blocks", cfg.model.residual_blocks},
        {"token_dim", cfg.model.token_dim},
        {"heads", cfg.model.heads},
        {"ff_dim", cfg.model.ff_dim},
        {"t2_layers", cfg.model.t2_layers},
        {"pe_position_freqs", cfg.model.pe_position_freqs},
        {"pe_direction_freqs", cfg.model.pe_direction_freqs},
        {"patch_size", cfg.model.patch_size},
        {"vertices", cfg.model.vertices},
        {"inverse_distance_weights", cfg.model.inverse_distance_weights},
        {"raw_visibility", cfg.model.raw_visibility},
        {"ablation",
         {{"single_ray", cfg.model.ablation.single_ray},
          {"no_scale", cfg.model.ablation.no_scale},
          {"no_position", cfg.model.ablation.no_position},
          {"no_patch", cfg.model.ablation.no_patch},
          {"no_direction", cfg.model.ablation.no_direction},
          {"no_vis_weights", cfg.model.ablation.no_vis_weights}}}}},
      {"render",
       {{"source_views", cfg.render.source_views},
        {"samples_per_ray", cfg.render.samples_per_ray},
        {"jitter", cfg.render.jitter},
        {"depth_sampling", cfg.render.depth_sampling}}},
      {"train",
       {{"steps", cfg.train.steps},
        {"batch_rays", cfg.train.batch_rays},
        {"lr", cfg.train.lr},
        {"decay_gamma", cfg.train.decay_gamma},
        {"decay_every", cfg.train.decay_every},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"eps", cfg.train.eps},
        {"scales", cfg.train.scales},
        {"checkpoint_every", cfg.train.checkpoint_every},
        {"eval_every", cfg.train.eval_every}}},
  };
  return j.dump(2);
}

std::uint64_t config_digest(const RunConfig& cfg) { return fnv1a(run_config_to_json(cfg)); }

}  // namespace lirf
