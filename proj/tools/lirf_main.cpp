#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "lirf/checkpoint.hpp"
#include "lirf/gradcheck.hpp"
#include "lirf/png_io.hpp"
#include "lirf/scene.hpp"
#include "lirf/train.hpp"

namespace {

using namespace lirf;

SceneSpec resolve_scene_spec(const std::string& spec_arg) {
  if (spec_arg.empty() || spec_arg == "preset:default") return default_scene_spec();
  if (spec_arg == "preset:checkerboard") return checkerboard_scene_spec(1.0);
  if (spec_arg == "preset:occluder") return occluder_scene_spec();
  std::ifstream f(spec_arg);
  if (!f) throw UserError("make-scene: cannot open spec file '" + spec_arg + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_scene_spec(text);
}

int cmd_make_scene(const std::string& spec_arg, const std::string& out,
                   std::optional<std::uint64_t> seed) {
  SceneSpec spec = resolve_scene_spec(spec_arg);
  if (seed) spec.seed = *seed;
  SyntheticScene scene(std::move(spec));
  write_scene_dataset(scene, out);
  std::printf("wrote dataset: %d views at %lldx%lld, %zu target scales -> %s\n",
              scene.spec().rig.views, static_cast<long long>(scene.spec().rig.width),
              static_cast<long long>(scene.spec().rig.height_px),
              scene.spec().target_scales.size(), out.c_str());
  return 0;
}

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return default_run_config();
  return load_run_config(path);
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out,
              std::int64_t steps_override, const std::string& resume) {
  RunConfig cfg = load_config_or_default(config_path);
  if (cfg.threads > 0) set_thread_count(cfg.threads);
  Dataset dataset = Dataset::load(data);

  Pipeline pipeline(cfg.model, Rng(cfg.seed).stream("model").next_u64());
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.train.lr;
  adam_cfg.beta1 = cfg.train.beta1;
  adam_cfg.beta2 = cfg.train.beta2;
  adam_cfg.eps = cfg.train.eps;
  adam_cfg.decay_gamma = cfg.train.decay_gamma;
  adam_cfg.decay_every = cfg.train.decay_every;
  Adam optimizer(pipeline.params.all(), adam_cfg);

  std::int64_t start_step = 0;
  if (!resume.empty()) {
    CheckpointData data_ckpt = load_checkpoint(resume);
    if (data_ckpt.config_digest != config_digest(cfg))
      throw UserError("train: checkpoint config digest does not match this config");
    apply_checkpoint(data_ckpt, pipeline.params, &optimizer);
    start_step = static_cast<std::int64_t>(data_ckpt.step);
    std::printf("resumed from %s at step %lld\n", resume.c_str(),
                static_cast<long long>(start_step));
  }

  std::filesystem::create_directories(out);
  {
    std::ofstream cf(std::filesystem::path(out) / "config.json");
    cf << run_config_to_json(cfg) << "\n";
  }

  std::int64_t steps = steps_override >= 0 ? steps_override : cfg.train.steps;
  TrainHooks hooks;
  hooks.on_step = [&](std::int64_t step, double loss) {
    if (step % 100 == 0 || step == start_step + 1)
      std::printf("step %lld  loss %.6f\n", static_cast<long long>(step), loss);
    return true;
  };
  TrainResult result = train_loop(pipeline, optimizer, dataset, cfg, out, start_step, steps,
                                  hooks);
  std::printf("trained to step %lld\n", static_cast<long long>(result.final_step));
  return 0;
}

std::pair<Pipeline, RunConfig> load_model(const std::string& config_path,
                                          const std::string& ckpt_path) {
  RunConfig cfg = load_config_or_default(config_path);
  if (cfg.threads > 0) set_thread_count(cfg.threads);
  Pipeline pipeline(cfg.model, Rng(cfg.seed).stream("model").next_u64());
  CheckpointData data = load_checkpoint(ckpt_path);
  if (data.config_digest != config_digest(cfg))
    throw UserError("checkpoint config digest does not match the provided config");
  apply_checkpoint(data, pipeline.params);
  return {std::move(pipeline), std::move(cfg)};
}

int cmd_render(const std::string& config_path, const std::string& ckpt, const std::string& data,
               int view, double scale, const std::string& out, const std::string& float_dump) {
  auto [pipeline, cfg] = load_model(config_path, ckpt);
  Dataset dataset = Dataset::load(data);

  const DatasetView* target = dataset.find("test", view, 1.0);
  if (!target) target = dataset.find("train", view, 1.0);
  if (!target) throw UserError("render: view " + std::to_string(view) + " not in dataset");

  RenderContext ctx = build_context_for_target(pipeline, dataset, cfg, target->camera, view,
                                               scale, false);
  Rng rng(cfg.seed);
  ImageRender img = render_image(ctx, rng);
  write_png_rgb(out, img.rgb, img.width, img.height);
  if (!float_dump.empty()) write_float_dump(float_dump, img.rgb);
  std::printf("rendered view %d at x%s -> %s (%lldx%lld)\n", view,
              format_scale_tag(scale).c_str(), out.c_str(), static_cast<long long>(img.width),
              static_cast<long long>(img.height));
  return 0;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt, const std::string& data,
             std::vector<double> scales, const std::string& out) {
  auto [pipeline, cfg] = load_model(config_path, ckpt);
  Dataset dataset = Dataset::load(data);

  EvalOptions options;
  if (!scales.empty()) options.scales = std::move(scales);
  for (double s : options.scales)
    if (!(s >= 0.5 && s <= 4.0))
      throw UserError("eval: scale " + std::to_string(s) + " outside [0.5, 4]");
  options.write_images = true;
  options.out_dir = out;
  options.scene_name = std::filesystem::path(data).filename().string();

  auto rows = evaluate(pipeline, dataset, cfg, options);
  write_metric_csv(std::filesystem::path(out) / "metrics.csv", rows);
  for (const auto& row : rows)
    std::printf("view %d x%-4s  psnr %6.2f  ssim %.4f  avg2 %.5f\n", row.view,
                format_scale_tag(row.scale).c_str(), row.psnr, row.ssim, row.avg2);
  return 0;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed, int instances,
                  const std::string& inject) {
  if (!inject.empty()) set_gradcheck_corruption(inject);
  bool ok = true;
  if (module == "all" || module == "primitives") {
    GradCheckReport report = run_primitive_gradchecks(seed, instances, 1e-5);
    for (const auto& row : report.rows)
      std::printf("%-22s max_rel_err %.3e  (%d instances)  %s\n", row.op.c_str(),
                  row.max_rel_err, row.instances, row.pass ? "ok" : "FAIL");
    ok = ok && report.all_pass;
  }
  if (module == "all" || module == "render") {
    double err = render_ray_gradcheck(seed);
    bool pass = err <= 1e-3;
    std::printf("%-22s max_rel_err %.3e  (2 views, N=4, 32-bit)  %s\n", "render_ray", err,
                pass ? "ok" : "FAIL");
    ok = ok && pass;
  }
  std::printf("gradcheck: %s\n", ok ? "all passed" : "FAILURES");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generalizable radiance fields from cone casting and local implicit ray "
               "functions: scene synthesis, training, rendering and verification"};
  app.require_subcommand(1);

  auto* mk = app.add_subcommand("make-scene", "Generate a synthetic multi-view dataset");
  std::string mk_spec, mk_out;
  std::optional<std::uint64_t> mk_seed;
  mk->add_option("--spec", mk_spec, "Scene spec JSON or preset:{default,checkerboard,occluder}");
  mk->add_option("--out", mk_out, "Output dataset directory")->required();
  mk->add_option("--seed", mk_seed, "Override the spec seed");

  auto* tr = app.add_subcommand("train", "Train on a dataset");
  std::string tr_cfg, tr_data, tr_out, tr_resume;
  std::int64_t tr_steps = -1;
  tr->add_option("--config", tr_cfg, "Run config JSON (defaults when omitted)");
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Output directory for checkpoints and logs")->required();
  tr->add_option("--steps", tr_steps, "Override the configured step count");
  tr->add_option("--resume", tr_resume, "Checkpoint to resume from");

  auto* rd = app.add_subcommand("render", "Render one view at a chosen scale");
  std::string rd_cfg, rd_ckpt, rd_data, rd_out, rd_dump;
  int rd_view = 0;
  double rd_scale = 1.0;
  rd->add_option("--config", rd_cfg, "Run config JSON used at training time");
  rd->add_option("--checkpoint", rd_ckpt, "Checkpoint file")->required();
  rd->add_option("--data", rd_data, "Dataset directory")->required();
  rd->add_option("--view", rd_view, "View id")->required();
  rd->add_option("--scale", rd_scale, "Target scale in [0.5, 4]");
  rd->add_option("--out", rd_out, "Output PNG")->required();
  rd->add_option("--float-dump", rd_dump, "Optional raw float32 dump");

  auto* ev = app.add_subcommand("eval", "Evaluate held-out views at multiple scales");
  std::string ev_cfg, ev_ckpt, ev_data, ev_out = "eval";
  std::vector<double> ev_scales;
  ev->add_option("--config", ev_cfg, "Run config JSON used at training time");
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--scales", ev_scales, "Scales to evaluate")->delimiter(',');
  ev->add_option("--out", ev_out, "Output directory (CSV and images)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  std::string gc_module = "all", gc_inject;
  std::uint64_t gc_seed = 1;
  int gc_instances = 20;
  gc->add_option("--module", gc_module, "all | primitives | render")
      ->check(CLI::IsMember({"all", "primitives", "render"}));
  gc->add_option("--seed", gc_seed, "Random seed");
  gc->add_option("--instances", gc_instances, "Instances per primitive");
  gc->add_option("--inject-sign-bug", gc_inject, "Corrupt one gradient of the named op")
      ->group("");  // testing hook, hidden from help

  try {
    app.parse(argc, argv);
    if (mk->parsed()) return cmd_make_scene(mk_spec, mk_out, mk_seed);
    if (tr->parsed()) return cmd_train(tr_cfg, tr_data, tr_out, tr_steps, tr_resume);
    if (rd->parsed())
      return cmd_render(rd_cfg, rd_ckpt, rd_data, rd_view, rd_scale, rd_out, rd_dump);
    if (ev->parsed()) return cmd_eval(ev_cfg, ev_ckpt, ev_data, ev_scales, ev_out);
    if (gc->parsed()) return cmd_gradcheck(gc_module, gc_seed, gc_instances, gc_inject);
    return 1;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const lirf::UserError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 2;
  }
}
