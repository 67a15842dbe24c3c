#include "lirf/train.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "lirf/checkpoint.hpp"
#include "lirf/metrics.hpp"
#include "lirf/png_io.hpp"

namespace lirf {

namespace {

struct TrainViewCache {
  std::vector<int> train_ids;
  std::vector<Camera> base_cams;                  // x1 cameras by train index
  std::vector<std::vector<float>> source_images;  // x1 images by train index
};

TrainViewCache load_train_views(const Dataset& dataset) {
  TrainViewCache cache;
  cache.train_ids = dataset.view_ids("train");
  if (cache.train_ids.size() < 2)
    throw UserError("train: dataset needs at least two training views");
  for (int id : cache.train_ids) {
    const DatasetView* v = dataset.find("train", id, 1.0);
    if (!v) throw UserError("train: missing x1 image for train view " + std::to_string(id));
    cache.base_cams.push_back(v->camera);
    cache.source_images.push_back(dataset.load_image(*v));
  }
  return cache;
}

std::vector<SourceViewData> make_sources(Pipeline& pipeline, const TrainViewCache& cache,
                                         const Camera& target, int exclude_id,
                                         std::int64_t v_count) {
  std::vector<Camera> candidates;
  std::vector<std::size_t> candidate_idx;
  for (std::size_t i = 0; i < cache.train_ids.size(); ++i) {
    if (cache.train_ids[i] == exclude_id) continue;
    candidates.push_back(cache.base_cams[i]);
    candidate_idx.push_back(i);
  }
  auto picked = select_source_views(target, candidates, static_cast<std::size_t>(v_count));

  std::vector<SourceViewData> sources;
  for (std::size_t pick : picked) {
    std::size_t i = candidate_idx[pick];
    const Camera& cam = cache.base_cams[i];
    Tensor img = Tensor::zeros(pipeline.cfg.dtype, {cam.height, cam.width, 3});
    const auto& pix = cache.source_images[i];
    for (std::size_t k = 0; k < pix.size(); ++k) img.values().set(k, pix[k]);
    sources.push_back({cam, pipeline.encoder.extract(img)});
  }
  return sources;
}

void dump_bad_batch(const std::filesystem::path& out_dir, std::int64_t step, int view,
                    double scale, std::span<const double> pixels) {
  nlohmann::json j{{"step", step}, {"view", view}, {"scale", scale}};
  j["pixels"] = std::vector<double>(pixels.begin(), pixels.end());
  std::ofstream f(out_dir / ("nan_batch_step" + std::to_string(step) + ".json"));
  f << j.dump(2) << "\n";
}

}  // namespace

std::vector<double> gather_pixel_colors(std::span<const float> image, std::int64_t width,
                                        std::span<const double> pixel_uv) {
  std::vector<double> out;
  out.reserve(pixel_uv.size() / 2 * 3);
  for (std::size_t i = 0; i < pixel_uv.size(); i += 2) {
    auto x = static_cast<std::int64_t>(pixel_uv[i]);
    auto y = static_cast<std::int64_t>(pixel_uv[i + 1]);
    for (int c = 0; c < 3; ++c)
      out.push_back(static_cast<double>(image[(y * width + x) * 3 + c]));
  }
  return out;
}

RenderContext build_context_for_target(Pipeline& pipeline, const Dataset& dataset,
                                       const RunConfig& cfg, const Camera& base_camera,
                                       int exclude_view, double scale, bool jitter) {
  TrainViewCache cache = load_train_views(dataset);
  RenderOptions opt;
  opt.samples_per_ray = cfg.render.samples_per_ray;
  opt.jitter = jitter;
  opt.depth_mode = cfg.render.depth_sampling == "inverse" ? DepthSampling::inverse_depth
                                                          : DepthSampling::uniform;
  auto sources =
      make_sources(pipeline, cache, base_camera, exclude_view, cfg.render.source_views);
  return make_render_context(pipeline, base_camera, scale, std::move(sources), opt);
}

TrainResult train_loop(Pipeline& pipeline, Adam& optimizer, const Dataset& dataset,
                       const RunConfig& cfg, const std::filesystem::path& out_dir,
                       std::int64_t start_step, std::int64_t steps, const TrainHooks& hooks) {
  if (cfg.threads > 0) set_thread_count(cfg.threads);
  TrainViewCache cache = load_train_views(dataset);
  const std::uint64_t digest = config_digest(cfg);

  bool persist = !out_dir.empty();
  std::ofstream loss_csv;
  if (persist) {
    std::filesystem::create_directories(out_dir);
    bool fresh = start_step == 0;
    loss_csv.open(out_dir / "loss.csv", fresh ? std::ios::trunc : std::ios::app);
    if (fresh) loss_csv << "step,loss,lr\n";
  }

  RenderOptions opt;
  opt.samples_per_ray = cfg.render.samples_per_ray;
  opt.jitter = cfg.render.jitter;
  opt.depth_mode = cfg.render.depth_sampling == "inverse" ? DepthSampling::inverse_depth
                                                          : DepthSampling::uniform;

  Rng master(cfg.seed);
  TrainResult result;
  result.final_step = start_step;

  for (std::int64_t k = start_step; k < start_step + steps; ++k) {
    Rng step_rng = master.stream("train_step").stream(static_cast<std::uint64_t>(k));

    // One target view and one scale from the configured band.
    std::size_t ti = static_cast<std::size_t>(step_rng.below(cache.train_ids.size()));
    int target_id = cache.train_ids[ti];
    double scale =
        cfg.train.scales[static_cast<std::size_t>(step_rng.below(cfg.train.scales.size()))];
    const DatasetView* target_view = dataset.find("train", target_id, scale);
    if (!target_view)
      throw UserError("train: dataset is missing view " + std::to_string(target_id) +
                      " at scale " + std::to_string(scale));
    std::vector<float> target_image = dataset.load_image(*target_view);

    // Ray batch: uniform pixels of the scaled target.
    const Camera& tcam = target_view->camera;
    std::vector<double> pixels;
    pixels.reserve(static_cast<std::size_t>(cfg.train.batch_rays) * 2);
    for (std::int64_t r = 0; r < cfg.train.batch_rays; ++r) {
      pixels.push_back(static_cast<double>(step_rng.below(
                           static_cast<std::uint64_t>(tcam.width))) + 0.5);
      pixels.push_back(static_cast<double>(step_rng.below(
                           static_cast<std::uint64_t>(tcam.height))) + 0.5);
    }
    std::vector<double> gt = gather_pixel_colors(target_image, tcam.width, pixels);

    Tape tape;
    double loss_value = 0;
    {
      TapeScope scope(tape);
      auto sources = make_sources(pipeline, cache, cache.base_cams[ti], target_id,
                                  cfg.render.source_views);
      RenderContext ctx =
          make_render_context(pipeline, cache.base_cams[ti], scale, std::move(sources), opt);
      Rng render_rng = step_rng.stream("render");
      RayBatchResult res = render_rays(ctx, pixels, render_rng);
      Tensor gt_tensor = Tensor::from(pipeline.cfg.dtype, {cfg.train.batch_rays, 3}, gt);
      Tensor loss = ops::mse(res.rgb, gt_tensor);
      loss_value = loss.scalar_value();
      if (!std::isfinite(loss_value)) {
        if (persist) dump_bad_batch(out_dir, k, target_id, scale, pixels);
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(k) +
                                 " (batch dumped)");
      }
      std::vector<Tensor> leaves = pipeline.params.all();
      backward(tape, loss, leaves);
    }
    double lr_now = optimizer.current_lr();
    optimizer.step();
    pipeline.params.zero_grads();

    result.loss_trace.push_back(loss_value);
    result.final_step = k + 1;
    if (persist) loss_csv << k << "," << loss_value << "," << lr_now << "\n";

    bool checkpoint_due =
        persist && ((cfg.train.checkpoint_every > 0 && (k + 1) % cfg.train.checkpoint_every == 0) ||
                    k + 1 == start_step + steps);
    if (checkpoint_due)
      save_checkpoint(out_dir / ("ckpt_" + std::to_string(k + 1) + ".lirf"), pipeline.params,
                      digest, static_cast<std::uint64_t>(k + 1), &optimizer);
    if (hooks.on_step && !hooks.on_step(k + 1, loss_value)) break;
  }

  if (persist && result.final_step == start_step)  // steps == 0: initial snapshot only
    save_checkpoint(out_dir / "ckpt_0.lirf", pipeline.params, digest, 0, &optimizer);
  return result;
}

std::vector<EvalRow> evaluate(Pipeline& pipeline, const Dataset& dataset, const RunConfig& cfg,
                              const EvalOptions& options) {
  std::vector<EvalRow> rows;
  auto test_ids = dataset.view_ids("test");
  if (test_ids.empty()) throw UserError("eval: dataset has no held-out views");
  if (options.write_images) std::filesystem::create_directories(options.out_dir);

  for (int id : test_ids) {
    const DatasetView* base = dataset.find("test", id, 1.0);
    if (!base) {
      std::fprintf(stderr, "warning: test view %d lacks a x1 camera; skipped\n", id);
      continue;
    }
    for (double scale : options.scales) {
      const DatasetView* gt_view = dataset.find("test", id, scale);
      if (!gt_view) {
        std::fprintf(stderr, "warning: no ground truth for view %d at scale %s; skipped\n", id,
                     std::to_string(scale).c_str());
        continue;
      }
      std::vector<float> gt = dataset.load_image(*gt_view);

      RenderContext ctx =
          build_context_for_target(pipeline, dataset, cfg, base->camera, id, scale, false);
      Rng rng(cfg.seed);
      ImageRender img = render_image(ctx, rng);

      EvalRow row;
      row.scene = options.scene_name;
      row.view = id;
      row.scale = scale;
      row.psnr = psnr(img.rgb, gt);
      row.ssim = ssim(img.rgb, gt, img.width, img.height);
      row.avg2 = avg2_metric(row.psnr, row.ssim);
      rows.push_back(row);

      if (options.write_images) {
        char name[128];
        std::snprintf(name, sizeof(name), "render_%04d_%s.png", id,
                      std::to_string(scale).c_str());
        write_png_rgb(options.out_dir / name, img.rgb, img.width, img.height);
        // GT | render side by side.
        std::vector<float> side(static_cast<std::size_t>(img.height * img.width * 2 * 3));
        for (std::int64_t y = 0; y < img.height; ++y) {
          for (std::int64_t x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
              side[(y * 2 * img.width + x) * 3 + c] = gt[(y * img.width + x) * 3 + c];
              side[(y * 2 * img.width + img.width + x) * 3 + c] =
                  img.rgb[(y * img.width + x) * 3 + c];
            }
        }
        std::snprintf(name, sizeof(name), "side_%04d_%s.png", id,
                      std::to_string(scale).c_str());
        write_png_rgb(options.out_dir / name, side, 2 * img.width, img.height);
      }
    }
  }
  return rows;
}

void write_metric_csv(const std::filesystem::path& path, std::span<const EvalRow> rows) {
  std::ofstream f(path);
  if (!f) throw UserError("eval: cannot write '" + path.string() + "'");
  f << "scene,scale,psnr,ssim,avg2\n";
  for (const auto& row : rows)
    f << row.scene << "/view" << row.view << "," << row.scale << "," << row.psnr << ","
      << row.ssim << "," << row.avg2 << "\n";
}

}  // namespace lirf
