#include "lirf/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace lirf {

Pipeline::Pipeline(const ModelConfig& c, std::uint64_t init_seed)
    : cfg(c),
      encoder(cfg, params, Rng(init_seed).stream("init")),
      rayfn(cfg, params, Rng(init_seed).stream("init")),
      visibility(cfg, params, Rng(init_seed).stream("init")),
      radiance(cfg, params, Rng(init_seed).stream("init")) {}

double cone_radius_pixels(double scale) { return std::max(scale, 1.0); }

RenderContext make_render_context(Pipeline& pipeline, const Camera& base_camera, double scale,
                                  std::vector<SourceViewData> sources,
                                  const RenderOptions& options) {
  if (!(scale >= 0.5 && scale <= 4.0))
    throw UserError("render: scale " + std::to_string(scale) +
                    " outside the supported band [0.5, 4]");
  if (sources.size() < 2) throw UserError("render: need at least two source views");
  RenderContext ctx;
  ctx.pipeline = &pipeline;
  ctx.base_camera = base_camera;
  ctx.target_camera = base_camera.scaled(scale);
  ctx.scale =
      static_cast<double>(ctx.target_camera.width) / static_cast<double>(base_camera.width);
  ctx.sources = std::move(sources);
  ctx.options = options;
  return ctx;
}

namespace {

using i64 = std::int64_t;

struct GeometryBatch {
  i64 rays = 0, n = 0, m = 0, views = 0, cones = 0;
  double scale = 1.0;
  std::vector<i64> cone_of;             // per ray
  std::vector<double> vert_uv;          // per view: [U*N*M, 2] concatenated
  std::vector<std::uint8_t> vert_ok;    // per view: U*N*M
  std::vector<double> sample_uv;        // per view: [R*N, 2] concatenated
  std::vector<std::uint8_t> sample_ok;  // per view: R*N
  std::int64_t rf_rest = 0, vis_rest = 0;
  std::vector<double> rf_const;         // [R*N*M, rf_rest]: gamma(dx) || s
  std::vector<double> vis_const;        // [R*N*V, vis_rest]: gamma(d) || s
  std::vector<double> frustum_w;        // [R*N, M]
  std::vector<std::uint8_t> valid;      // [R*N*V], sample-major view-inner
  std::vector<i64> vertex_row;          // [R*N*M] gather indices into cone rows
};

GeometryBatch build_geometry(const RenderContext& ctx, std::span<const double> pixel_uv,
                             Rng& rng, RenderStats* stats) {
  const ModelConfig& cfg = ctx.pipeline->cfg;
  const Camera& cam = ctx.target_camera;
  const bool single = cfg.ablation.single_ray;

  GeometryBatch g;
  g.rays = static_cast<i64>(pixel_uv.size() / 2);
  g.n = ctx.options.samples_per_ray;
  g.m = cfg.vertices;
  g.views = static_cast<i64>(ctx.sources.size());
  g.scale = ctx.scale;

  const double r_m = cone_radius_pixels(ctx.scale);
  const bool shared = ctx.scale > 1.0;

  // Assign rays to cones; above x1 the cone grid is the base-resolution grid,
  // so rays landing in one base cell share frustum vertices.
  std::unordered_map<i64, i64> cone_index;
  std::vector<ConeBundle> cones;
  std::vector<FrustumSamples> frustums;
  g.cone_of.resize(static_cast<std::size_t>(g.rays));
  Rng jitter_rng = rng.stream("depth_jitter");
  for (i64 r = 0; r < g.rays; ++r) {
    double u = pixel_uv[2 * r], v = pixel_uv[2 * r + 1];
    if (shared) {
      i64 cxi = std::clamp<i64>(static_cast<i64>(std::floor(u / ctx.scale)), 0,
                                ctx.base_camera.width - 1);
      i64 cyi = std::clamp<i64>(static_cast<i64>(std::floor(v / ctx.scale)), 0,
                                ctx.base_camera.height - 1);
      i64 key = cyi * ctx.base_camera.width + cxi;
      auto [it, inserted] = cone_index.try_emplace(key, static_cast<i64>(cones.size()));
      if (inserted) {
        double cu = (static_cast<double>(cxi) + 0.5) * ctx.scale;
        double cv = (static_cast<double>(cyi) + 0.5) * ctx.scale;
        cones.push_back(make_cone_bundle(cam, cu, cv, r_m, ctx.scale));
      }
      g.cone_of[r] = it->second;
    } else {
      g.cone_of[r] = static_cast<i64>(cones.size());
      cones.push_back(make_cone_bundle(cam, u, v, r_m, ctx.scale));
    }
  }
  g.cones = static_cast<i64>(cones.size());
  frustums.reserve(cones.size());
  for (auto& cone : cones)
    frustums.push_back(sample_frustums(cone, cam.near, cam.far, g.n, g.m, false, jitter_rng,
                                       ctx.options.depth_mode));
  if (stats) {
    stats->cones_built += g.cones;
    if (!single) stats->vertex_feature_taps += g.views * g.cones * g.n * g.m;
  }

  const i64 s_total = g.rays * g.n;
  const i64 lp = cfg.pe_position_freqs, ld = cfg.pe_direction_freqs;
  g.rf_rest = (cfg.ablation.no_position ? 0 : 6 * lp) + (cfg.ablation.no_scale ? 0 : 1);
  g.vis_rest = (cfg.ablation.no_direction ? 0 : 6 * ld) + (cfg.ablation.no_scale ? 0 : 1);

  // Per-ray sample positions on the ray itself, at the shared depth planes.
  std::vector<Vec3> x(static_cast<std::size_t>(s_total));
  const Vec3 axis = cam.optical_axis();
  for (i64 r = 0; r < g.rays; ++r) {
    const FrustumSamples& fs = frustums[static_cast<std::size_t>(g.cone_of[r])];
    Vec3 dir = cam.ray_direction(pixel_uv[2 * r], pixel_uv[2 * r + 1]);
    double dz = dot(dir, axis);
    for (i64 i = 0; i < g.n; ++i) {
      double t0 = fs.plane_depth[i], t1 = fs.plane_depth[i + 1];
      double td = ctx.options.jitter ? t0 + (t1 - t0) * jitter_rng.uniform() : 0.5 * (t0 + t1);
      x[static_cast<std::size_t>(r * g.n + i)] = cam.center + dir * (td / dz);
    }
  }

  // Vertex projections per view (cone-level, shared across rays).
  if (!single) {
    g.vert_uv.resize(static_cast<std::size_t>(g.views * g.cones * g.n * g.m * 2));
    g.vert_ok.resize(static_cast<std::size_t>(g.views * g.cones * g.n * g.m));
    for (i64 v = 0; v < g.views; ++v) {
      const Camera& src = ctx.sources[static_cast<std::size_t>(v)].camera;
      double* uv = g.vert_uv.data() + v * g.cones * g.n * g.m * 2;
      std::uint8_t* ok = g.vert_ok.data() + v * g.cones * g.n * g.m;
      for (i64 c = 0; c < g.cones; ++c)
        for (i64 i = 0; i < g.n; ++i)
          for (i64 j = 0; j < g.m; ++j) {
            Projection pr = project(frustums[static_cast<std::size_t>(c)].vertex(i, j), src);
            i64 at = (c * g.n + i) * g.m + j;
            uv[2 * at] = pr.u;
            uv[2 * at + 1] = pr.v;
            ok[at] = pr.in_front && uv_in_image(pr.u, pr.v, src) ? 1 : 0;
          }
    }
  }

  // Sample projections, directions, and per-view validity.
  g.sample_uv.resize(static_cast<std::size_t>(g.views * s_total * 2));
  g.sample_ok.resize(static_cast<std::size_t>(g.views * s_total));
  g.vis_const.resize(static_cast<std::size_t>(s_total * g.views * g.vis_rest));
  g.valid.resize(static_cast<std::size_t>(s_total * g.views));
  for (i64 v = 0; v < g.views; ++v) {
    const Camera& src = ctx.sources[static_cast<std::size_t>(v)].camera;
    double* uv = g.sample_uv.data() + v * s_total * 2;
    std::uint8_t* ok = g.sample_ok.data() + v * s_total;
    for (i64 s = 0; s < s_total; ++s) {
      Projection pr = project(x[static_cast<std::size_t>(s)], src);
      uv[2 * s] = pr.u;
      uv[2 * s + 1] = pr.v;
      ok[s] = pr.in_front && uv_in_image(pr.u, pr.v, src) ? 1 : 0;

      double* row = g.vis_const.data() + (s * g.views + v) * g.vis_rest;
      if (!cfg.ablation.no_direction) {
        Vec3 d = source_dir_in_target(x[static_cast<std::size_t>(s)], src, ctx.target_camera);
        double comps[3] = {d.x, d.y, d.z};
        positional_encode(std::span<const double>(comps, 3), ld, row);
        row += 6 * ld;
      }
      if (!cfg.ablation.no_scale) *row = g.scale;
    }
  }

  // Relative offsets, their encoding, the distance weights, gather indices.
  if (!single) {
    g.rf_const.resize(static_cast<std::size_t>(s_total * g.m * g.rf_rest));
    g.frustum_w.resize(static_cast<std::size_t>(s_total * g.m));
    g.vertex_row.resize(static_cast<std::size_t>(s_total * g.m));
    std::vector<Vec3> offsets(static_cast<std::size_t>(g.m));
    for (i64 r = 0; r < g.rays; ++r) {
      const FrustumSamples& fs = frustums[static_cast<std::size_t>(g.cone_of[r])];
      for (i64 i = 0; i < g.n; ++i) {
        i64 s = r * g.n + i;
        double dist_sum = 0;
        for (i64 j = 0; j < g.m; ++j) {
          offsets[static_cast<std::size_t>(j)] = x[static_cast<std::size_t>(s)] - fs.vertex(i, j);
          dist_sum += norm(offsets[static_cast<std::size_t>(j)]);
          double* row = g.rf_const.data() + (s * g.m + j) * g.rf_rest;
          if (!cfg.ablation.no_position) {
            double comps[3] = {offsets[static_cast<std::size_t>(j)].x,
                               offsets[static_cast<std::size_t>(j)].y,
                               offsets[static_cast<std::size_t>(j)].z};
            positional_encode(std::span<const double>(comps, 3), lp, row);
            row += 6 * lp;
          }
          if (!cfg.ablation.no_scale) *row = g.scale;
          g.vertex_row[s * g.m + j] = (g.cone_of[r] * g.n + i) * g.m + j;
        }
        if (dist_sum == 0.0) {
          // Every vertex coincides with the sample; uniform is the symmetric limit.
          for (i64 j = 0; j < g.m; ++j)
            g.frustum_w[s * g.m + j] = 1.0 / static_cast<double>(g.m);
        } else {
          auto w = frustum_weights(offsets, cfg.inverse_distance_weights);
          for (i64 j = 0; j < g.m; ++j) g.frustum_w[s * g.m + j] = w[static_cast<std::size_t>(j)];
        }
      }
    }
  }

  // A view votes only when some of its queried geometry lands in frame. When
  // no view sees the sample at all the prior carries no information, so the
  // mask reverts to unrestricted voting over border-clamped features.
  for (i64 s = 0; s < s_total; ++s) {
    bool sample_any = false;
    for (i64 v = 0; v < g.views; ++v) {
      bool any = false;
      if (single) {
        any = g.sample_ok[static_cast<std::size_t>(v * s_total + s)] != 0;
      } else {
        i64 r = s / g.n, i = s % g.n;
        const std::uint8_t* ok = g.vert_ok.data() + v * g.cones * g.n * g.m;
        for (i64 j = 0; j < g.m && !any; ++j)
          any = ok[(g.cone_of[r] * g.n + i) * g.m + j] != 0;
      }
      g.valid[static_cast<std::size_t>(s * g.views + v)] = any ? 1 : 0;
      sample_any = sample_any || any;
    }
    if (!sample_any)
      for (i64 v = 0; v < g.views; ++v)
        g.valid[static_cast<std::size_t>(s * g.views + v)] = 1;
  }
  return g;
}

Tensor constant_column(Dtype dt, i64 rows, double value) {
  return Tensor::full(dt, {rows, 1}, value);
}

}  // namespace

RayBatchResult render_rays(const RenderContext& ctx, std::span<const double> pixel_uv,
                           Rng& rng, RenderStats* stats) {
  Pipeline& pipe = *ctx.pipeline;
  const ModelConfig& cfg = pipe.cfg;
  const Dtype dt = cfg.dtype;
  const bool single = cfg.ablation.single_ray;

  GeometryBatch g = build_geometry(ctx, pixel_uv, rng, stats);
  const i64 s_total = g.rays * g.n, v_count = g.views;

  // Per-view LIRF sample features, stacked to [S,V,Z].
  Tensor rf_const_rows, frustum_w;
  if (!single) {
    if (g.rf_rest > 0)
      rf_const_rows = Tensor::from(dt, {s_total * g.m, g.rf_rest}, g.rf_const);
    frustum_w = Tensor::from(dt, {s_total, g.m}, g.frustum_w);
  }
  std::vector<Tensor> z_parts;
  for (i64 v = 0; v < v_count; ++v) {
    const FeatureMaps& maps = ctx.sources[static_cast<std::size_t>(v)].maps;
    Tensor z_v;
    if (single) {
      std::span<const double> uv(g.sample_uv.data() + v * s_total * 2,
                                 static_cast<std::size_t>(s_total * 2));
      Tensor feats = ops::bilinear_sample(maps.f_c, uv).features;  // [S, C]
      z_v = pipe.rayfn.single_ray(feats, constant_column(dt, s_total, g.scale));
    } else {
      std::span<const double> uv(g.vert_uv.data() + v * g.cones * g.n * g.m * 2,
                                 static_cast<std::size_t>(g.cones * g.n * g.m * 2));
      Tensor cone_feats = ops::bilinear_sample(maps.f_c, uv).features;  // [U*N*M, C]
      // Below x1 every ray owns its cone, so the gather is the identity.
      Tensor ray_feats = g.cones == g.rays
                             ? cone_feats
                             : ops::gather_rows(cone_feats, g.vertex_row);  // [S*M, C]
      z_v = pipe.rayfn.aggregate_split(ray_feats, rf_const_rows, frustum_w);
    }
    z_parts.push_back(ops::reshape(z_v, {s_total, 1, pipe.rayfn.output_dim()}));
  }
  Tensor z = ops::concat(std::span<const Tensor>(z_parts.data(), z_parts.size()), 1);

  // Visibility weights across views.
  Tensor w;
  if (cfg.ablation.no_vis_weights) {
    w = Tensor::full(dt, {s_total, v_count}, 1.0 / static_cast<double>(v_count));
  } else {
    const i64 token_d = pipe.visibility.token_dim();
    std::vector<Tensor> resp_parts;
    for (i64 v = 0; v < v_count; ++v) {
      Tensor response =
          pipe.visibility.patch_response(ctx.sources[static_cast<std::size_t>(v)].maps.f_w);
      std::span<const double> uv(g.sample_uv.data() + v * s_total * 2,
                                 static_cast<std::size_t>(s_total * 2));
      Tensor sampled = ops::bilinear_sample(response, uv).features;  // [S, D]
      resp_parts.push_back(ops::reshape(sampled, {s_total, 1, token_d}));
    }
    Tensor resp_rows = ops::reshape(
        ops::concat(std::span<const Tensor>(resp_parts.data(), resp_parts.size()), 1),
        {s_total * v_count, token_d});
    Tensor rest_rows;
    if (g.vis_rest > 0)
      rest_rows = Tensor::from(dt, {s_total * v_count, g.vis_rest}, g.vis_const);
    Tensor t0 =
        pipe.visibility.tokens_from_responses(resp_rows, rest_rows, s_total, v_count);
    Tensor t0m = pipe.visibility.match_views(t0);
    w = pipe.visibility.predict(t0m, g.valid);
  }

  // Fuse, attend, and composite.
  auto fused = pipe.radiance.fuse(z, w);
  auto attended = pipe.radiance.cross_attend(fused);
  Tensor sigma = pipe.radiance.density_along_ray(attended.consistency, g.rays, g.n);
  Tensor rgb_samples = pipe.radiance.predict_color(attended.view_tokens, w);
  Tensor colors = ops::reshape(rgb_samples, {g.rays, g.n, 3});
  auto comp = ops::composite(colors, sigma);

  // Compositing-weighted per-view visibility (detached diagnostics).
  Tensor vis = Tensor::zeros(dt, {g.rays, v_count});
  for (i64 r = 0; r < g.rays; ++r) {
    double total = 0;
    for (i64 i = 0; i < g.n; ++i) total += comp.weights.value_at(r * g.n + i);
    for (i64 v = 0; v < v_count; ++v) {
      double acc = 0;
      for (i64 i = 0; i < g.n; ++i)
        acc += comp.weights.value_at(r * g.n + i) * w.value_at((r * g.n + i) * v_count + v);
      vis.values().set(static_cast<std::size_t>(r * v_count + v),
                       total > 1e-12 ? acc / total : 0.0);
    }
  }

  RayBatchResult out;
  out.rgb = comp.rgb;
  out.alpha = comp.alpha;
  out.weights = comp.weights;
  out.visibility = vis;
  return out;
}

RayBatchResult render_ray(const RenderContext& ctx, double u, double v, Rng& rng) {
  double uv[2] = {u, v};
  return render_rays(ctx, std::span<const double>(uv, 2), rng);
}

ImageRender render_image(const RenderContext& ctx, Rng& rng, RenderStats* stats,
                         bool want_visibility, std::int64_t chunk_rays) {
  const Camera& cam = ctx.target_camera;
  const i64 w = cam.width, h = cam.height;
  const i64 v_count = static_cast<i64>(ctx.sources.size());

  ImageRender img;
  img.width = w;
  img.height = h;
  img.rgb.assign(static_cast<std::size_t>(w * h * 3), 0.f);
  if (want_visibility)
    img.view_visibility.assign(static_cast<std::size_t>(w * h * v_count), 0.f);

  // Pixel order is cone-major above x1 so a shared cone never straddles a
  // chunk boundary (the vertex-feature cache stays exact).
  std::vector<i64> order(static_cast<std::size_t>(w * h));
  if (ctx.scale > 1.0) {
    std::vector<std::vector<i64>> buckets(
        static_cast<std::size_t>(ctx.base_camera.width * ctx.base_camera.height));
    for (i64 p = 0; p < w * h; ++p) {
      i64 px = p % w, py = p / w;
      i64 cxi = std::clamp<i64>(
          static_cast<i64>(std::floor((static_cast<double>(px) + 0.5) / ctx.scale)), 0,
          ctx.base_camera.width - 1);
      i64 cyi = std::clamp<i64>(
          static_cast<i64>(std::floor((static_cast<double>(py) + 0.5) / ctx.scale)), 0,
          ctx.base_camera.height - 1);
      buckets[static_cast<std::size_t>(cyi * ctx.base_camera.width + cxi)].push_back(p);
    }
    std::size_t at = 0;
    for (auto& b : buckets)
      for (i64 p : b) order[at++] = p;
  } else {
    for (i64 p = 0; p < w * h; ++p) order[static_cast<std::size_t>(p)] = p;
  }

  for (i64 begin = 0; begin < w * h;) {
    i64 end = std::min<i64>(w * h, begin + chunk_rays);
    std::vector<double> uv;
    uv.reserve(static_cast<std::size_t>((end - begin) * 2));
    for (i64 k = begin; k < end; ++k) {
      i64 p = order[static_cast<std::size_t>(k)];
      uv.push_back(static_cast<double>(p % w) + 0.5);
      uv.push_back(static_cast<double>(p / w) + 0.5);
    }
    RayBatchResult res = render_rays(ctx, uv, rng, stats);
    for (i64 k = begin; k < end; ++k) {
      i64 p = order[static_cast<std::size_t>(k)];
      for (int c = 0; c < 3; ++c)
        img.rgb[static_cast<std::size_t>(p * 3 + c)] =
            static_cast<float>(res.rgb.value_at((k - begin) * 3 + c));
      if (want_visibility)
        for (i64 v = 0; v < v_count; ++v)
          img.view_visibility[static_cast<std::size_t>(p * v_count + v)] =
              static_cast<float>(res.visibility.value_at((k - begin) * v_count + v));
    }
    begin = end;
  }
  return img;
}

double render_ray_gradcheck(std::uint64_t seed, int probes) {
  ModelConfig cfg;
  cfg.dtype = Dtype::f32;
  cfg.feature_channels = 6;
  cfg.residual_blocks = 1;
  cfg.token_dim = 16;
  cfg.heads = 4;
  cfg.ff_dim = 24;
  cfg.t2_layers = 2;
  cfg.pe_position_freqs = 2;
  cfg.pe_direction_freqs = 2;
  cfg.patch_size = 3;
  Pipeline pipe(cfg, seed);

  Rng rng(seed);
  std::vector<Camera> cams;
  for (int i = 0; i < 3; ++i) {
    double a = 0.8 * i - 0.8;
    Vec3 eye{3.0 * std::sin(a), -3.0 * std::cos(a), 1.0};
    cams.push_back(make_lookat_camera(eye, {0, 0, 0}, {0, 0, 1}, 50.0, 12, 12, 1.5, 6.0));
  }

  Rng img_rng = rng.stream("images");
  std::vector<Tensor> images;
  for (int v = 0; v < 2; ++v) {
    Tensor img = Tensor::zeros(Dtype::f32, {12, 12, 3});
    for (std::int64_t i = 0; i < img.numel(); ++i) img.values().set(i, img_rng.uniform(0, 1));
    images.push_back(img);
  }

  RenderOptions opt;
  opt.samples_per_ray = 4;
  opt.jitter = false;

  Tensor target = Tensor::zeros(Dtype::f32, {2, 3});
  Rng tgt_rng = rng.stream("target");
  for (std::int64_t i = 0; i < 6; ++i) target.values().set(i, tgt_rng.uniform(0, 1));
  const double pixels[4] = {4.3, 6.1, 7.7, 5.2};

  auto forward = [&]() {
    std::vector<SourceViewData> sources;
    for (int v = 0; v < 2; ++v)
      sources.push_back({cams[static_cast<std::size_t>(v + 1)],
                         pipe.encoder.extract(images[static_cast<std::size_t>(v)])});
    RenderContext ctx = make_render_context(pipe, cams[0], 1.3, std::move(sources), opt);
    Rng r(1);
    RayBatchResult res = render_rays(ctx, pixels, r);
    return ops::mse(res.rgb, target);
  };

  Tape tape;
  std::vector<Tensor> leaves = pipe.params.all();
  std::vector<Tensor> grads;
  {
    TapeScope scope(tape);
    Tensor loss = forward();
    grads = backward(tape, loss, leaves);
  }

  Rng pick(seed ^ 0x9E3779B9ULL);
  double max_rel = 0;
  for (int p = 0; p < probes; ++p) {
    std::size_t li = static_cast<std::size_t>(pick.below(leaves.size()));
    std::size_t ei = static_cast<std::size_t>(
        pick.below(static_cast<std::uint64_t>(leaves[li].numel())));
    double saved = leaves[li].value_at(ei);
    double h = 5e-3 * std::max(1.0, std::abs(saved));
    leaves[li].values().set(ei, saved + h);
    double lp = forward().scalar_value();
    leaves[li].values().set(ei, saved - h);
    double lm = forward().scalar_value();
    leaves[li].values().set(ei, saved);
    double fd = (lp - lm) / (2 * h);
    double an = grads[li].value_at(ei);
    double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-2});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace lirf
