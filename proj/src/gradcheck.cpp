#include "lirf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "lirf/ops.hpp"

namespace lirf {
namespace {

std::string g_corrupt_op;

Tensor rand_tensor(Rng& rng, std::vector<std::int64_t> shape, double lo = -1.5,
                   double hi = 1.5) {
  Tensor t = Tensor::zeros(Dtype::f64, std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.values().set(i, rng.uniform(lo, hi));
  return t;
}

}  // namespace

void set_gradcheck_corruption(const std::string& op_name) { g_corrupt_op = op_name; }

double finite_difference_check(std::vector<Tensor>& inputs,
                               const std::function<Tensor()>& fwd, double h,
                               const char* corrupt_tag) {
  Tape tape;
  std::vector<Tensor> grads;
  {
    TapeScope scope(tape);
    Tensor loss = fwd();
    grads = backward(tape, loss, inputs);
  }
  if (corrupt_tag && g_corrupt_op == corrupt_tag && grads[0].numel() > 0)
    grads[0].values().set(0, -grads[0].values().at(0));

  double max_rel = 0.0;
  for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
    Tensor& x = inputs[ii];
    for (std::int64_t e = 0; e < x.numel(); ++e) {
      double saved = x.values().at(e);
      x.values().set(e, saved + h);
      double lp = fwd().scalar_value();
      x.values().set(e, saved - h);
      double lm = fwd().scalar_value();
      x.values().set(e, saved);
      double fd = (lp - lm) / (2.0 * h);
      double an = grads[ii].values().at(e);
      double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-2});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

namespace {

using CaseFn = std::function<double(Rng&)>;

// Scalarizes via mse against a fixed random target so gradients reach every
// output element with generic weights.
double check_op(Rng& rng, std::vector<Tensor> inputs,
                const std::function<Tensor(const std::vector<Tensor>&)>& op_fwd,
                const char* tag) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor probe = op_fwd(inputs);
  Tensor target = rand_tensor(rng, probe.shape());
  auto fwd = [&]() { return ops::mse(op_fwd(inputs), target); };
  return finite_difference_check(inputs, fwd, 1e-5, tag);
}

std::map<std::string, CaseFn> build_cases() {
  std::map<std::string, CaseFn> cases;

  cases["matmul"] = [](Rng& rng) {
    std::int64_t m = 2 + rng.below(3), k = 2 + rng.below(3), n = 2 + rng.below(3);
    bool with_bias = rng.below(2) == 0;
    std::vector<Tensor> inputs{rand_tensor(rng, {m, k}), rand_tensor(rng, {k, n})};
    if (with_bias) inputs.push_back(rand_tensor(rng, {n}));
    return check_op(rng, inputs,
                    [with_bias](const std::vector<Tensor>& in) {
                      return ops::matmul(in[0], in[1], with_bias ? in[2] : Tensor());
                    },
                    "matmul");
  };

  cases["conv2d"] = [](Rng& rng) {
    std::int64_t ci = 1 + rng.below(2), co = 1 + rng.below(3);
    std::int64_t kh = 1 + rng.below(3), kw = 1 + rng.below(3);
    std::int64_t h = kh + 2 + rng.below(2), w = kw + 2 + rng.below(2);
    std::int64_t stride = 1 + rng.below(2), pad = rng.below(2);
    return check_op(rng, {rand_tensor(rng, {h, w, ci}), rand_tensor(rng, {co, ci, kh, kw})},
                    [=](const std::vector<Tensor>& in) {
                      return ops::conv2d(in[0], in[1], stride, pad);
                    },
                    "conv2d");
  };

  cases["add"] = [](Rng& rng) {
    std::int64_t m = 2 + rng.below(3), n = 2 + rng.below(3);
    bool bcast = rng.below(2) == 0;
    return check_op(rng,
                    {rand_tensor(rng, {m, n}),
                     bcast ? rand_tensor(rng, {n}) : rand_tensor(rng, {m, n})},
                    [](const std::vector<Tensor>& in) { return ops::add(in[0], in[1]); },
                    "add");
  };

  cases["mul"] = [](Rng& rng) {
    std::int64_t m = 2 + rng.below(3), n = 2 + rng.below(3);
    bool bcast = rng.below(2) == 0;
    return check_op(rng,
                    {rand_tensor(rng, {m, n}),
                     bcast ? rand_tensor(rng, {n}) : rand_tensor(rng, {m, n})},
                    [](const std::vector<Tensor>& in) { return ops::mul(in[0], in[1]); },
                    "mul");
  };

  cases["gather_rows"] = [](Rng& rng) {
    std::int64_t rows = 3 + rng.below(3), d = 2 + rng.below(3);
    std::int64_t picks = 2 + rng.below(5);
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < picks; ++i)
      idx.push_back(static_cast<std::int64_t>(rng.below(rows)));
    return check_op(rng, {rand_tensor(rng, {rows, d})},
                    [idx](const std::vector<Tensor>& in) {
                      return ops::gather_rows(in[0], idx);
                    },
                    "gather_rows");
  };

  cases["concat"] = [](Rng& rng) {
    std::int64_t m = 2 + rng.below(2), n = 2 + rng.below(2);
    std::int64_t axis = rng.below(2);
    std::vector<std::int64_t> s1{m, n}, s2{m, n};
    s2[axis] = 1 + rng.below(3);
    return check_op(rng, {rand_tensor(rng, s1), rand_tensor(rng, s2)},
                    [axis](const std::vector<Tensor>& in) {
                      return ops::concat({in[0], in[1]}, axis);
                    },
                    "concat");
  };

  cases["slice"] = [](Rng& rng) {
    std::int64_t m = 3 + rng.below(2), n = 3 + rng.below(2);
    std::int64_t axis = rng.below(2);
    std::int64_t ax = axis == 0 ? m : n;
    std::int64_t start = rng.below(ax - 1);
    std::int64_t len = 1 + rng.below(ax - start);
    return check_op(rng, {rand_tensor(rng, {m, n})},
                    [=](const std::vector<Tensor>& in) {
                      return ops::slice(in[0], axis, start, len);
                    },
                    "slice");
  };

  cases["reshape"] = [](Rng& rng) {
    std::int64_t m = 2 + rng.below(2), n = 2 + rng.below(2);
    return check_op(rng, {rand_tensor(rng, {m, n})},
                    [=](const std::vector<Tensor>& in) {
                      return ops::reshape(in[0], {n * m});
                    },
                    "reshape");
  };

  cases["transpose2d"] = [](Rng& rng) {
    std::int64_t m = 2 + rng.below(3), n = 2 + rng.below(3);
    return check_op(rng, {rand_tensor(rng, {m, n})},
                    [](const std::vector<Tensor>& in) { return ops::transpose2d(in[0]); },
                    "transpose2d");
  };

  auto ew_case = [](Tensor (*fn)(const Tensor&), const char* tag) {
    return [fn, tag](Rng& rng) {
      std::int64_t n = 3 + rng.below(5);
      return check_op(rng, {rand_tensor(rng, {n}, -2.0, 2.0)},
                      [fn](const std::vector<Tensor>& in) { return fn(in[0]); }, tag);
    };
  };
  cases["elu"] = ew_case(&ops::elu, "elu");
  cases["sigmoid"] = ew_case(&ops::sigmoid, "sigmoid");
  cases["softplus"] = ew_case(&ops::softplus, "softplus");

  cases["layer_norm"] = [](Rng& rng) {
    std::int64_t r = 2 + rng.below(3), d = 3 + rng.below(4);
    return check_op(rng, {rand_tensor(rng, {r, d})},
                    [](const std::vector<Tensor>& in) { return ops::layer_norm(in[0]); },
                    "layer_norm");
  };

  cases["softmax"] = [](Rng& rng) {
    std::int64_t r = 2 + rng.below(3), d = 3 + rng.below(3);
    std::vector<std::uint8_t> mask;
    if (rng.below(2) == 0) {
      mask.assign(static_cast<std::size_t>(r * d), 1);
      for (std::int64_t i = 0; i < r; ++i)
        mask[i * d + rng.below(d)] = 0;  // at most one hole per row
    }
    return check_op(rng, {rand_tensor(rng, {r, d})},
                    [mask](const std::vector<Tensor>& in) {
                      return ops::softmax(in[0], 1, mask);
                    },
                    "softmax");
  };

  cases["normalize"] = [](Rng& rng) {
    std::int64_t r = 2 + rng.below(3), d = 3 + rng.below(3);
    return check_op(rng, {rand_tensor(rng, {r, d}, 0.1, 2.0)},
                    [](const std::vector<Tensor>& in) { return ops::normalize(in[0]); },
                    "normalize");
  };

  cases["multi_head_attention"] = [](Rng& rng) {
    std::int64_t b = 1 + rng.below(2), s = 2 + rng.below(3);
    std::int64_t heads = 1 + rng.below(2);
    std::int64_t d = heads * (2 + rng.below(3));
    std::vector<std::int64_t> shape =
        rng.below(2) == 0 ? std::vector<std::int64_t>{s, d} : std::vector<std::int64_t>{b, s, d};
    return check_op(rng,
                    {rand_tensor(rng, shape), rand_tensor(rng, shape), rand_tensor(rng, shape)},
                    [heads](const std::vector<Tensor>& in) {
                      return ops::multi_head_attention(in[0], in[1], in[2], heads);
                    },
                    "multi_head_attention");
  };

  cases["bilinear_sample"] = [](Rng& rng) {
    std::int64_t h = 3 + rng.below(3), w = 3 + rng.below(3), c = 1 + rng.below(3);
    std::int64_t p = 2 + rng.below(4);
    std::vector<double> uv;
    for (std::int64_t i = 0; i < p; ++i) {
      uv.push_back(rng.uniform(-1.0, static_cast<double>(w) + 1.0));
      uv.push_back(rng.uniform(-1.0, static_cast<double>(h) + 1.0));
    }
    return check_op(rng, {rand_tensor(rng, {h, w, c})},
                    [uv](const std::vector<Tensor>& in) {
                      return ops::bilinear_sample(in[0], uv).features;
                    },
                    "bilinear_sample");
  };

  cases["upsample2x_w"] = [](Rng& rng) {
    std::int64_t c = 1 + rng.below(3), h = 2 + rng.below(2), w = 2 + rng.below(3);
    return check_op(rng, {rand_tensor(rng, {c, h, w})},
                    [](const std::vector<Tensor>& in) { return ops::upsample2x_w(in[0]); },
                    "upsample2x_w");
  };

  auto reduce_case = [](bool var, const char* tag) {
    return [var, tag](Rng& rng) {
      std::int64_t s = 2 + rng.below(3), v = 2 + rng.below(3), c = 2 + rng.below(3);
      std::int64_t axis = 1;
      bool weighted = rng.below(2) == 0;
      std::vector<Tensor> inputs{rand_tensor(rng, {s, v, c})};
      if (weighted) inputs.push_back(rand_tensor(rng, {s, v}, 0.1, 1.0));
      return check_op(rng, inputs,
                      [var, axis, weighted](const std::vector<Tensor>& in) {
                        Tensor w = weighted ? in[1] : Tensor();
                        return var ? ops::reduce_var(in[0], axis, w)
                                   : ops::reduce_mean(in[0], axis, w);
                      },
                      tag);
    };
  };
  cases["reduce_mean"] = reduce_case(false, "reduce_mean");
  cases["reduce_var"] = reduce_case(true, "reduce_var");

  cases["mse"] = [](Rng& rng) {
    std::int64_t n = 3 + rng.below(5);
    std::vector<Tensor> inputs{rand_tensor(rng, {n}), rand_tensor(rng, {n})};
    for (auto& t : inputs) t.set_requires_grad(true);
    auto fwd = [&]() { return ops::mse(inputs[0], inputs[1]); };
    return finite_difference_check(inputs, fwd, 1e-5, "mse");
  };

  cases["composite"] = [](Rng& rng) {
    std::int64_t r = 1 + rng.below(2), n = 2 + rng.below(4);
    std::vector<Tensor> inputs{rand_tensor(rng, {r, n, 3}, 0.0, 1.0),
                               rand_tensor(rng, {r, n}, 0.05, 2.0)};
    return check_op(rng, inputs,
                    [](const std::vector<Tensor>& in) {
                      return ops::composite(in[0], in[1]).rgb;
                    },
                    "composite");
  };

  return cases;
}

}  // namespace

GradCheckReport run_primitive_gradchecks(std::uint64_t seed, int instances_per_op,
                                         double tolerance) {
  auto cases = build_cases();
  GradCheckReport report;
  report.tolerance = tolerance;
  report.all_pass = true;
  Rng master(seed);

  for (const char* name : ops::primitive_names()) {
    auto it = cases.find(name);
    if (it == cases.end())
      throw std::runtime_error(std::string("gradcheck: no case registered for primitive '") +
                               name + "'");
    Rng op_rng = master.stream(name);
    GradCheckRow row;
    row.op = name;
    row.instances = instances_per_op;
    for (int i = 0; i < instances_per_op; ++i)
      row.max_rel_err = std::max(row.max_rel_err, it->second(op_rng));
    row.pass = row.max_rel_err <= tolerance;
    report.all_pass = report.all_pass && row.pass;
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace lirf
