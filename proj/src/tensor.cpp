#include "lirf/tensor.hpp"

#include "lirf/ops.hpp"

#include <atomic>
#include <cstring>
#include <cstdio>

namespace lirf {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor Tensor::zeros(Dtype dt, std::vector<std::int64_t> shape) {
  auto node = std::make_shared<TensorNode>();
  std::int64_t n = shape_numel(shape);
  node->shape = std::move(shape);
  node->values = Storage(dt, static_cast<std::size_t>(n));
  return Tensor(std::move(node));
}

Tensor Tensor::uninitialized(Dtype dt, std::vector<std::int64_t> shape) {
  auto node = std::make_shared<TensorNode>();
  std::int64_t n = shape_numel(shape);
  node->shape = std::move(shape);
  node->values = Storage::uninit(dt, static_cast<std::size_t>(n));
  return Tensor(std::move(node));
}

Tensor Tensor::full(Dtype dt, std::vector<std::int64_t> shape, double v) {
  Tensor t = zeros(dt, std::move(shape));
  t.values().fill(v);
  return t;
}

Tensor Tensor::from(Dtype dt, std::vector<std::int64_t> shape, std::span<const double> vals) {
  Tensor t = zeros(dt, std::move(shape));
  if (static_cast<std::int64_t>(vals.size()) != t.numel())
    throw ShapeError("tensor_from", "value count " + std::to_string(vals.size()) +
                                        " does not match shape " +
                                        format_shape(t.shape().data(), t.rank()));
  if (t.dtype() == Dtype::f32) {
    float* dst = t.values().f32();
    for (std::size_t i = 0; i < vals.size(); ++i) dst[i] = static_cast<float>(vals[i]);
  } else {
    double* dst = t.values().f64();
    for (std::size_t i = 0; i < vals.size(); ++i) dst[i] = vals[i];
  }
  return t;
}

Tensor Tensor::from_f32(std::vector<std::int64_t> shape, std::vector<float> vals) {
  Tensor t = zeros(Dtype::f32, std::move(shape));
  if (static_cast<std::int64_t>(vals.size()) != t.numel())
    throw ShapeError("tensor_from", "value count mismatch");
  std::copy(vals.begin(), vals.end(), t.values().f32());
  return t;
}

Tensor Tensor::from_f64(std::vector<std::int64_t> shape, std::vector<double> vals) {
  Tensor t = zeros(Dtype::f64, std::move(shape));
  if (static_cast<std::int64_t>(vals.size()) != t.numel())
    throw ShapeError("tensor_from", "value count mismatch");
  std::copy(vals.begin(), vals.end(), t.values().f64());
  return t;
}

std::vector<double> Tensor::to_doubles() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = node_->values.at(i);
  return out;
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<TensorNode>();
  node->shape = node_->shape;
  node->values = Storage::uninit(node_->values.dtype(), node_->values.size());
  std::memcpy(node->values.raw(), node_->values.raw(),
              node_->values.size() * dtype_size(node_->values.dtype()));
  node->requires_grad = node_->requires_grad;
  node->name = node_->name;
  return Tensor(std::move(node));
}

Tensor Tensor::to(Dtype dt) const {
  if (dt == dtype()) return clone();
  Tensor t = zeros(dt, node_->shape);
  for (std::int64_t i = 0; i < numel(); ++i) t.values().set(i, node_->values.at(i));
  t.set_requires_grad(node_->requires_grad);
  return t;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
std::atomic<bool> g_strict{false};
}  // namespace

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

void set_strict_nonfinite(bool enabled) { g_strict.store(enabled); }
bool strict_nonfinite() { return g_strict.load(); }

void ensure_grad(TensorNode& n) {
  if (n.grad.empty() && n.values.size() > 0) {
    n.grad = Storage(n.values.dtype(), n.values.size());
    n.grad_live = true;
  }
}

bool grad_accumulate_mode(TensorNode& n) {
  if (!n.grad.empty()) return true;
  if (n.values.size() > 0) n.grad = Storage::uninit(n.values.dtype(), n.values.size());
  n.grad_live = true;
  return false;
}

void accumulate(Storage& dst, const Storage& src) {
  auto n = static_cast<std::int64_t>(dst.size());
  if (dst.dtype() == Dtype::f32) {
    float* d = dst.f32();
    const float* s = src.f32();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) d[i] += s[i];
    });
  } else {
    double* d = dst.f64();
    const double* s = src.f64();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) d[i] += s[i];
    });
  }
}

std::vector<Tensor> backward(Tape& tape, const Tensor& loss, std::span<const Tensor> leaves,
                             const BackwardOptions& opts) {
  if (loss.numel() != 1)
    throw ShapeError("backward", "loss must be scalar, got shape " +
                                     format_shape(loss.shape().data(), loss.rank()));
  bool connected = false;
  for (const auto& rec : tape.records())
    if (rec.output == loss.node()) connected = true;

  if (tape.empty() || !connected || !loss.requires_grad()) {
    if (opts.warn_detached)
      std::fprintf(stderr, "warning: backward on a detached graph; leaf gradients are zero\n");
  } else {
    ensure_grad(*loss.node());
    loss.node()->grad.fill(1.0);
    auto& recs = tape.records();
    for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // branch never reached by the loss
      std::string tag = std::string("bwd_") + it->op;
      ops::detail::OpTimer timer_(tag.c_str());
      it->backward();
    }
  }

  std::vector<Tensor> grads;
  grads.reserve(leaves.size());
  for (const auto& leaf : leaves) {
    ensure_grad(*leaf.node());
    Tensor g = Tensor::zeros(leaf.dtype(), leaf.shape());
    g.values() = leaf.node()->grad;
    grads.push_back(std::move(g));
  }
  if (opts.clear_tape) tape.clear();
  return grads;
}

}  // namespace lirf
