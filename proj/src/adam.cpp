#include "lirf/adam.hpp"

#include <cmath>

namespace lirf {

Tensor ParamStore::create(const std::string& name, Dtype dt, std::vector<std::int64_t> shape) {
  if (index_.count(name))
    throw ShapeError("param_store", "duplicate parameter name '" + name + "'");
  Tensor t = Tensor::zeros(dt, std::move(shape));
  t.set_requires_grad(true);
  t.node()->name = name;
  index_[name] = params_.size();
  params_.push_back(t);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw ShapeError("param_store", "unknown parameter '" + name + "'");
  return params_[it->second];
}

std::int64_t ParamStore::total_values() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p.clear_grad();
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.dtype(), static_cast<std::size_t>(p.numel()));
    v_.emplace_back(p.dtype(), static_cast<std::size_t>(p.numel()));
  }
}

double Adam::current_lr() const {
  return cfg_.lr * std::pow(cfg_.decay_gamma,
                            static_cast<double>(step_) / static_cast<double>(cfg_.decay_every));
}

void Adam::step() {
  double lr = current_lr();
  std::int64_t t = step_ + 1;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));

  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    Tensor& p = params_[pi];
    if (!p.has_grad())
      throw std::runtime_error("adam: missing gradient for parameter '" + p.name() + "'");
    std::int64_t n = p.numel();
    auto update = [&](auto* theta, const auto* g, auto* m, auto* v) {
      using T = std::remove_cv_t<std::remove_reference_t<decltype(theta[0])>>;
      T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
      T eps = static_cast<T>(cfg_.eps);
      T alpha = static_cast<T>(lr);
      T c1 = static_cast<T>(bc1), c2 = static_cast<T>(bc2);
      parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
          m[i] = b1 * m[i] + (T(1) - b1) * g[i];
          v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
          T mhat = m[i] / c1;
          T vhat = v[i] / c2;
          theta[i] -= alpha * mhat / (std::sqrt(vhat) + eps);
        }
      });
    };
    if (p.dtype() == Dtype::f32)
      update(p.values().f32(), p.grad().f32(), m_[pi].f32(), v_[pi].f32());
    else
      update(p.values().f64(), p.grad().f64(), m_[pi].f64(), v_[pi].f64());
  }
  step_ = t;
}

void Adam::restore(std::vector<Storage> m, std::vector<Storage> v, std::int64_t step) {
  if (m.size() != params_.size() || v.size() != params_.size())
    throw std::runtime_error("adam: optimizer state count does not match parameter count");
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (m[i].size() != static_cast<std::size_t>(params_[i].numel()) ||
        v[i].size() != static_cast<std::size_t>(params_[i].numel()))
      throw std::runtime_error("adam: optimizer state shape mismatch for '" +
                               params_[i].name() + "'");
  m_ = std::move(m);
  v_ = std::move(v);
  step_ = step;
}

}  // namespace lirf
