#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "lirf/tensor.hpp"

namespace lirf {

// Named, ordered collection of trainable tensors. Registration order is the
// canonical order for checkpoints and optimizer state.
class ParamStore {
 public:
  Tensor create(const std::string& name, Dtype dt, std::vector<std::int64_t> shape);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<Tensor>& all() const { return params_; }
  std::int64_t total_values() const;
  void zero_grads();

 private:
  std::vector<Tensor> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // lr(t) = lr * decay_gamma^(t / decay_every); decay_every = 1 gives the
  // plain per-step exponential schedule.
  double decay_gamma = 1.0;
  std::int64_t decay_every = 1;
};

// Standard bias-corrected Adam over a fixed parameter list. Moments are held
// at the parameters' dtype. Step counter strictly increases by one per call.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);

  // Applies one update from the gradients currently materialized on the
  // parameter nodes. A parameter with no gradient buffer is an error.
  void step();

  std::int64_t step_count() const { return step_; }
  double current_lr() const;  // lr for the upcoming step
  const AdamConfig& config() const { return cfg_; }

  // Serialized state access (moments in parameter order, then step counter).
  const std::vector<Storage>& first_moments() const { return m_; }
  const std::vector<Storage>& second_moments() const { return v_; }
  void restore(std::vector<Storage> m, std::vector<Storage> v, std::int64_t step);

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<Storage> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace lirf
