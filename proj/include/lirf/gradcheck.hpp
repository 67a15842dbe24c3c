#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lirf/tensor.hpp"

namespace lirf {

struct GradCheckRow {
  std::string op;
  double max_rel_err = 0.0;
  int instances = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  bool all_pass = false;
  double tolerance = 0.0;
};

// Central finite differences (h = 1e-5) at 64-bit against every registered
// primitive's reverse-mode gradients; one row per primitive, in registry
// order. Throws if the case table does not cover the registry.
GradCheckReport run_primitive_gradchecks(std::uint64_t seed, int instances_per_op = 20,
                                         double tolerance = 1e-5);

// Test hook: flips the sign of one analytic gradient element whenever the
// named op is checked, to prove the harness catches a broken backward.
void set_gradcheck_corruption(const std::string& op_name);

// Shared helper: runs fwd() under a fresh tape, compares backward gradients
// of the scalar output against central differences over each input element.
// Returns the max relative error (relative to gradient magnitude, floored).
double finite_difference_check(std::vector<Tensor>& inputs,
                               const std::function<Tensor()>& fwd, double h,
                               const char* corrupt_tag = nullptr);

}  // namespace lirf
