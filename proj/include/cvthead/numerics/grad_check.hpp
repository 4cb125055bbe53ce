#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cvthead/numerics/tensor.hpp"

namespace cvthead::numerics {

struct GradCheckOptions {
  double rel_tol = 1e-3;
  // Central-difference step; 0 selects 1e-3 for float and 1e-5 for double.
  double step = 0.0;
  // Denominator floor for the relative error, so that vanishing gradients are
  // compared absolutely.
  double abs_floor = 1e-3;
  // Checks at most this many coordinates per input (0 = all), sampled by seed.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  // When a central difference disagrees, retry with one-sided differences of
  // this step (64-bit only; 0 disables). Agreement with either side counts as
  // a kink, not a failure.
  double kink_step = 1e-8;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t coords_checked = 0;
  std::size_t kinks = 0;  // coordinates accepted by the one-sided retry
  bool pass = true;
  std::string worst;  // "input k, index i: analytic a vs numeric n"
};

template <typename T>
using ScalarClosure = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

// Compares the tape gradient of `fn` at `inputs` with central finite
// differences; the report flags any coordinate whose relative error exceeds
// rel_tol.
template <typename T>
GradCheckReport grad_check(const ScalarClosure<T>& fn, const std::vector<Tensor<T>>& inputs,
                           const GradCheckOptions& options = {});

}  // namespace cvthead::numerics
