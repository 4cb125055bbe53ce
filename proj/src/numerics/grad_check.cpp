#include "cvthead/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include "cvthead/numerics/tape.hpp"

namespace cvthead::numerics {

template <typename T>
GradCheckReport grad_check(const ScalarClosure<T>& fn, const std::vector<Tensor<T>>& inputs,
                           const GradCheckOptions& options) {
  const double h = options.step > 0.0 ? options.step : (sizeof(T) == sizeof(float) ? 1e-3 : 1e-5);

  std::vector<Tensor<T>> analytic;
  {
    GradTape<T> tape;
    TapeScope<T> scope(tape);
    std::vector<Tensor<T>> tracked;
    tracked.reserve(inputs.size());
    for (const auto& in : inputs) tracked.push_back(tape.watch(in));
    const Tensor<T> loss = fn(tracked);
    if (loss.numel() != 1) throw UsageError("grad_check: closure must return a scalar");
    const Gradients<T> grads = loss.tracked() ? tape.backward(loss) : Gradients<T>();
    for (const auto& t : tracked) analytic.push_back(grads.grad(t));
  }

  auto eval = [&](const std::vector<Tensor<T>>& args) { return static_cast<double>(fn(args).item()); };

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  std::vector<Tensor<T>> args(inputs.begin(), inputs.end());
  std::optional<double> base;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::size_t n = inputs[k].numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input > 0 && n > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    std::vector<T> values = inputs[k].to_vector();
    for (std::size_t i : coords) {
      const T original = values[i];
      values[i] = static_cast<T>(original + h);
      args[k] = Tensor<T>(inputs[k].shape(), values);
      const double plus = eval(args);
      values[i] = static_cast<T>(original - h);
      args[k] = Tensor<T>(inputs[k].shape(), values);
      const double minus = eval(args);
      values[i] = original;
      // Divide by the step actually taken after rounding to T.
      const double taken = static_cast<double>(static_cast<T>(original + h)) -
                           static_cast<double>(static_cast<T>(original - h));
      double numeric = (plus - minus) / taken;
      const double a = static_cast<double>(analytic[k][i]);
      auto rel_err = [&](double num) {
        return std::abs(a - num) / std::max({std::abs(a), std::abs(num), options.abs_floor});
      };
      double rel = rel_err(numeric);
      if (rel > options.rel_tol && options.kink_step > 0.0 && sizeof(T) == sizeof(double)) {
        // A ReLU/abs kink inside [x-h, x+h]: the tape gives the derivative of
        // the piece x lies on, so it must match one one-sided difference.
        if (!base) base = eval(inputs);
        const double s = options.kink_step;
        values[i] = static_cast<T>(original + s);
        args[k] = Tensor<T>(inputs[k].shape(), values);
        const double fwd = (eval(args) - *base) / s;
        values[i] = static_cast<T>(original - s);
        args[k] = Tensor<T>(inputs[k].shape(), values);
        const double bwd = (*base - eval(args)) / s;
        values[i] = original;
        const double best = rel_err(fwd) <= rel_err(bwd) ? fwd : bwd;
        if (rel_err(best) <= options.rel_tol) {
          ++report.kinks;
          numeric = best;
          rel = rel_err(best);
        }
      }
      const double abs_err = std::abs(a - numeric);
      ++report.coords_checked;
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      if (rel > report.max_rel_err || report.worst.empty()) {
        if (rel >= report.max_rel_err) {
          std::ostringstream os;
          os << "input " << k << ", index " << i << ": analytic " << a << " vs numeric " << numeric;
          report.worst = os.str();
        }
        report.max_rel_err = std::max(report.max_rel_err, rel);
      }
    }
    args[k] = inputs[k];
  }
  report.pass = report.max_rel_err <= options.rel_tol;
  return report;
}

template GradCheckReport grad_check(const ScalarClosure<float>&, const std::vector<Tensor<float>>&,
                                    const GradCheckOptions&);
template GradCheckReport grad_check(const ScalarClosure<double>&, const std::vector<Tensor<double>>&,
                                    const GradCheckOptions&);

}  // namespace cvthead::numerics
