#include "cvthead/numerics/op_checks.hpp"

#include <random>

#include "cvthead/numerics/ops.hpp"

namespace cvthead::numerics {

namespace {

using D = double;
using Inputs = std::vector<Tensor<D>>;

Tensor<D> uniform(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<D> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<D>(shape, std::move(v));
}

// Contracts an op output against fixed random weights so every output
// coordinate contributes a distinct amount to the scalar.
Tensor<D> contract(const Tensor<D>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return sum(mul(y, uniform(y.shape(), rng)));
}

GradCheckCase make_case(std::string name,
                        std::function<std::pair<ScalarClosure<D>, Inputs>(std::mt19937_64&, std::uint64_t)> build) {
  return {std::move(name), [build](std::uint64_t seed, const GradCheckOptions& opts) {
            std::mt19937_64 rng(seed);
            auto [fn, inputs] = build(rng, seed);
            GradCheckOptions o = opts;
            o.seed = seed;
            return grad_check<D>(fn, inputs, o);
          }};
}

}  // namespace

std::vector<GradCheckCase> primitive_grad_checks() {
  std::vector<GradCheckCase> cases;

  auto binary = [&](std::string name, Tensor<D> (*op)(const Tensor<D>&, const Tensor<D>&), double blo, double bhi) {
    cases.push_back(make_case(name, [op, blo, bhi](std::mt19937_64& rng, std::uint64_t seed) {
      Inputs in{uniform({3, 4}, rng), uniform({3, 4}, rng, blo, bhi)};
      ScalarClosure<D> fn = [op, seed](const Inputs& x) { return contract(op(x[0], x[1]), seed); };
      return std::make_pair(fn, in);
    }));
  };
  binary("add", &add<D>, -1, 1);
  binary("sub", &sub<D>, -1, 1);
  binary("mul", &mul<D>, -1, 1);
  binary("div", &div<D>, 0.5, 2.0);

  auto unary = [&](std::string name, std::function<Tensor<D>(const Tensor<D>&)> op, double lo, double hi) {
    cases.push_back(make_case(name, [op, lo, hi](std::mt19937_64& rng, std::uint64_t seed) {
      Inputs in{uniform({4, 5}, rng, lo, hi)};
      ScalarClosure<D> fn = [op, seed](const Inputs& x) { return contract(op(x[0]), seed); };
      return std::make_pair(fn, in);
    }));
  };
  unary("scale", [](const Tensor<D>& x) { return scale(x, -1.7); }, -1, 1);
  unary("add_scalar", [](const Tensor<D>& x) { return add_scalar(x, 0.3); }, -1, 1);
  unary("abs", [](const Tensor<D>& x) { return abs(x); }, -1, 1);
  unary("exp", [](const Tensor<D>& x) { return exp(x); }, -1, 1);
  unary("log", [](const Tensor<D>& x) { return log(x); }, 0.5, 2.0);
  for (Activation a : {Activation::relu, Activation::gelu, Activation::tanh, Activation::sigmoid}) {
    unary(std::string(activation_name(a)), [a](const Tensor<D>& x) { return activation(x, a); }, -2, 2);
  }
  unary("sum", [](const Tensor<D>& x) { return scale(sum(x), 0.5); }, -1, 1);
  unary("mean", [](const Tensor<D>& x) { return mean(mul(x, x)); }, -1, 1);
  unary("transpose", [](const Tensor<D>& x) { return transpose(x); }, -1, 1);
  unary("reshape", [](const Tensor<D>& x) { return reshape(x, {2, 10}); }, -1, 1);
  unary("softmax_axis0", [](const Tensor<D>& x) { return softmax(x, 0); }, -2, 2);
  unary("softmax_axis1", [](const Tensor<D>& x) { return softmax(x, 1); }, -2, 2);
  unary("slice", [](const Tensor<D>& x) { return slice(x, 1, 1, 3); }, -1, 1);

  cases.push_back(make_case("add_bias", [](std::mt19937_64& rng, std::uint64_t seed) {
    Inputs in{uniform({3, 4}, rng), uniform({4}, rng)};
    ScalarClosure<D> fn = [seed](const Inputs& x) { return contract(add_bias(x[0], x[1]), seed); };
    return std::make_pair(fn, in);
  }));
  cases.push_back(make_case("matmul", [](std::mt19937_64& rng, std::uint64_t seed) {
    Inputs in{uniform({3, 4}, rng), uniform({4, 5}, rng)};
    ScalarClosure<D> fn = [seed](const Inputs& x) { return contract(matmul(x[0], x[1]), seed); };
    return std::make_pair(fn, in);
  }));
  cases.push_back(make_case("matmul_nt", [](std::mt19937_64& rng, std::uint64_t seed) {
    Inputs in{uniform({3, 4}, rng), uniform({5, 4}, rng)};
    ScalarClosure<D> fn = [seed](const Inputs& x) { return contract(matmul_nt(x[0], x[1]), seed); };
    return std::make_pair(fn, in);
  }));
  cases.push_back(make_case("linear", [](std::mt19937_64& rng, std::uint64_t seed) {
    Inputs in{uniform({3, 4}, rng), uniform({4, 6}, rng), uniform({6}, rng)};
    ScalarClosure<D> fn = [seed](const Inputs& x) { return contract(linear(x[0], x[1], x[2]), seed); };
    return std::make_pair(fn, in);
  }));
  cases.push_back(make_case("layer_norm", [](std::mt19937_64& rng, std::uint64_t seed) {
    Inputs in{uniform({3, 6}, rng, -2, 2), uniform({6}, rng), uniform({6}, rng)};
    ScalarClosure<D> fn = [seed](const Inputs& x) { return contract(layer_norm(x[0], x[1], x[2], 1e-5), seed); };
    return std::make_pair(fn, in);
  }));
  for (auto [stride, pad, k] : {std::tuple<std::size_t, std::size_t, std::size_t>{1, 1, 3}, {2, 1, 4}, {1, 0, 1}}) {
    const std::string name = "conv2d_k" + std::to_string(k) + "_s" + std::to_string(stride);
    cases.push_back(make_case(name, [stride, pad, k](std::mt19937_64& rng, std::uint64_t seed) {
      Inputs in{uniform({2, 6, 6}, rng), uniform({3, 2, k, k}, rng), uniform({3}, rng)};
      ScalarClosure<D> fn = [seed, stride, pad](const Inputs& x) {
        return contract(conv2d(x[0], x[1], std::optional(x[2]), {stride, pad}), seed);
      };
      return std::make_pair(fn, in);
    }));
  }
  cases.push_back(make_case("upsample_nearest2x", [](std::mt19937_64& rng, std::uint64_t seed) {
    Inputs in{uniform({2, 3, 3}, rng)};
    ScalarClosure<D> fn = [seed](const Inputs& x) { return contract(upsample_nearest2x(x[0]), seed); };
    return std::make_pair(fn, in);
  }));
  cases.push_back(make_case("concat", [](std::mt19937_64& rng, std::uint64_t seed) {
    Inputs in{uniform({2, 3, 2}, rng), uniform({2, 1, 2}, rng)};
    ScalarClosure<D> fn = [seed](const Inputs& x) { return contract(concat<D>({x[0], x[1]}, 1), seed); };
    return std::make_pair(fn, in);
  }));
  cases.push_back(make_case("sparse_matmul", [](std::mt19937_64& rng, std::uint64_t seed) {
    std::uniform_int_distribution<std::uint32_t> col(0, 4);
    std::uniform_real_distribution<float> val(0.0f, 1.0f);
    std::vector<Triplet> trip;
    for (std::uint32_t r = 0; r < 6; ++r)
      for (int k = 0; k < 2; ++k) trip.push_back({r, col(rng), val(rng)});
    auto m = std::make_shared<SparseMatrix>(6, 5, std::move(trip));
    Inputs in{uniform({5, 3}, rng)};
    ScalarClosure<D> fn = [seed, m](const Inputs& x) { return contract(sparse_matmul(*m, x[0]), seed); };
    return std::make_pair(fn, in);
  }));
  cases.push_back(make_case("gather_to_image", [](std::mt19937_64& rng, std::uint64_t seed) {
    std::uniform_int_distribution<int> idx(-1, 4);
    auto map = std::make_shared<std::vector<std::int32_t>>(16);
    for (auto& v : *map) v = idx(rng);
    Inputs in{uniform({5, 3}, rng)};
    ScalarClosure<D> fn = [seed, map](const Inputs& x) {
      return contract(gather_to_image(x[0], std::span<const std::int32_t>(*map), 4, 4, 0.0), seed);
    };
    return std::make_pair(fn, in);
  }));
  return cases;
}

}  // namespace cvthead::numerics
