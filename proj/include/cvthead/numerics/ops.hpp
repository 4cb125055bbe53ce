#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cvthead/numerics/sparse.hpp"
#include "cvthead/numerics/tape.hpp"
#include "cvthead/numerics/tensor.hpp"

// Differentiable tensor primitives. Every op is a pure function of its inputs;
// when a tape is active and any input is tracked the op registers its
// gradient rule on that tape.
namespace cvthead::numerics {

enum class Activation { relu, gelu, tanh, sigmoid };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation kind);

// Elementwise, identical shapes.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> abs(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> activation(const Tensor<T>& x, Activation kind);

// x[..., n] + bias[n] broadcast over leading dims.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// a[m x k] * b[k x n]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[m x k] * b[n x k]^T
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);

// x * w + b for x[m x in], w[in x out], b[out].
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Normalises over the last dim with population variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Cross-correlation of x[Cin x H x W] with w[Cout x Cin x kh x kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 Conv2dOptions options);

// Nearest-neighbour 2x upsampling of x[C x H x W].
template <typename T> Tensor<T> upsample_nearest2x(const Tensor<T>& x);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// m[rows x cols] * x[cols x width]; gradient flows to x only.
template <typename T> Tensor<T> sparse_matmul(const SparseMatrix& m, const Tensor<T>& x);

// Scatters rows of desc[N x C] into a [C x H x W] plane; index_map holds one
// vertex index per pixel (row-major H x W) or -1 for background.
template <typename T>
Tensor<T> gather_to_image(const Tensor<T>& desc, std::span<const std::int32_t> index_map, std::size_t height,
                          std::size_t width, T background);

}  // namespace cvthead::numerics
