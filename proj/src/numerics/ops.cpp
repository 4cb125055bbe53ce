#include "cvthead/numerics/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace cvthead::numerics {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const MatRM<T>>;
template <typename T>
using MMap = Eigen::Map<MatRM<T>>;

template <typename T>
void check_finite(std::string_view kind, const std::vector<T>& values) {
  if (!checked_mode()) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(kind) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

// Builds the output tensor and, when recording, registers the backward rule
// produced by `make_backward` (only invoked when needed).
template <typename T, typename MakeBackward>
Tensor<T> finish(std::string_view kind, Shape shape, std::vector<T> values,
                 std::vector<const Tensor<T>*> inputs, MakeBackward&& make_backward) {
  check_finite(kind, values);
  Tensor<T> out(std::move(shape), std::move(values));
  GradTape<T>* tape = GradTape<T>::active();
  if (!tape) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->tracked(); });
  if (!any) return out;
  return tape->record(kind, std::move(inputs), std::move(out), make_backward());
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_ndim(const Tensor<T>& t, std::size_t n, const char* op) {
  if (t.ndim() != n) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(n) + "-d tensor, got " + shape_str(t.shape()));
  }
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return finish<T>("add", a.shape(), std::move(out), {&a, &b}, [] {
    return [](std::span<const T> g, BackwardContext<T>& ctx) {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!ctx.needs(k)) continue;
        auto ga = ctx.grad(k);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
    };
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return finish<T>("sub", a.shape(), std::move(out), {&a, &b}, [] {
    return [](std::span<const T> g, BackwardContext<T>& ctx) {
      if (ctx.needs(0)) {
        auto ga = ctx.grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (ctx.needs(1)) {
        auto gb = ctx.grad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return finish<T>("mul", a.shape(), std::move(out), {&a, &b}, [&] {
    return [a = a.detach(), b = b.detach()](std::span<const T> g, BackwardContext<T>& ctx) {
      if (ctx.needs(0)) {
        auto ga = ctx.grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (ctx.needs(1)) {
        auto gb = ctx.grad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    };
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "div");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return finish<T>("div", a.shape(), std::move(out), {&a, &b}, [&] {
    return [a = a.detach(), b = b.detach()](std::span<const T> g, BackwardContext<T>& ctx) {
      if (ctx.needs(0)) {
        auto ga = ctx.grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b[i];
      }
      if (ctx.needs(1)) {
        auto gb = ctx.grad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * a[i] / (b[i] * b[i]);
      }
    };
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return finish<T>("scale", x.shape(), std::move(out), {&x}, [&] {
    return [factor](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    };
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + value;
  return finish<T>("add_scalar", x.shape(), std::move(out), {&x}, [] {
    return [](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
  });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x[i]);
  return finish<T>("abs", x.shape(), std::move(out), {&x}, [&] {
    return [x = x.detach()](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = x[i] > T(0) ? T(1) : (x[i] < T(0) ? T(-1) : T(0));
        gx[i] += g[i] * s;
      }
    };
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  auto saved = std::make_shared<const std::vector<T>>(out);
  return finish<T>("exp", x.shape(), std::move(out), {&x}, [&] {
    return [saved](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*saved)[i];
    };
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x[i]);
  return finish<T>("log", x.shape(), std::move(out), {&x}, [&] {
    return [x = x.detach()](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x[i];
    };
  });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  std::vector<T> out(x.numel());
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
      break;
    case Activation::gelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(x[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(x[i]);
      break;
  }
  auto y = std::make_shared<const std::vector<T>>(out);
  return finish<T>(activation_name(kind), x.shape(), std::move(out), {&x}, [&] {
    return [x = x.detach(), y, kind](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      const auto& yv = *y;
      switch (kind) {
        case Activation::relu:
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += x[i] > T(0) ? g[i] : T(0);
          break;
        case Activation::gelu:
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_grad(x[i]);
          break;
        case Activation::tanh:
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - yv[i] * yv[i]);
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
          break;
      }
    };
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_ndim(bias, 1, "add_bias");
  if (x.ndim() == 0 || x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias: last dim of " + shape_str(x.shape()) + " != bias " + shape_str(bias.shape()));
  }
  const std::size_t n = bias.dim(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
  return finish<T>("add_bias", x.shape(), std::move(out), {&x, &bias}, [n] {
    return [n](std::span<const T> g, BackwardContext<T>& ctx) {
      if (ctx.needs(0)) {
        auto gx = ctx.grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (ctx.needs(1)) {
        auto gb = ctx.grad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      }
    };
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return finish<T>("sum", Shape{}, std::vector<T>{acc}, {&x}, [] {
    return [](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (auto& v : gx) v += g[0];
    };
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  return finish<T>("mean", Shape{}, std::vector<T>{acc * inv}, {&x}, [inv] {
    return [inv](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (auto& v : gx) v += g[0] * inv;
    };
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_ndim(a, 2, "matmul");
  require_ndim(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  MMap<T>(out.data(), m, n).noalias() = CMap<T>(a.raw(), m, k) * CMap<T>(b.raw(), k, n);
  return finish<T>("matmul", Shape{m, n}, std::move(out), {&a, &b}, [&] {
    return [a = a.detach(), b = b.detach(), m, k, n](std::span<const T> g, BackwardContext<T>& ctx) {
      CMap<T> G(g.data(), m, n);
      if (ctx.needs(0)) {
        MMap<T>(ctx.grad(0).data(), m, k).noalias() += G * CMap<T>(b.raw(), k, n).transpose();
      }
      if (ctx.needs(1)) {
        MMap<T>(ctx.grad(1).data(), k, n).noalias() += CMap<T>(a.raw(), m, k).transpose() * G;
      }
    };
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_ndim(a, 2, "matmul_nt");
  require_ndim(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dims disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  MMap<T>(out.data(), m, n).noalias() = CMap<T>(a.raw(), m, k) * CMap<T>(b.raw(), n, k).transpose();
  return finish<T>("matmul_nt", Shape{m, n}, std::move(out), {&a, &b}, [&] {
    return [a = a.detach(), b = b.detach(), m, k, n](std::span<const T> g, BackwardContext<T>& ctx) {
      CMap<T> G(g.data(), m, n);
      if (ctx.needs(0)) MMap<T>(ctx.grad(0).data(), m, k).noalias() += G * CMap<T>(b.raw(), n, k);
      if (ctx.needs(1)) MMap<T>(ctx.grad(1).data(), n, k).noalias() += G.transpose() * CMap<T>(a.raw(), m, k);
    };
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_ndim(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  MMap<T>(out.data(), c, r) = CMap<T>(x.raw(), r, c).transpose();
  return finish<T>("transpose", Shape{c, r}, std::move(out), {&x}, [r, c] {
    return [r, c](std::span<const T> g, BackwardContext<T>& ctx) {
      MMap<T>(ctx.grad(0).data(), r, c) += CMap<T>(g.data(), c, r).transpose();
    };
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_ndim(x, 2, "linear");
  require_ndim(w, 2, "linear");
  require_ndim(b, 1, "linear");
  const std::size_t m = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in || b.dim(0) != out_dim) {
    throw ShapeError("linear: x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) + ", b " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(m * out_dim);
  MMap<T> Y(out.data(), m, out_dim);
  Y.noalias() = CMap<T>(x.raw(), m, in) * CMap<T>(w.raw(), in, out_dim);
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.raw(), out_dim);
  return finish<T>("linear", Shape{m, out_dim}, std::move(out), {&x, &w, &b}, [&] {
    return [x = x.detach(), w = w.detach(), m, in, out_dim](std::span<const T> g, BackwardContext<T>& ctx) {
      CMap<T> G(g.data(), m, out_dim);
      if (ctx.needs(0)) MMap<T>(ctx.grad(0).data(), m, in).noalias() += G * CMap<T>(w.raw(), in, out_dim).transpose();
      if (ctx.needs(1)) MMap<T>(ctx.grad(1).data(), in, out_dim).noalias() += CMap<T>(x.raw(), m, in).transpose() * G;
      if (ctx.needs(2)) {
        auto gb = ctx.grad(2);
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g[r * out_dim + c];
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Normalisation

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.ndim()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = x[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, x[base + j * s.inner]);
      T denom = T(0);
      for (std::size_t j = 0; j < s.len; ++j) {
        const T e = std::exp(x[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] *= inv;
    }
  }
  auto y = std::make_shared<const std::vector<T>>(out);
  return finish<T>("softmax", x.shape(), std::move(out), {&x}, [&] {
    return [y, s](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      const auto& yv = *y;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          T dot = T(0);
          for (std::size_t j = 0; j < s.len; ++j) dot += g[base + j * s.inner] * yv[base + j * s.inner];
          for (std::size_t j = 0; j < s.len; ++j) {
            const std::size_t idx = base + j * s.inner;
            gx[idx] += yv[idx] * (g[idx] - dot);
          }
        }
      }
    };
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_ndim(gain, 1, "layer_norm");
  require_ndim(bias, 1, "layer_norm");
  if (x.ndim() == 0 || x.shape().back() != gain.dim(0) || bias.dim(0) != gain.dim(0)) {
    throw ShapeError("layer_norm: x " + shape_str(x.shape()) + ", gain " + shape_str(gain.shape()) + ", bias " +
                     shape_str(bias.shape()));
  }
  const std::size_t d = gain.dim(0);
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = x.raw() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    // Constant rows with eps == 0 normalise to zero rather than 0/0.
    const T denom = var + eps;
    const T is = denom > T(0) ? T(1) / std::sqrt(denom) : T(0);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  return finish<T>("layer_norm", x.shape(), std::move(out), {&x, &gain, &bias}, [&] {
    return [gain = gain.detach(), xhat = std::shared_ptr<const std::vector<T>>(xhat),
            inv_std = std::shared_ptr<const std::vector<T>>(inv_std), d, rows](std::span<const T> g,
                                                                              BackwardContext<T>& ctx) {
      const auto& h = *xhat;
      if (ctx.needs(0)) {
        auto gx = ctx.grad(0);
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = T(0), mean_dh_h = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = g[r * d + j] * gain[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[r * d + j];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          const T is = (*inv_std)[r];
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] += is * (dh[j] - mean_dh - h[r * d + j] * mean_dh_h);
          }
        }
      }
      if (ctx.needs(1)) {
        auto gg = ctx.grad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * h[i];
      }
      if (ctx.needs(2)) {
        auto gb = ctx.grad(2);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = cols + ((c * g.kh + ki) * g.kw + kj) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* row = dst + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(row, row + g.wo, T(0));
            continue;
          }
          const T* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = cols + ((c * g.kh + ki) * g.kw + kj) * g.pixels();
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* row = src + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                 Conv2dOptions options) {
  require_ndim(x, 3, "conv2d input");
  require_ndim(w, 4, "conv2d weight");
  if (options.stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), w.dim(3), options.stride, options.padding, 0, 0};
  if (w.dim(1) != g.cin) {
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input channels of " +
                     shape_str(x.shape()));
  }
  if (bias && (bias->ndim() != 1 || bias->dim(0) != g.cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " for " + std::to_string(g.cout) + " outputs");
  }
  const std::size_t ph = g.h + 2 * g.pad, pw = g.w + 2 * g.pad;
  if (ph < g.kh || pw < g.kw) throw ShapeError("conv2d: kernel larger than padded input");
  if ((ph - g.kh) % g.stride != 0 || (pw - g.kw) % g.stride != 0) {
    throw ShapeError("conv2d: output size not integral for input " + shape_str(x.shape()) + ", kernel " +
                     std::to_string(g.kh) + "x" + std::to_string(g.kw) + ", stride " + std::to_string(g.stride) +
                     ", padding " + std::to_string(g.pad));
  }
  g.ho = (ph - g.kh) / g.stride + 1;
  g.wo = (pw - g.kw) / g.stride + 1;

  std::vector<T> out(g.cout * g.pixels());
  MMap<T> Y(out.data(), g.cout, g.pixels());
  CMap<T> Wm(w.raw(), g.cout, g.patch());
  if (g.pointwise()) {
    Y.noalias() = Wm * CMap<T>(x.raw(), g.cin, g.pixels());
  } else {
    std::vector<T> cols(g.patch() * g.pixels());
    im2col(x.raw(), g, cols.data());
    Y.noalias() = Wm * CMap<T>(cols.data(), g.patch(), g.pixels());
  }
  if (bias) {
    for (std::size_t c = 0; c < g.cout; ++c) Y.row(c).array() += (*bias)[c];
  }

  std::vector<const Tensor<T>*> inputs{&x, &w};
  if (bias) inputs.push_back(&*bias);
  const bool has_bias = bias.has_value();
  return finish<T>("conv2d", Shape{g.cout, g.ho, g.wo}, std::move(out), std::move(inputs), [&] {
    return [x = x.detach(), w = w.detach(), g, has_bias](std::span<const T> grad, BackwardContext<T>& ctx) {
      CMap<T> G(grad.data(), g.cout, g.pixels());
      std::vector<T> cols;
      const T* colp = x.raw();
      if (!g.pointwise()) {
        cols.resize(g.patch() * g.pixels());
        im2col(x.raw(), g, cols.data());
        colp = cols.data();
      }
      if (ctx.needs(1)) {
        MMap<T>(ctx.grad(1).data(), g.cout, g.patch()).noalias() +=
            G * CMap<T>(colp, g.patch(), g.pixels()).transpose();
      }
      if (has_bias && ctx.needs(2)) {
        auto gb = ctx.grad(2);
        const std::size_t px = g.pixels();
        for (std::size_t c = 0; c < g.cout; ++c) {
          T acc = T(0);
          for (std::size_t p = 0; p < px; ++p) acc += grad[c * px + p];
          gb[c] += acc;
        }
      }
      if (ctx.needs(0)) {
        CMap<T> Wm(w.raw(), g.cout, g.patch());
        if (g.pointwise()) {
          MMap<T>(ctx.grad(0).data(), g.cin, g.pixels()).noalias() += Wm.transpose() * G;
        } else {
          std::vector<T> dcols(g.patch() * g.pixels());
          MMap<T>(dcols.data(), g.patch(), g.pixels()).noalias() = Wm.transpose() * G;
          col2im_add(dcols.data(), g, ctx.grad(0).data());
        }
      }
    };
  });
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  require_ndim(x, 3, "upsample_nearest2x");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t ho = 2 * h, wo = 2 * w;
  std::vector<T> out(c * ho * wo);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < ho; ++y) {
      const T* src = x.raw() + (k * h + y / 2) * w;
      T* dst = out.data() + (k * ho + y) * wo;
      for (std::size_t xx = 0; xx < wo; ++xx) dst[xx] = src[xx / 2];
    }
  }
  return finish<T>("upsample_nearest2x", Shape{c, ho, wo}, std::move(out), {&x}, [=] {
    return [=](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t y = 0; y < ho; ++y) {
          T* dst = gx.data() + (k * h + y / 2) * w;
          const T* src = g.data() + (k * ho + y) * wo;
          for (std::size_t xx = 0; xx < wo; ++xx) dst[xx / 2] += src[xx];
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.ndim() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.dim(d) != ref[d]) {
        throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(ref) + " on axis " +
                         std::to_string(axis));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit s = split_axis(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(p.raw() + o * block, block, out.data() + o * s.len * s.inner + offset * s.inner);
    }
    offset += p.dim(axis);
  }
  std::vector<const Tensor<T>*> inputs;
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    lengths.push_back(p.dim(axis));
  }
  return finish<T>("concat", out_shape, std::move(out), std::move(inputs), [&] {
    return [s, offsets, lengths](std::span<const T> g, BackwardContext<T>& ctx) {
      for (std::size_t k = 0; k < offsets.size(); ++k) {
        if (!ctx.needs(k)) continue;
        auto gp = ctx.grad(k);
        const std::size_t block = lengths[k] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
          const T* src = g.data() + o * s.len * s.inner + offsets[k] * s.inner;
          T* dst = gp.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
    };
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.ndim()) throw ShapeError("slice: axis out of range for " + shape_str(x.shape()));
  if (length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t block = length * s.inner;
  std::vector<T> out(s.outer * block);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.raw() + o * s.len * s.inner + start * s.inner, block, out.data() + o * block);
  }
  return finish<T>("slice", out_shape, std::move(out), {&x}, [=] {
    return [=](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (std::size_t o = 0; o < s.outer; ++o) {
        T* dst = gx.data() + o * s.len * s.inner + start * s.inner;
        const T* src = g.data() + o * block;
        for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
      }
    };
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return finish<T>("reshape", std::move(shape), x.to_vector(), {&x}, [] {
    return [](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gx = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
  });
}

template <typename T>
Tensor<T> sparse_matmul(const SparseMatrix& m, const Tensor<T>& x) {
  require_ndim(x, 2, "sparse_matmul");
  if (m.cols() != x.dim(0)) {
    throw ShapeError("sparse_matmul: matrix " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                     " times " + shape_str(x.shape()));
  }
  const std::size_t width = x.dim(1);
  std::vector<T> out(m.rows() * width);
  m.multiply(x.raw(), width, out.data());
  // The matrix is model data that outlives any tape.
  const SparseMatrix* mp = &m;
  return finish<T>("sparse_matmul", Shape{m.rows(), width}, std::move(out), {&x}, [=] {
    return [mp, width](std::span<const T> g, BackwardContext<T>& ctx) {
      mp->multiply_transposed_add(g.data(), width, ctx.grad(0).data());
    };
  });
}

template <typename T>
Tensor<T> gather_to_image(const Tensor<T>& desc, std::span<const std::int32_t> index_map, std::size_t height,
                          std::size_t width, T background) {
  require_ndim(desc, 2, "gather_to_image");
  const std::size_t n = desc.dim(0), c = desc.dim(1), pixels = height * width;
  if (index_map.size() != pixels) {
    throw ShapeError("gather_to_image: index map has " + std::to_string(index_map.size()) + " entries for " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<T> out(c * pixels, background);
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::int32_t v = index_map[p];
    if (v < 0) continue;
    if (static_cast<std::size_t>(v) >= n) throw ShapeError("gather_to_image: vertex index out of range");
    const T* row = desc.raw() + static_cast<std::size_t>(v) * c;
    for (std::size_t k = 0; k < c; ++k) out[k * pixels + p] = row[k];
  }
  return finish<T>("gather_to_image", Shape{c, height, width}, std::move(out), {&desc}, [&] {
    auto idx = std::make_shared<const std::vector<std::int32_t>>(index_map.begin(), index_map.end());
    return [idx, c, pixels](std::span<const T> g, BackwardContext<T>& ctx) {
      auto gd = ctx.grad(0);
      for (std::size_t p = 0; p < pixels; ++p) {
        const std::int32_t v = (*idx)[p];
        if (v < 0) continue;
        T* row = gd.data() + static_cast<std::size_t>(v) * c;
        for (std::size_t k = 0; k < c; ++k) row[k] += g[k * pixels + p];
      }
    };
  });
}

#define CVTHEAD_INSTANTIATE_OPS(T)                                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                           \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                      \
  template Tensor<T> abs(const Tensor<T>&);                                                                \
  template Tensor<T> exp(const Tensor<T>&);                                                                \
  template Tensor<T> log(const Tensor<T>&);                                                                \
  template Tensor<T> activation(const Tensor<T>&, Activation);                                             \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> mean(const Tensor<T>&);                                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> transpose(const Tensor<T>&);                                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                               \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const std::optional<Tensor<T>>&,           \
                            Conv2dOptions);                                                                \
  template Tensor<T> upsample_nearest2x(const Tensor<T>&);                                                 \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                   \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                     \
  template Tensor<T> sparse_matmul(const SparseMatrix&, const Tensor<T>&);                                 \
  template Tensor<T> gather_to_image(const Tensor<T>&, std::span<const std::int32_t>, std::size_t,         \
                                     std::size_t, T);

CVTHEAD_INSTANTIATE_OPS(float)
CVTHEAD_INSTANTIATE_OPS(double)

}  // namespace cvthead::numerics
