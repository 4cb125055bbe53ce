#include "cvthead/vertex_transformer/vertex_transformer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/ops.hpp"
#include "cvthead/numerics/random.hpp"

namespace cvthead::vertex_transformer {

namespace ops = numerics;
using numerics::Shape;
using numerics::shape_str;

namespace {

std::string layer_key(std::size_t layer, const char* part) {
  return "enc.layer" + std::to_string(layer) + "." + part;
}

template <typename T>
Tensor<T> uniform_tensor(const Shape& shape, double bound, numerics::Rng& rng) {
  std::vector<T> v(numerics::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(shape, std::move(v));
}

template <typename T>
Tensor<T> identity(std::size_t n) {
  std::vector<T> v(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = T(1);
  return Tensor<T>({n, n}, std::move(v));
}

template <typename T>
void add_linear(ParamStore<T>& w, const std::string& name, std::size_t in, std::size_t out, numerics::Rng& rng) {
  w.add(name + ".w", uniform_tensor<T>({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)), rng));
  w.add(name + ".b", Tensor<T>::zeros({out}));
}

}  // namespace

TransformerConfig TransformerConfig::full() { return TransformerConfig{}; }

TransformerConfig TransformerConfig::toy() {
  TransformerConfig c;
  c.width = 64;
  c.layers = 2;
  c.heads = 4;
  c.cnn_channels = {16, 32, 48};
  return c;
}

void TransformerConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0) throw ConfigError("width must be a positive multiple of heads");
  if (width % 4 != 0) throw ConfigError("width must be divisible by 4 for 2D positional encodings");
  if (layers == 0 || out_channels == 0 || n_coarse == 0 || mlp_ratio == 0) {
    throw ConfigError("transformer dims must be positive");
  }
  for (auto c : cnn_channels) {
    if (c == 0) throw ConfigError("cnn channels must be positive");
  }
}

template <typename T>
ParamStore<T> init_weights(const TransformerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  numerics::Rng rng(seed);
  ParamStore<T> w;
  {
    std::vector<T> tok(cfg.n_coarse * cfg.width);
    for (auto& x : tok) x = static_cast<T>(0.02 * rng.normal());
    w.add("vertex_tokens", Tensor<T>({cfg.n_coarse, cfg.width}, std::move(tok)));
  }
  std::size_t in = 3;
  for (std::size_t i = 0; i <= cfg.cnn_channels.size(); ++i) {
    const std::size_t out = i < cfg.cnn_channels.size() ? cfg.cnn_channels[i] : cfg.width;
    const std::string key = "cnn.conv" + std::to_string(i);
    w.add(key + ".w", uniform_tensor<T>({out, in, 4, 4}, std::sqrt(6.0 / static_cast<double>(in * 16)), rng));
    w.add(key + ".b", Tensor<T>::zeros({out}));
    in = out;
  }
  const std::size_t c = cfg.width, hidden = cfg.width * cfg.mlp_ratio;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    w.add(layer_key(l, "ln1.w"), Tensor<T>::full({c}, T(1)));
    w.add(layer_key(l, "ln1.b"), Tensor<T>::zeros({c}));
    for (const char* p : {"q", "k", "v", "o"}) add_linear(w, layer_key(l, p), c, c, rng);
    w.add(layer_key(l, "ln2.w"), Tensor<T>::full({c}, T(1)));
    w.add(layer_key(l, "ln2.b"), Tensor<T>::zeros({c}));
    add_linear(w, layer_key(l, "mlp1"), c, hidden, rng);
    add_linear(w, layer_key(l, "mlp2"), hidden, c, rng);
  }
  add_linear(w, "head", c, cfg.out_channels, rng);
  for (std::size_t s = 0; s < cfg.upsample_stages; ++s) {
    w.add("mix" + std::to_string(s) + ".w", identity<T>(cfg.out_channels));
    w.add("mix" + std::to_string(s) + ".b", Tensor<T>::zeros({cfg.out_channels}));
  }
  return w;
}

template <typename T>
Tensor<T> sine_encoding_1d(std::span<const double> positions, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("sine encoding dim must be even, got " + std::to_string(dim));
  std::vector<T> out(positions.size() * dim);
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * i) / static_cast<double>(dim));
    for (std::size_t n = 0; n < positions.size(); ++n) {
      out[n * dim + 2 * i] = static_cast<T>(std::sin(positions[n] * freq));
      out[n * dim + 2 * i + 1] = static_cast<T>(std::cos(positions[n] * freq));
    }
  }
  return Tensor<T>({positions.size(), dim}, std::move(out));
}

template <typename T>
Tensor<T> sine_encoding_2d(std::span<const double> u, std::span<const double> v, std::size_t dim) {
  if (dim == 0 || dim % 4 != 0) throw ConfigError("2D sine encoding dim must be divisible by 4");
  if (u.size() != v.size()) throw ShapeError("sine_encoding_2d: u and v differ in length");
  const auto eu = sine_encoding_1d<T>(u, dim / 2), ev = sine_encoding_1d<T>(v, dim / 2);
  const std::size_t half = dim / 2;
  std::vector<T> out(u.size() * dim);
  for (std::size_t n = 0; n < u.size(); ++n) {
    std::copy_n(eu.raw() + n * half, half, out.data() + n * dim);
    std::copy_n(ev.raw() + n * half, half, out.data() + n * dim + half);
  }
  return Tensor<T>({u.size(), dim}, std::move(out));
}

template <typename T>
ImageTokens<T> encode_image(const Tensor<T>& image, const ParamStore<T>& w, const TransformerConfig& cfg) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("encode_image: expected 3 x H x W, got " + shape_str(image.shape()));
  const std::size_t f = cfg.downsample();
  if (image.dim(1) % f != 0 || image.dim(2) % f != 0) {
    throw ShapeError("encode_image: " + std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) +
                     " is not divisible by " + std::to_string(f));
  }
  Tensor<T> x = image;
  const std::size_t stages = cfg.cnn_channels.size() + 1;
  for (std::size_t i = 0; i < stages; ++i) {
    const std::string key = "cnn.conv" + std::to_string(i);
    x = ops::conv2d(x, w[key + ".w"], std::optional<Tensor<T>>(w[key + ".b"]), {2, 1});
    if (i + 1 < stages) x = ops::activation(x, numerics::Activation::relu);
  }
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  ImageTokens<T> out;
  out.tokens = ops::transpose(ops::reshape(x, {c, h * wd}));
  out.grid_h = h;
  out.grid_w = wd;
  return out;
}

template <typename T>
TokenSequence<T> build_tokens(const ParamStore<T>& w, const TransformerConfig& cfg,
                              const head_model::Vertices& coarse_vertices, const camera::CameraParams& cam,
                              const ImageTokens<T>& image) {
  const auto& xv = w["vertex_tokens"];
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  if (static_cast<std::size_t>(coarse_vertices.rows()) != n) {
    throw ShapeError("build_tokens: " + std::to_string(coarse_vertices.rows()) + " coarse vertices for " +
                     std::to_string(n) + " vertex tokens");
  }
  const std::size_t hw = image.grid_h * image.grid_w;
  if (image.tokens.ndim() != 2 || image.tokens.dim(0) != hw || image.tokens.dim(1) != c) {
    throw ShapeError("build_tokens: image tokens have shape " + shape_str(image.tokens.shape()));
  }
  Tensor<T> vtok = xv, itok = image.tokens;
  if (cfg.positional_encoding) {
    std::vector<double> u(n), v(n), d(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = coarse_vertices.row(static_cast<Eigen::Index>(i));
      const auto p = camera::project(row(0), row(1), row(2), cam);
      u[i] = p.u * cfg.uv_scale;
      v[i] = p.v * cfg.uv_scale;
      d[i] = p.d * cfg.depth_scale;
    }
    vtok = ops::add(ops::add(vtok, sine_encoding_2d<T>(u, v, c)), sine_encoding_1d<T>(d, c));

    std::vector<double> gu(hw), gv(hw);
    for (std::size_t y = 0; y < image.grid_h; ++y) {
      for (std::size_t x = 0; x < image.grid_w; ++x) {
        gu[y * image.grid_w + x] = (-1.0 + (2.0 * x + 1.0) / static_cast<double>(image.grid_w)) * cfg.uv_scale;
        gv[y * image.grid_w + x] = (-1.0 + (2.0 * y + 1.0) / static_cast<double>(image.grid_h)) * cfg.uv_scale;
      }
    }
    itok = ops::add(itok, sine_encoding_2d<T>(gu, gv, c));
  }
  return {ops::concat<T>({vtok, itok}, 0), n, hw};
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
  const std::size_t c = q.dim(1);
  if (heads == 0 || c % heads != 0) throw ShapeError("attention width not divisible by head count");
  const std::size_t d = c / heads;
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = ops::slice(q, 1, h * d, d), kh = ops::slice(k, 1, h * d, d), vh = ops::slice(v, 1, h * d, d);
    const auto p = ops::softmax(ops::scale(ops::matmul_nt(qh, kh), inv), 1);
    outs.push_back(ops::matmul(p, vh));
  }
  return heads == 1 ? outs.front() : ops::concat(outs, 1);
}

template <typename T>
Tensor<T> encoder_block(const Tensor<T>& x, const ParamStore<T>& w, const TransformerConfig& cfg, std::size_t l) {
  const T eps = static_cast<T>(1e-5);
  auto lin = [&](const Tensor<T>& in, const char* name) {
    return ops::linear(in, w[layer_key(l, name) + std::string(".w")], w[layer_key(l, name) + std::string(".b")]);
  };
  const auto h = ops::layer_norm(x, w[layer_key(l, "ln1.w")], w[layer_key(l, "ln1.b")], eps);
  const auto attn = multi_head_attention(lin(h, "q"), lin(h, "k"), lin(h, "v"), cfg.heads);
  const auto x1 = ops::add(x, lin(attn, "o"));
  const auto h2 = ops::layer_norm(x1, w[layer_key(l, "ln2.w")], w[layer_key(l, "ln2.b")], eps);
  const auto m = lin(ops::activation(lin(h2, "mlp1"), numerics::Activation::gelu), "mlp2");
  return ops::add(x1, m);
}

template <typename T>
Tensor<T> transformer_forward(const TokenSequence<T>& seq, const ParamStore<T>& w, const TransformerConfig& cfg) {
  if (seq.tokens.ndim() != 2 || seq.tokens.dim(1) != cfg.width) {
    throw ShapeError("transformer_forward: tokens have shape " + shape_str(seq.tokens.shape()));
  }
  Tensor<T> x = seq.tokens;
  for (std::size_t l = 0; l < cfg.layers; ++l) x = encoder_block(x, w, cfg, l);
  return ops::slice(x, 0, 0, seq.vertex_count);
}

template <typename T>
Tensor<T> project_descriptors(const Tensor<T>& states, const ParamStore<T>& w) {
  return ops::linear(states, w["head.w"], w["head.b"]);
}

template <typename T>
Tensor<T> upsample_descriptors(const Tensor<T>& coarse, const head_model::HeadModel& model, const ParamStore<T>& w) {
  const auto& chain = model.upsample_chain;
  if (coarse.ndim() != 2 || coarse.dim(0) != model.n_coarse()) {
    throw ShapeError("upsample_descriptors: expected " + std::to_string(model.n_coarse()) + " coarse rows, got " +
                     shape_str(coarse.shape()));
  }
  if (w.has("mix" + std::to_string(chain.size()) + ".w") || !w.has("mix" + std::to_string(chain.size() - 1) + ".w")) {
    throw ShapeError("upsample_descriptors: mixer count does not match the " + std::to_string(chain.size()) +
                     "-stage upsample chain");
  }
  Tensor<T> x = coarse;
  for (std::size_t s = 0; s < chain.size(); ++s) {
    x = ops::sparse_matmul(chain[s], x);
    x = ops::linear(x, w["mix" + std::to_string(s) + ".w"], w["mix" + std::to_string(s) + ".b"]);
  }
  return x;
}

head_model::Vertices coarse_rows(const head_model::HeadModel& model, const head_model::Vertices& full) {
  if (static_cast<std::size_t>(full.rows()) != model.n_vertices()) {
    throw ShapeError("coarse_rows: expected " + std::to_string(model.n_vertices()) + " vertices");
  }
  head_model::Vertices out(static_cast<Eigen::Index>(model.n_coarse()), 3);
  for (std::size_t i = 0; i < model.n_coarse(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = full.row(model.coarse_index[i]);
  }
  return out;
}

template <typename T>
Tensor<T> vertex_descriptors(const Tensor<T>& source_image, const head_model::Vertices& source_vertices,
                             const camera::CameraParams& cam, const head_model::HeadModel& model,
                             const ParamStore<T>& w, const TransformerConfig& cfg) {
  const auto image = encode_image(source_image, w, cfg);
  const auto seq = build_tokens(w, cfg, coarse_rows(model, source_vertices), cam, image);
  const auto states = transformer_forward(seq, w, cfg);
  return upsample_descriptors(project_descriptors(states, w), model, w);
}

Tensor<float> pixel_aligned_features(const Tensor<float>& features, const head_model::Vertices& vertices,
                                     const camera::CameraParams& cam) {
  if (features.ndim() != 3) throw ShapeError("pixel_aligned_features: expected C x H x W");
  const std::size_t c = features.dim(0), h = features.dim(1), wd = features.dim(2);
  const auto n = static_cast<std::size_t>(vertices.rows());
  std::vector<float> out(n * c);
  const float* f = features.raw();
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = vertices.row(static_cast<Eigen::Index>(i));
    const auto p = camera::project(row(0), row(1), row(2), cam);
    const double x = std::clamp((p.u + 1.0) * 0.5 * static_cast<double>(wd) - 0.5, 0.0, static_cast<double>(wd - 1));
    const double y = std::clamp((p.v + 1.0) * 0.5 * static_cast<double>(h) - 0.5, 0.0, static_cast<double>(h - 1));
    const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t x1 = std::min(x0 + 1, wd - 1), y1 = std::min(y0 + 1, h - 1);
    const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
    for (std::size_t k = 0; k < c; ++k) {
      const float* plane = f + k * h * wd;
      const double top = (1 - fx) * plane[y0 * wd + x0] + fx * plane[y0 * wd + x1];
      const double bottom = (1 - fx) * plane[y1 * wd + x0] + fx * plane[y1 * wd + x1];
      out[i * c + k] = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return Tensor<float>({n, c}, std::move(out));
}

#define CVTHEAD_INSTANTIATE_VT(T)                                                                            \
  template ParamStore<T> init_weights<T>(const TransformerConfig&, std::uint64_t);                          \
  template Tensor<T> sine_encoding_1d<T>(std::span<const double>, std::size_t);                             \
  template Tensor<T> sine_encoding_2d<T>(std::span<const double>, std::span<const double>, std::size_t);    \
  template ImageTokens<T> encode_image<T>(const Tensor<T>&, const ParamStore<T>&, const TransformerConfig&); \
  template TokenSequence<T> build_tokens<T>(const ParamStore<T>&, const TransformerConfig&,                 \
                                            const head_model::Vertices&, const camera::CameraParams&,        \
                                            const ImageTokens<T>&);                                          \
  template Tensor<T> transformer_forward<T>(const TokenSequence<T>&, const ParamStore<T>&,                  \
                                            const TransformerConfig&);                                       \
  template Tensor<T> encoder_block<T>(const Tensor<T>&, const ParamStore<T>&, const TransformerConfig&,     \
                                      std::size_t);                                                          \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                             std::size_t);                                                   \
  template Tensor<T> project_descriptors<T>(const Tensor<T>&, const ParamStore<T>&);                        \
  template Tensor<T> upsample_descriptors<T>(const Tensor<T>&, const head_model::HeadModel&,                \
                                             const ParamStore<T>&);                                          \
  template Tensor<T> vertex_descriptors<T>(const Tensor<T>&, const head_model::Vertices&,                   \
                                           const camera::CameraParams&, const head_model::HeadModel&,       \
                                           const ParamStore<T>&, const TransformerConfig&);

CVTHEAD_INSTANTIATE_VT(float)
CVTHEAD_INSTANTIATE_VT(double)

}  // namespace cvthead::vertex_transformer
