#include "cvthead/renderer/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cvthead/errors.hpp"
#include "cvthead/numerics/ops.hpp"
#include "cvthead/numerics/random.hpp"

namespace cvthead::renderer {

namespace ops = numerics;
using numerics::Activation;
using numerics::Conv2dOptions;
using numerics::shape_str;

namespace {

template <typename T>
void add_conv(ParamStore<T>& w, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
              numerics::Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  std::vector<T> v(out * in * k * k);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  w.add(name + ".w", Tensor<T>({out, in, k, k}, std::move(v)));
  w.add(name + ".b", Tensor<T>::zeros({out}));
}

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ParamStore<T>& w, const std::string& name, Conv2dOptions opt) {
  return ops::conv2d(x, w[name + ".w"], std::optional<Tensor<T>>(w[name + ".b"]), opt);
}

template <typename T>
Tensor<T> conv_relu(const Tensor<T>& x, const ParamStore<T>& w, const std::string& name, Conv2dOptions opt) {
  return ops::activation(conv(x, w, name, opt), Activation::relu);
}

std::string key(const char* stage, std::size_t level) { return "unet." + std::string(stage) + std::to_string(level); }

}  // namespace

std::size_t RendererConfig::channels_at(std::size_t level) const {
  return std::min(max_channels, base_channels << level);
}

void RendererConfig::validate() const {
  if (depth_levels == 0 || depth_levels > 8) throw ConfigError("renderer depth_levels must be in [1,8]");
  if (base_channels == 0 || in_channels == 0 || max_channels < base_channels) {
    throw ConfigError("renderer channel counts must be positive");
  }
}

template <typename T>
ParamStore<T> init_weights(const RendererConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  numerics::Rng rng(seed);
  ParamStore<T> w;
  add_conv(w, key("enc", 0), cfg.in_channels, cfg.channels_at(0), 3, rng);
  for (std::size_t l = 1; l <= cfg.depth_levels; ++l) {
    add_conv(w, key("down", l), cfg.channels_at(l - 1), cfg.channels_at(l), 4, rng);
    add_conv(w, key("enc", l), cfg.channels_at(l), cfg.channels_at(l), 3, rng);
  }
  for (std::size_t l = cfg.depth_levels; l-- > 0;) {
    add_conv(w, key("up", l), cfg.channels_at(l + 1), cfg.channels_at(l), 3, rng);
    add_conv(w, key("dec", l), 2 * cfg.channels_at(l), cfg.channels_at(l), 3, rng);
  }
  add_conv(w, "unet.out", cfg.channels_at(0), 4, 1, rng);
  return w;
}

template <typename T>
RenderOutput<T> render(const Tensor<T>& features, const Tensor<T>& depth, const ParamStore<T>& w,
                       const RendererConfig& cfg) {
  if (features.ndim() != 3 || depth.ndim() != 3 || depth.dim(0) != 1 || features.dim(1) != depth.dim(1) ||
      features.dim(2) != depth.dim(2)) {
    throw ShapeError("render: features " + shape_str(features.shape()) + " and depth " + shape_str(depth.shape()) +
                     " do not form a C x H x W + 1 x H x W pair");
  }
  if (features.dim(0) + 1 != cfg.in_channels) {
    throw ShapeError("render: expected " + std::to_string(cfg.in_channels - 1) + " feature channels, got " +
                     std::to_string(features.dim(0)));
  }
  const std::size_t f = std::size_t{1} << cfg.depth_levels;
  if (features.dim(1) % f != 0 || features.dim(2) % f != 0) {
    throw ShapeError("render: " + std::to_string(features.dim(1)) + "x" + std::to_string(features.dim(2)) +
                     " is not divisible by " + std::to_string(f));
  }
  const Conv2dOptions same{1, 1}, down{2, 1};
  std::vector<Tensor<T>> skips;
  Tensor<T> x = conv_relu(ops::concat<T>({features, depth}, 0), w, key("enc", 0), same);
  skips.push_back(x);
  for (std::size_t l = 1; l <= cfg.depth_levels; ++l) {
    x = conv_relu(x, w, key("down", l), down);
    x = conv_relu(x, w, key("enc", l), same);
    skips.push_back(x);
  }
  for (std::size_t l = cfg.depth_levels; l-- > 0;) {
    x = conv_relu(ops::upsample_nearest2x(x), w, key("up", l), same);
    x = conv_relu(ops::concat<T>({x, skips[l]}, 0), w, key("dec", l), same);
  }
  const auto out = conv(x, w, "unet.out", {1, 0});
  RenderOutput<T> r;
  r.rgb = ops::activation(ops::slice(out, 0, 0, 3), Activation::tanh);
  r.mask = ops::activation(ops::slice(out, 0, 3, 1), Activation::sigmoid);
  return r;
}

FrameResult to_frame(const RenderOutput<float>& out) {
  FrameResult f;
  f.height = static_cast<int>(out.rgb.dim(1));
  f.width = static_cast<int>(out.rgb.dim(2));
  const std::size_t pixels = static_cast<std::size_t>(f.width) * f.height;
  f.rgb.resize(pixels * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < pixels; ++p) f.rgb[p * 3 + c] = out.rgb[c * pixels + p];
  }
  f.mask.assign(out.mask.data().begin(), out.mask.data().end());
  return f;
}

FrameResult render(const rasterizer::SplatImage& splat, const ParamStore<float>& w, const RendererConfig& cfg) {
  const std::size_t h = splat.height, wd = splat.width, c = splat.channels, pixels = h * wd;
  std::vector<float> chw(c * pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t k = 0; k < c; ++k) chw[k * pixels + p] = splat.features[p * c + k];
  }
  const Tensor<float> features({c, h, wd}, std::move(chw));
  const Tensor<float> depth({1, h, wd}, splat.depth);
  return to_frame(render(features, depth, w, cfg));
}

namespace {
std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }
}  // namespace

std::vector<std::uint8_t> to_rgb8(const FrameResult& f) {
  std::vector<std::uint8_t> out(f.rgb.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = to_byte((f.rgb[i] + 1.0f) * 0.5f);
  return out;
}

std::vector<std::uint8_t> to_rgba8(const FrameResult& f) {
  const std::size_t pixels = f.mask.size();
  std::vector<std::uint8_t> out(pixels * 4);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t c = 0; c < 3; ++c) out[p * 4 + c] = to_byte((f.rgb[p * 3 + c] + 1.0f) * 0.5f);
    out[p * 4 + 3] = to_byte(f.mask[p]);
  }
  return out;
}

template ParamStore<float> init_weights<float>(const RendererConfig&, std::uint64_t);
template ParamStore<double> init_weights<double>(const RendererConfig&, std::uint64_t);
template RenderOutput<float> render<float>(const Tensor<float>&, const Tensor<float>&, const ParamStore<float>&,
                                           const RendererConfig&);
template RenderOutput<double> render<double>(const Tensor<double>&, const Tensor<double>&, const ParamStore<double>&,
                                             const RendererConfig&);

}  // namespace cvthead::renderer
