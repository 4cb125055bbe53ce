#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cvthead/numerics/params.hpp"
#include "cvthead/numerics/tensor.hpp"
#include "cvthead/rasterizer/rasterizer.hpp"

namespace cvthead::renderer {

using numerics::ParamStore;
using numerics::Tensor;

struct RendererConfig {
  std::size_t depth_levels = 3;
  std::size_t base_channels = 16;
  std::size_t max_channels = 128;
  std::size_t in_channels = 33;  // C + 1 (depth)

  std::size_t channels_at(std::size_t level) const;
  void validate() const;
};

template <typename T>
ParamStore<T> init_weights(const RendererConfig& cfg, std::uint64_t seed);

template <typename T>
struct RenderOutput {
  Tensor<T> rgb;   // 3 x H x W in [-1,1]
  Tensor<T> mask;  // 1 x H x W in [0,1]
};

// features: C x H x W, depth: 1 x H x W.
template <typename T>
RenderOutput<T> render(const Tensor<T>& features, const Tensor<T>& depth, const ParamStore<T>& w,
                       const RendererConfig& cfg);

struct FrameResult {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;   // H x W x 3
  std::vector<float> mask;  // H x W
  std::map<std::string, double> timing_ms;
};

FrameResult to_frame(const RenderOutput<float>& out);

FrameResult render(const rasterizer::SplatImage& splat, const ParamStore<float>& w, const RendererConfig& cfg);

// Composited 8-bit RGB: (rgb+1)/2*255, optionally with alpha = mask.
std::vector<std::uint8_t> to_rgb8(const FrameResult& f);
std::vector<std::uint8_t> to_rgba8(const FrameResult& f);

}  // namespace cvthead::renderer
