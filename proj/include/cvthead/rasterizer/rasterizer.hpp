#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cvthead/camera/camera.hpp"
#include "cvthead/head_model/head_model.hpp"

namespace cvthead::rasterizer {

using head_model::Vertices;

// Winning vertex per pixel (-1 = background) and the per-frame normalized
// depth plane. Enough to build feature planes through gather_to_image.
struct IndexMap {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> index;  // H*W, row-major
  std::vector<float> depth;         // H*W in [0,1], 0 on background

  bool occupied(int x, int y) const { return index[static_cast<std::size_t>(y) * width + x] >= 0; }
  std::size_t occupied_count() const;
};

struct SplatImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> features;  // H x W x C
  std::vector<float> depth;     // H x W
  std::vector<std::int32_t> index;

  float feature(int x, int y, int c) const {
    return features[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float depth_at(int x, int y) const { return depth[static_cast<std::size_t>(y) * width + x]; }
  bool occupied(int x, int y) const { return index[static_cast<std::size_t>(y) * width + x] >= 0; }
};

// Nearest-vertex z-buffer: larger d wins, equal d goes to the smaller index.
// `order` only changes the visiting sequence; the result never depends on it.
IndexMap rasterize(const Vertices& vertices, const camera::CameraParams& cam, int width, int height,
                   std::span<const std::uint32_t> order = {});

// descriptors is N x C row-major.
SplatImage splat(const Vertices& vertices, std::span<const float> descriptors, std::size_t channels,
                 const camera::CameraParams& cam, int width, int height, float background = 0.0f);

// Debug views, 8 bits per sample, row-major. Channels 0..2 are mapped from
// their joint [min,max] to [0,255]; missing channels stay black.
std::vector<std::uint8_t> splat_view(const SplatImage& s);
std::vector<std::uint8_t> depth_view(const SplatImage& s);

}  // namespace cvthead::rasterizer
