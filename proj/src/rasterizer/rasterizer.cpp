#include "cvthead/rasterizer/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cvthead/errors.hpp"

namespace cvthead::rasterizer {

std::size_t IndexMap::occupied_count() const {
  return static_cast<std::size_t>(std::count_if(index.begin(), index.end(), [](std::int32_t i) { return i >= 0; }));
}

IndexMap rasterize(const Vertices& vertices, const camera::CameraParams& cam, int width, int height,
                   std::span<const std::uint32_t> order) {
  if (width < 1 || height < 1) throw ShapeError("rasterize: image dims must be >= 1");
  const auto n = static_cast<std::size_t>(vertices.rows());
  if (!order.empty() && order.size() != n) throw ShapeError("rasterize: order must list every vertex once");

  const std::size_t pixels = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  IndexMap out;
  out.width = width;
  out.height = height;
  out.index.assign(pixels, -1);
  std::vector<float> zbuf(pixels, -std::numeric_limits<float>::infinity());

  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order.empty() ? k : order[k];
    const float* row = vertices.data() + 3 * i;
    const auto p = camera::project(row[0], row[1], row[2], cam);
    if (!std::isfinite(p.d)) continue;
    const auto px = camera::to_pixel(p.u, p.v, width, height);
    if (!px) continue;
    const std::size_t at = static_cast<std::size_t>(px->y) * width + px->x;
    const std::int32_t cur = out.index[at];
    const auto idx = static_cast<std::int32_t>(i);
    if (cur < 0 || p.d > zbuf[at] || (p.d == zbuf[at] && idx < cur)) {
      out.index[at] = idx;
      zbuf[at] = p.d;
    }
  }

  float dmin = std::numeric_limits<float>::infinity(), dmax = -dmin;
  for (std::size_t at = 0; at < pixels; ++at) {
    if (out.index[at] < 0) continue;
    dmin = std::min(dmin, zbuf[at]);
    dmax = std::max(dmax, zbuf[at]);
  }
  out.depth.assign(pixels, 0.0f);
  const float range = dmax - dmin;
  for (std::size_t at = 0; at < pixels; ++at) {
    if (out.index[at] < 0) continue;
    out.depth[at] = range > 0.0f ? (zbuf[at] - dmin) / range : zbuf[at];
  }
  return out;
}

SplatImage splat(const Vertices& vertices, std::span<const float> descriptors, std::size_t channels,
                 const camera::CameraParams& cam, int width, int height, float background) {
  const auto n = static_cast<std::size_t>(vertices.rows());
  if (channels == 0 || descriptors.size() != n * channels) {
    throw ShapeError("splat: " + std::to_string(n) + " vertices but " + std::to_string(descriptors.size()) +
                     " descriptor values for C=" + std::to_string(channels));
  }
  IndexMap map = rasterize(vertices, cam, width, height);
  SplatImage s;
  s.width = width;
  s.height = height;
  s.channels = static_cast<int>(channels);
  s.features.assign(map.index.size() * channels, background);
  for (std::size_t at = 0; at < map.index.size(); ++at) {
    const std::int32_t v = map.index[at];
    if (v < 0) continue;
    std::copy_n(descriptors.data() + static_cast<std::size_t>(v) * channels, channels,
                s.features.data() + at * channels);
  }
  s.depth = std::move(map.depth);
  s.index = std::move(map.index);
  return s;
}

std::vector<std::uint8_t> splat_view(const SplatImage& s) {
  const std::size_t pixels = static_cast<std::size_t>(s.width) * s.height;
  const int shown = std::min(3, s.channels);
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (std::size_t at = 0; at < pixels; ++at) {
    for (int c = 0; c < shown; ++c) {
      lo = std::min(lo, s.features[at * s.channels + c]);
      hi = std::max(hi, s.features[at * s.channels + c]);
    }
  }
  const float range = hi > lo ? hi - lo : 1.0f;
  std::vector<std::uint8_t> rgb(pixels * 3, 0);
  for (std::size_t at = 0; at < pixels; ++at) {
    for (int c = 0; c < shown; ++c) {
      const float t = (s.features[at * s.channels + c] - lo) / range;
      rgb[at * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0f, 1.0f) * 255.0f));
    }
  }
  return rgb;
}

std::vector<std::uint8_t> depth_view(const SplatImage& s) {
  std::vector<std::uint8_t> gray(s.depth.size());
  for (std::size_t at = 0; at < gray.size(); ++at) {
    gray[at] = static_cast<std::uint8_t>(std::lround(std::clamp(s.depth[at], 0.0f, 1.0f) * 255.0f));
  }
  return gray;
}

}  // namespace cvthead::rasterizer
