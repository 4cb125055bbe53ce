#include "cvthead/camera/camera.hpp"

#include <cmath>

#include "cvthead/errors.hpp"

namespace cvthead::camera {

void CameraParams::validate() const {
  if (!std::isfinite(scale) || !std::isfinite(tx) || !std::isfinite(ty)) {
    throw InvariantError("camera parameters must be finite");
  }
  if (!(scale > 0.0f)) throw InvariantError("camera scale must be > 0");
}

std::optional<Pixel> to_pixel(float u, float v, int width, int height) {
  if (width < 1 || height < 1) throw ShapeError("to_pixel: image dims must be >= 1");
  if (!std::isfinite(u) || !std::isfinite(v)) return std::nullopt;
  const double fx = std::floor((static_cast<double>(u) + 1.0) * 0.5 * width);
  const double fy = std::floor((static_cast<double>(v) + 1.0) * 0.5 * height);
  if (fx < 0.0 || fy < 0.0 || fx >= width || fy >= height) return std::nullopt;
  return Pixel{static_cast<int>(fx), static_cast<int>(fy)};
}

}  // namespace cvthead::camera
