#pragma once

#include <optional>

namespace cvthead::camera {

// Weak-perspective camera: uniform scale plus 2D translation in NDC.
struct CameraParams {
  float scale = 1.0f;
  float tx = 0.0f;
  float ty = 0.0f;

  // Throws InvariantError unless scale > 0 and all fields are finite.
  void validate() const;
  bool operator==(const CameraParams&) const = default;
};

// Image-space coordinates: u right, v down (both NDC), d = z with larger
// values closer to the camera.
struct Projection {
  float u;
  float v;
  float d;
};

struct Pixel {
  int x;
  int y;
  bool operator==(const Pixel&) const = default;
};

inline Projection project(float x, float y, float z, const CameraParams& c) {
  return {c.scale * x + c.tx, -(c.scale * y) + c.ty, z};
}

// Floor addressing of NDC into a width x height grid; nullopt when culled.
std::optional<Pixel> to_pixel(float u, float v, int width, int height);

}  // namespace cvthead::camera
