#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cvthead::service {

// 8-bit image, row-major, interleaved channels (1 = grey, 3 = RGB, 4 = RGBA).
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image8&) const = default;
};

std::vector<std::uint8_t> encode_png(const Image8& img);
Image8 decode_png(std::span<const std::uint8_t> bytes);

// Writes through a temporary file and renames, so a failed write leaves no
// partial output at `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace cvthead::service
