#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "cvthead/numerics/tensor.hpp"

namespace cvthead::numerics {

// Named f32 arrays in the "CVTH" binary layout:
//   "CVTH" | u32 version | u32 count | count x
//   { u16 name_len | name | u8 dtype(0=f32) | u8 ndim | u32 dims[ndim] | f32 payload }
// All integers and floats little-endian. Entry order is preserved.
class Container {
 public:
  static constexpr std::uint32_t kVersion = 1;

  struct Entry {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
  };

  void put(const std::string& name, std::vector<std::uint32_t> dims, std::vector<float> values);
  void put(const std::string& name, const Tensor<float>& tensor);

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const Entry& get(const std::string& name) const;
  Tensor<float> tensor(const std::string& name) const;
  const std::vector<std::string>& names() const noexcept { return order_; }
  std::size_t size() const noexcept { return order_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static Container deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> index_;
};

}  // namespace cvthead::numerics
