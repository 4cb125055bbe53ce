#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cvthead/numerics/container.hpp"
#include "cvthead/numerics/tape.hpp"
#include "cvthead/numerics/tensor.hpp"

namespace cvthead::numerics {

// Ordered named parameter set. Order is insertion order and fixes both the
// serialised layout and the optimiser's update order.
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> value);
  bool has(const std::string& name) const;
  const Tensor<T>& operator[](const std::string& name) const;
  // Replaces a value; the shape must not change.
  void set(const std::string& name, Tensor<T> value);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t numel() const;

  // Copy with every entry registered as a leaf on `tape`.
  ParamStore watched(GradTape<T>& tape) const;
  ParamStore detached() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

  // Appends every entry (as f32) to `c`.
  void write_to(Container& c) const;
  // Reads entries named and shaped like `layout` from `c`.
  static ParamStore read_from(const Container& c, const ParamStore& layout);

  bool same_values(const ParamStore& other) const;

 private:
  std::size_t find(const std::string& name) const;
  std::vector<Entry> entries_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace cvthead::numerics
