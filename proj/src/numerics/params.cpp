#include "cvthead/numerics/params.hpp"

#include "cvthead/errors.hpp"

namespace cvthead::numerics {

template <typename T>
std::size_t ParamStore<T>::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first == name) return i;
  }
  return entries_.size();
}

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (find(name) != entries_.size()) throw ConfigError("duplicate parameter '" + name + "'");
  entries_.emplace_back(name, std::move(value));
}

template <typename T>
bool ParamStore<T>::has(const std::string& name) const {
  return find(name) != entries_.size();
}

template <typename T>
const Tensor<T>& ParamStore<T>::operator[](const std::string& name) const {
  const auto i = find(name);
  if (i == entries_.size()) throw ConfigError("missing parameter '" + name + "'");
  return entries_[i].second;
}

template <typename T>
void ParamStore<T>::set(const std::string& name, Tensor<T> value) {
  const auto i = find(name);
  if (i == entries_.size()) throw ConfigError("missing parameter '" + name + "'");
  require_shape(value, entries_[i].second.shape(), name.c_str());
  entries_[i].second = std::move(value);
}

template <typename T>
std::size_t ParamStore<T>::numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <typename T>
ParamStore<T> ParamStore<T>::watched(GradTape<T>& tape) const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.entries_.emplace_back(name, tape.watch(t));
  return out;
}

template <typename T>
ParamStore<T> ParamStore<T>::detached() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.entries_.emplace_back(name, t.detach());
  return out;
}

template <typename T>
void ParamStore<T>::write_to(Container& c) const {
  for (const auto& [name, t] : entries_) c.put(name, t.template cast<float>());
}

template <typename T>
ParamStore<T> ParamStore<T>::read_from(const Container& c, const ParamStore& layout) {
  ParamStore out;
  for (const auto& [name, like] : layout.entries_) {
    if (!c.has(name)) throw FormatError("missing entry '" + name + "'");
    const auto t = c.tensor(name);
    if (t.shape() != like.shape()) {
      throw FormatError("entry '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(like.shape()));
    }
    out.entries_.emplace_back(name, t.template cast<T>());
  }
  return out;
}

template <typename T>
bool ParamStore<T>::same_values(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (!entries_[i].second.same_values(other.entries_[i].second)) return false;
  }
  return true;
}

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace cvthead::numerics
