#include "cvthead/numerics/tape.hpp"

#include <algorithm>

namespace cvthead::numerics {

namespace {
template <typename T>
GradTape<T>*& active_slot() {
  thread_local GradTape<T>* tape = nullptr;
  return tape;
}
}  // namespace

template <typename T>
Tensor<T> Gradients<T>::grad(const Tensor<T>& tracked) const {
  if (auto id = tracked.node_id()) {
    auto it = grads_.find(*id);
    if (it != grads_.end()) return it->second;
  }
  return Tensor<T>::zeros(tracked.shape());
}

template <typename T>
GradTape<T>::~GradTape() {
  if (active_slot<T>() == this) active_slot<T>() = nullptr;
}

template <typename T>
GradTape<T>* GradTape<T>::active() {
  return active_slot<T>();
}

template <typename T>
Tensor<T> GradTape<T>::watch(const Tensor<T>& leaf) {
  Record rec;
  rec.kind = "leaf";
  rec.numel = leaf.numel();
  rec.shape = leaf.shape();
  rec.leaf = true;
  records_.push_back(std::move(rec));
  Tensor<T> out = leaf.detach();
  out.requires_grad_ = true;
  out.node_ = records_.size() - 1;
  return out;
}

template <typename T>
Tensor<T> GradTape<T>::record(std::string_view kind, std::vector<const Tensor<T>*> inputs, Tensor<T> out,
                              BackwardFn fn) {
  Record rec;
  rec.kind = kind;
  rec.numel = out.numel();
  rec.shape = out.shape();
  rec.fn = std::move(fn);
  rec.inputs.reserve(inputs.size());
  for (const Tensor<T>* in : inputs) {
    rec.inputs.push_back(in && in->tracked() ? in->node_ : Tensor<T>::kNoNode);
  }
  records_.push_back(std::move(rec));
  out.node_ = records_.size() - 1;
  out.requires_grad_ = true;
  return out;
}

template <typename T>
Gradients<T> GradTape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.tracked() || loss.node_ >= records_.size()) {
    throw UsageError("backward: loss is not on this tape");
  }
  grads_.assign(records_.size(), {});
  grads_[loss.node_] = std::vector<T>(1, T(1));

  std::unordered_map<NodeId, Tensor<T>> result;
  for (std::size_t idx = loss.node_ + 1; idx-- > 0;) {
    Record& rec = records_[idx];
    if (grads_[idx].empty()) continue;
    if (rec.leaf) {
      result.emplace(idx, Tensor<T>(rec.shape, std::move(grads_[idx])));
      grads_[idx].clear();
      continue;
    }
    if (rec.fn) {
      BackwardContext<T> ctx(*this, rec.inputs);
      rec.fn(std::span<const T>(grads_[idx]), ctx);
    }
    grads_[idx].clear();
    grads_[idx].shrink_to_fit();
  }
  grads_.clear();
  return Gradients<T>(std::move(result));
}

template <typename T>
void GradTape<T>::clear() {
  records_.clear();
  grads_.clear();
}

template <typename T>
bool BackwardContext<T>::needs(std::size_t input) const {
  return input < inputs_.size() && inputs_[input] != Tensor<T>::kNoNode;
}

template <typename T>
std::span<T> BackwardContext<T>::grad(std::size_t input) {
  const NodeId id = inputs_.at(input);
  if (id == Tensor<T>::kNoNode) throw UsageError("gradient requested for untracked input");
  auto& buf = tape_.grads_[id];
  if (buf.empty()) buf.assign(tape_.records_[id].numel, T(0));
  return std::span<T>(buf);
}

template <typename T>
TapeScope<T>::TapeScope(GradTape<T>& tape) : previous_(active_slot<T>()) {
  active_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_slot<T>() = previous_;
}

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradTape<T>::active()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t && t->tracked(); });
}

template class GradTape<float>;
template class GradTape<double>;
template class Gradients<float>;
template class Gradients<double>;
template class BackwardContext<float>;
template class BackwardContext<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template bool recording(std::initializer_list<const Tensor<float>*>);
template bool recording(std::initializer_list<const Tensor<double>*>);

}  // namespace cvthead::numerics
