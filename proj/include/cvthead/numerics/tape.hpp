#pragma once

#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cvthead/numerics/tensor.hpp"

namespace cvthead::numerics {

template <typename T>
class BackwardContext;

// Map from tape node id to the gradient of the loss w.r.t. that node.
template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::unordered_map<NodeId, Tensor<T>> grads) : grads_(std::move(grads)) {}

  // Gradient for a tracked tensor; zeros when the loss does not depend on it.
  Tensor<T> grad(const Tensor<T>& tracked) const;
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  const std::unordered_map<NodeId, Tensor<T>>& map() const { return grads_; }

 private:
  std::unordered_map<NodeId, Tensor<T>> grads_;
};

// Reverse-mode tape. Ops append records while the tape is active on the
// current thread (see TapeScope); backward replays them in reverse order,
// which fixes the gradient accumulation order.
template <typename T>
class GradTape {
 public:
  using BackwardFn = std::function<void(std::span<const T> grad_out, BackwardContext<T>& ctx)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  ~GradTape();

  // Registers a leaf and returns a tracked copy that requires grad.
  Tensor<T> watch(const Tensor<T>& leaf);

  // Appends an op record and returns `out` tagged with the new node id.
  Tensor<T> record(std::string_view kind, std::vector<const Tensor<T>*> inputs, Tensor<T> out,
                   BackwardFn fn);

  Gradients<T> backward(const Tensor<T>& loss);

  void clear();
  std::size_t size() const noexcept { return records_.size(); }
  std::string_view kind(NodeId id) const { return records_.at(id).kind; }

  static GradTape* active();

 private:
  friend class BackwardContext<T>;
  template <typename>
  friend class TapeScope;

  struct Record {
    std::string_view kind;
    std::vector<NodeId> inputs;
    std::size_t numel = 0;
    Shape shape;
    BackwardFn fn;
    bool leaf = false;
  };

  std::vector<Record> records_;
  std::vector<std::vector<T>> grads_;
};

template <typename T>
class BackwardContext {
 public:
  bool needs(std::size_t input) const;
  // Accumulation buffer for input `input`, zero-initialised on first access.
  std::span<T> grad(std::size_t input);

 private:
  friend class GradTape<T>;
  BackwardContext(GradTape<T>& tape, const std::vector<NodeId>& inputs) : tape_(tape), inputs_(inputs) {}
  GradTape<T>& tape_;
  const std::vector<NodeId>& inputs_;
};

// Activates a tape on the current thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* previous_;
};

// True when an op with these inputs must be recorded.
template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs);

extern template class GradTape<float>;
extern template class GradTape<double>;
extern template class Gradients<float>;
extern template class Gradients<double>;
extern template class BackwardContext<float>;
extern template class BackwardContext<double>;
extern template class TapeScope<float>;
extern template class TapeScope<double>;

}  // namespace cvthead::numerics
