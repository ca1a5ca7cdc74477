#pragma once

// Dense tensors with a define-by-run reverse-mode differentiation tape.
//
// A Tensor is a cheap shared handle. Tensors created directly by the user are
// leaves; tensors returned by the functions in ops.hpp are produced by a Tape
// and, when any input requires a gradient, remember how to push gradients
// back to their inputs. Tapes are confined to one thread. Leaves that are not
// attached to a recording tape are safe to read from many threads.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ivqa/errors.hpp"

namespace ivqa {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0: leaf
  std::uint64_t generation = 0;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(T value);
  static Tensor vector(std::vector<T> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  /// Writable view of a leaf's values (optimizers, finite differences).
  std::span<T> mutable_values();
  T item() const;
  T operator[](std::size_t i) const { return node_->values[i]; }
  T at(std::size_t row, std::size_t col) const {
    return node_->values[row * node_->shape.back() + col];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return node_->tape_id == 0; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; empty span when nothing was accumulated yet.
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();
  void accumulate_grad(std::span<const T> g);

  /// Value copy with no tape attachment and no gradient.
  Tensor detach() const;

  /// Identity of the underlying storage (two handles to one tensor compare equal).
  const void* id() const { return node_.get(); }

 private:
  friend class Tape<T>;
  explicit Tensor(std::shared_ptr<detail::Node<T>> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node<T>> node_;
};

/// Read/write access handed to a backward rule.
template <typename T>
class BackwardContext {
 public:
  BackwardContext(std::span<const T> out_grad, std::span<const T> out_values,
                  std::vector<std::span<const T>> in_values,
                  std::vector<std::span<T>> in_grads)
      : out_grad_(out_grad),
        out_values_(out_values),
        in_values_(std::move(in_values)),
        in_grads_(std::move(in_grads)) {}

  std::span<const T> out_grad() const { return out_grad_; }
  std::span<const T> output() const { return out_values_; }
  std::span<const T> input(std::size_t i) const { return in_values_[i]; }
  /// Empty when input i does not require a gradient.
  std::span<T> input_grad(std::size_t i) const { return in_grads_[i]; }
  bool needs(std::size_t i) const { return !in_grads_[i].empty(); }

 private:
  std::span<const T> out_grad_;
  std::span<const T> out_values_;
  std::vector<std::span<const T>> in_values_;
  std::vector<std::span<T>> in_grads_;
};

template <typename T>
using BackwardFn = std::function<void(const BackwardContext<T>&)>;

/// Leaf gradients gathered by one backward pass, in first-touched order.
template <typename T>
struct LeafGradients {
  std::vector<Tensor<T>> leaves;
  std::vector<std::vector<T>> grads;

  /// Adds every gradient into its leaf, in order.
  void apply() const;
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// A tape that never records; use for inference.
  static Tape inference() { return Tape(false); }

  bool recording() const { return recording_; }
  std::size_t size() const { return ops_.size(); }

  /// Creates the output of an operation. Rejects non-finite values. The
  /// backward rule is kept only when some input requires a gradient.
  Tensor<T> record(const char* op, Shape shape, std::vector<T> values,
                   std::vector<Tensor<T>> inputs, BackwardFn<T> backward);

  /// Reverse pass from a scalar loss; adds into the grads of requires_grad leaves.
  void backward(const Tensor<T>& loss);
  /// Reverse pass that returns the leaf gradients instead of applying them.
  LeafGradients<T> backward_collect(const Tensor<T>& loss);

  /// Discards the recorded operations and starts a new forward pass.
  void reset();

 private:
  struct Op {
    const char* name;
    std::vector<std::shared_ptr<detail::Node<T>>> inputs;
    std::shared_ptr<detail::Node<T>> output;
    BackwardFn<T> backward;
  };

  std::vector<Op> ops_;
  std::uint64_t id_;
  std::uint64_t generation_ = 1;
  bool recording_;
  bool consumed_ = false;
};

namespace testing {

/// While alive, the backward rule of every op with the given name on this
/// thread receives a negated upstream gradient. Used to prove that gradient
/// checks catch broken rules.
class ScopedBackwardFault {
 public:
  explicit ScopedBackwardFault(std::string op_name);
  ~ScopedBackwardFault();
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;

 private:
  std::string previous_;
};

}  // namespace testing

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template struct LeafGradients<float>;
extern template struct LeafGradients<double>;

}  // namespace ivqa
