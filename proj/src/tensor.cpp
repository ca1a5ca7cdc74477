#include "ivqa/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace ivqa {

namespace {

std::atomic<std::uint64_t> next_tape_id{1};
thread_local std::string injected_fault;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  if (ivqa::numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                         std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = ivqa::numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::vector<T> values, bool requires_grad) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                            bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!is_leaf()) throw TapeError("values of a recorded tensor are read-only");
  return node_->values;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->values[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw TapeError("requires_grad can only be changed on leaves");
  node_->requires_grad = on;
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
void Tensor<T>::accumulate_grad(std::span<const T> g) {
  if (g.size() != numel()) {
    throw DimensionError("gradient size " + std::to_string(g.size()) +
                         " for tensor of shape " + shape_str(shape()));
  }
  if (node_->grad.empty()) node_->grad.assign(numel(), T(0));
  for (std::size_t i = 0; i < g.size(); ++i) node_->grad[i] += g[i];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->values, false);
}

template <typename T>
void LeafGradients<T>::apply() const {
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    Tensor<T> leaf = leaves[i];
    leaf.accumulate_grad(grads[i]);
  }
}

// ---------------------------------------------------------------- Tape

template <typename T>
Tape<T>::Tape(bool recording) : id_(next_tape_id.fetch_add(1)), recording_(recording) {}

template <typename T>
Tensor<T> Tape<T>::record(const char* op, Shape shape, std::vector<T> values,
                          std::vector<Tensor<T>> inputs, BackwardFn<T> backward) {
  for (const T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
  auto node = std::make_shared<detail::Node<T>>();
  if (numel(shape) != values.size()) {
    throw DimensionError(std::string(op) + ": output shape " + shape_str(shape) +
                         " does not match " + std::to_string(values.size()) + " values");
  }
  node->shape = std::move(shape);
  node->values = std::move(values);

  bool needs_grad = false;
  if (recording_) {
    for (const auto& in : inputs) {
      if (!in.requires_grad()) continue;
      if (!in.is_leaf() &&
          (in.node_->tape_id != id_ || in.node_->generation != generation_)) {
        throw TapeError(std::string(op) + ": input was recorded on a different tape");
      }
      needs_grad = true;
    }
  }
  if (!needs_grad) return Tensor<T>(std::move(node));

  if (consumed_) throw TapeError("recording on a tape that already ran backward; call reset()");
  node->requires_grad = true;
  node->tape_id = id_;
  node->generation = generation_;
  Op rec{op, {}, node, std::move(backward)};
  rec.inputs.reserve(inputs.size());
  for (auto& in : inputs) rec.inputs.push_back(in.node_);
  ops_.push_back(std::move(rec));
  return Tensor<T>(std::move(node));
}

template <typename T>
LeafGradients<T> Tape<T>::backward_collect(const Tensor<T>& loss) {
  if (!loss.defined()) throw TapeError("backward on an undefined tensor");
  if (loss.ndim() != 0) {
    throw TapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (consumed_) throw TapeError("stale tape: backward already ran for this forward pass");
  if (!loss.requires_grad() || loss.is_leaf() || loss.node_->tape_id != id_ ||
      loss.node_->generation != generation_) {
    throw TapeError("loss was not produced by the current forward pass of this tape");
  }
  consumed_ = true;

  LeafGradients<T> out;
  std::unordered_map<const detail::Node<T>*, std::size_t> leaf_slot;
  loss.node_->grad.assign(1, T(1));

  std::vector<T> negated;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    auto& op = *it;
    if (op.output->grad.empty()) continue;  // does not reach the loss

    std::vector<std::span<const T>> in_values;
    std::vector<std::span<T>> in_grads;
    in_values.reserve(op.inputs.size());
    in_grads.reserve(op.inputs.size());
    for (auto& in : op.inputs) {
      in_values.emplace_back(in->values);
      if (!in->requires_grad) {
        in_grads.emplace_back();
        continue;
      }
      if (in->tape_id == 0) {
        auto [slot, fresh] = leaf_slot.try_emplace(in.get(), out.leaves.size());
        if (fresh) {
          out.leaves.push_back(Tensor<T>(in));
          out.grads.emplace_back(in->values.size(), T(0));
        }
        in_grads.emplace_back(out.grads[slot->second]);
      } else {
        if (in->grad.empty()) in->grad.assign(in->values.size(), T(0));
        in_grads.emplace_back(in->grad);
      }
    }

    std::span<const T> g = op.output->grad;
    if (!injected_fault.empty() && injected_fault == op.name) {
      negated.assign(g.begin(), g.end());
      for (auto& v : negated) v = -v;
      g = negated;
    }
    op.backward(BackwardContext<T>(g, op.output->values, std::move(in_values),
                                   std::move(in_grads)));
  }
  return out;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  backward_collect(loss).apply();
}

template <typename T>
void Tape<T>::reset() {
  ops_.clear();
  ++generation_;
  consumed_ = false;
}

namespace testing {

ScopedBackwardFault::ScopedBackwardFault(std::string op_name)
    : previous_(std::exchange(injected_fault, std::move(op_name))) {}

ScopedBackwardFault::~ScopedBackwardFault() { injected_fault = std::move(previous_); }

}  // namespace testing

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template struct LeafGradients<float>;
template struct LeafGradients<double>;

}  // namespace ivqa
