#pragma once

// Differentiable primitives. Every function takes the tape that records it.
// Vectors are 1-D tensors, matrices 2-D row-major; scalars have shape [].

#include <cstddef>
#include <vector>

#include "ivqa/tensor.hpp"

namespace ivqa::ops {

enum class Ewise { add, sub, hadamard };
enum class Activation { tanh, sigmoid };

/// [m x n] . [n x p] -> [m x p], or [m x n] . [n] -> [m].
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a);

/// Elementwise combination of two tensors of identical shape.
template <typename T>
Tensor<T> ewise(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, Ewise kind);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return ewise(tape, a, b, Ewise::add);
}
template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return ewise(tape, a, b, Ewise::sub);
}
template <typename T>
Tensor<T> hadamard(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return ewise(tape, a, b, Ewise::hadamard);
}

/// Multiplies by a constant.
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& a, Activation kind);

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& a) {
  return activation(tape, a, Activation::tanh);
}
template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& a) {
  return activation(tape, a, Activation::sigmoid);
}

/// Softmax of a non-empty vector, with max subtraction.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& a);

/// Concatenation of vectors. Empty parts are allowed; an empty list is not.
template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts);

/// Sums consecutive windows of the last axis: out[t] = sum a[t*j .. t*j+j-1].
template <typename T>
Tensor<T> sum_pool(Tape<T>& tape, const Tensor<T>& a, std::size_t window);

/// Stabilizer in the signed square root derivative 1 / (2 sqrt|x| + eps).
inline constexpr double kSignedSqrtEps = 1e-8;
/// Rows with norm below this are returned unchanged by l2_normalize.
inline constexpr double kL2NormEps = 1e-12;

/// sign(x) * sqrt(|x|), elementwise.
template <typename T>
Tensor<T> signed_sqrt(Tape<T>& tape, const Tensor<T>& a);

/// Divides each row (the whole vector for 1-D input) by its L2 norm.
template <typename T>
Tensor<T> l2_normalize(Tape<T>& tape, const Tensor<T>& a);

/// Row `index` of a [V x d] table.
template <typename T>
Tensor<T> embed_lookup(Tape<T>& tape, const Tensor<T>& table, std::size_t index);

/// Repeats a vector as the rows of an [rows x n] matrix.
template <typename T>
Tensor<T> broadcast_rows(Tape<T>& tape, const Tensor<T>& a, std::size_t rows);

/// Element `index` of a vector, as a scalar.
template <typename T>
Tensor<T> pick(Tape<T>& tape, const Tensor<T>& a, std::size_t index);

/// log(max(x, floor)), elementwise; zero gradient where clamped.
template <typename T>
Tensor<T> log_clamped(Tape<T>& tape, const Tensor<T>& a, T floor);

/// Sum of all elements, as a scalar.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a);

}  // namespace ivqa::ops
