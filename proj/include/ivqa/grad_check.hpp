#pragma once

#include <functional>
#include <vector>

#include "ivqa/tensor.hpp"

namespace ivqa {

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

struct GradCheckReport {
  /// Worst relative error per checked tensor, in the order given.
  std::vector<double> max_rel_error;
  double worst() const;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x + h e_i) - f(x - h e_i)) / 2h over every coordinate of
/// every tensor in `wrt`. The tensors must be leaves; their values are
/// perturbed in place and restored. Existing gradients are cleared.
GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>&)>& f,
                           std::vector<Tensor<double>> wrt, double h = 1e-5);

/// Single-input convenience form; returns the worst relative error.
double grad_check(const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
                  Tensor<double> x, double h = 1e-5);

}  // namespace ivqa
