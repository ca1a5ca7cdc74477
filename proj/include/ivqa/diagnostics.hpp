#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ivqa/model.hpp"

namespace ivqa::diagnostics {

/// H = N_h = 8, N = 6, k = 3, d_v = 5, d_e = 4, N_f = 12, j = 3, N_w = 20.
model::ModelConfig gradcheck_config(bool ablate = false);

/// How the random model, image and instance for a gradient check are drawn.
struct GradCheckDraw {
  std::uint64_t seed = 10;
  double matrix_scale = 1.0;
  double bias_scale = 0.2;
  double embedding_scale = 0.5;
  std::size_t question_len = 4;
};

struct TensorCheck {
  std::string name;
  double max_rel_error = 0.0;
};

/// Compares the analytic gradient of the teacher-forced sequence loss with
/// central differences for every parameter tensor, in 64-bit.
std::vector<TensorCheck> model_gradient_check(const model::ModelConfig& cfg, const GradCheckDraw& draw,
                                              double h = 1e-5);

}  // namespace ivqa::diagnostics
