#include "ivqa/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace ivqa {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (double e : max_rel_error) w = std::max(w, e);
  return w;
}

GradCheckReport grad_check(const std::function<Tensor<double>(Tape<double>&)>& f,
                           std::vector<Tensor<double>> wrt, double h) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    tape.backward(f(tape));
  }

  GradCheckReport report;
  for (auto& t : wrt) {
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                     : std::vector<double>(t.numel(), 0.0);
    auto values = t.mutable_values();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      auto plus_tape = Tape<double>::inference();
      const double plus = f(plus_tape).item();
      values[i] = saved - h;
      auto minus_tape = Tape<double>::inference();
      const double minus = f(minus_tape).item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      worst = std::max(worst, relative_error(analytic[i], numeric));
    }
    report.max_rel_error.push_back(worst);
  }
  return report;
}

double grad_check(const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
                  Tensor<double> x, double h) {
  return grad_check([&](Tape<double>& tape) { return f(tape, x); }, {x}, h).worst();
}

}  // namespace ivqa
