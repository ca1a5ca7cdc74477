#include "ivqa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ivqa::ops {

namespace {

template <typename T>
void require_ndim(const char* op, const Tensor<T>& a, std::size_t ndim) {
  if (a.ndim() != ndim) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(ndim) +
                         "-D tensor, got shape " + shape_str(a.shape()));
  }
}

// rows x cols view of the last axis
template <typename T>
std::pair<std::size_t, std::size_t> rows_cols(const Tensor<T>& a) {
  if (a.ndim() == 0) return {1, 1};
  const std::size_t cols = a.shape().back();
  return {cols == 0 ? 0 : a.numel() / cols, cols};
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_ndim("matmul", a, 2);
  if (b.ndim() != 1 && b.ndim() != 2) {
    throw DimensionError("matmul: right operand must be 1-D or 2-D, got " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  const std::size_t p = b.ndim() == 2 ? b.dim(1) : 1;
  if (b.dim(0) != n) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> out(m * p, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const T aik = av[i * n + k];
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] += aik * bv[k * p + j];
    }
  }
  Shape shape = b.ndim() == 2 ? Shape{m, p} : Shape{m};
  return tape.record("matmul", std::move(shape), std::move(out), {a, b},
                     [m, n, p](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       const auto av = ctx.input(0);
                       const auto bv = ctx.input(1);
                       if (ctx.needs(0)) {
                         auto da = ctx.input_grad(0);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t k = 0; k < n; ++k) {
                             T acc = 0;
                             for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * bv[k * p + j];
                             da[i * n + k] += acc;
                           }
                       }
                       if (ctx.needs(1)) {
                         auto db = ctx.input_grad(1);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t k = 0; k < n; ++k) {
                             const T aik = av[i * n + k];
                             for (std::size_t j = 0; j < p; ++j) db[k * p + j] += aik * g[i * p + j];
                           }
                       }
                     });
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  require_ndim("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto av = a.values();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return tape.record("transpose", Shape{n, m}, std::move(out), {a},
                     [m, n](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       auto da = ctx.input_grad(0);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
                     });
}

template <typename T>
Tensor<T> ewise(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, Ewise kind) {
  if (a.shape() != b.shape()) {
    throw DimensionError("ewise: shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case Ewise::add: out[i] = av[i] + bv[i]; break;
      case Ewise::sub: out[i] = av[i] - bv[i]; break;
      case Ewise::hadamard: out[i] = av[i] * bv[i]; break;
    }
  }
  const char* name = kind == Ewise::hadamard ? "hadamard" : (kind == Ewise::add ? "add" : "sub");
  return tape.record(name, a.shape(), std::move(out), {a, b},
                     [kind](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       const auto av = ctx.input(0);
                       const auto bv = ctx.input(1);
                       auto da = ctx.input_grad(0);
                       auto db = ctx.input_grad(1);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         switch (kind) {
                           case Ewise::add:
                             if (!da.empty()) da[i] += g[i];
                             if (!db.empty()) db[i] += g[i];
                             break;
                           case Ewise::sub:
                             if (!da.empty()) da[i] += g[i];
                             if (!db.empty()) db[i] -= g[i];
                             break;
                           case Ewise::hadamard:
                             if (!da.empty()) da[i] += g[i] * bv[i];
                             if (!db.empty()) db[i] += g[i] * av[i];
                             break;
                         }
                       }
                     });
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return tape.record("scale", a.shape(), std::move(out), {a},
                     [factor](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       auto da = ctx.input_grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * factor;
                     });
}

template <typename T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& a, Activation kind) {
  std::vector<T> out(a.values().begin(), a.values().end());
  if (kind == Activation::tanh) {
    for (auto& v : out) v = std::tanh(v);
  } else {
    for (auto& v : out) {
      if (v >= 0) {
        v = T(1) / (T(1) + std::exp(-v));
      } else {
        const T e = std::exp(v);
        v = e / (T(1) + e);
      }
    }
  }
  return tape.record(kind == Activation::tanh ? "tanh" : "sigmoid", a.shape(), std::move(out),
                     {a}, [kind](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       const auto y = ctx.output();
                       auto da = ctx.input_grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const T d = kind == Activation::tanh ? T(1) - y[i] * y[i]
                                                              : y[i] * (T(1) - y[i]);
                         da[i] += g[i] * d;
                       }
                     });
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& a) {
  require_ndim("softmax", a, 1);
  if (a.numel() == 0) throw DimensionError("softmax: empty input");
  const auto av = a.values();
  const T mx = *std::max_element(av.begin(), av.end());
  std::vector<T> out(av.size());
  T total = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = std::exp(av[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return tape.record("softmax", a.shape(), std::move(out), {a},
                     [](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       const auto y = ctx.output();
                       T dot = 0;
                       for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
                       auto da = ctx.input_grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) da[i] += y[i] * (g[i] - dot);
                     });
}

template <typename T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat: empty sequence");
  std::vector<T> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_ndim("concat", p, 1);
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  const std::size_t total = out.size();
  return tape.record("concat", Shape{total}, std::move(out), parts,
                     [offsets](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       for (std::size_t k = 0; k < offsets.size(); ++k) {
                         auto dp = ctx.input_grad(k);
                         for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += g[offsets[k] + i];
                       }
                     });
}

template <typename T>
Tensor<T> sum_pool(Tape<T>& tape, const Tensor<T>& a, std::size_t window) {
  if (a.ndim() == 0) throw DimensionError("sum_pool: scalar input");
  if (window == 0) throw DimensionError("sum_pool: window must be positive");
  const auto [rows, cols] = rows_cols(a);
  if (cols % window != 0) {
    throw DimensionError("sum_pool: window " + std::to_string(window) +
                         " does not divide length " + std::to_string(cols));
  }
  const std::size_t out_cols = cols / window;
  const auto av = a.values();
  std::vector<T> out(rows * out_cols, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t u = 0; u < cols; ++u) out[r * out_cols + u / window] += av[r * cols + u];
  Shape shape = a.shape();
  shape.back() = out_cols;
  return tape.record("sum_pool", std::move(shape), std::move(out), {a},
                     [rows, cols, window, out_cols](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       auto da = ctx.input_grad(0);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t u = 0; u < cols; ++u)
                           da[r * cols + u] += g[r * out_cols + u / window];
                     });
}

template <typename T>
Tensor<T> signed_sqrt(Tape<T>& tape, const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) {
    const T r = std::sqrt(std::abs(v));
    v = v < 0 ? -r : r;
  }
  return tape.record("signed_sqrt", a.shape(), std::move(out), {a},
                     [](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       const auto x = ctx.input(0);
                       auto da = ctx.input_grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         da[i] += g[i] / (T(2) * std::sqrt(std::abs(x[i])) + T(kSignedSqrtEps));
                       }
                     });
}

template <typename T>
Tensor<T> l2_normalize(Tape<T>& tape, const Tensor<T>& a) {
  if (a.ndim() == 0) throw DimensionError("l2_normalize: scalar input");
  const auto [rows, cols] = rows_cols(a);
  const auto av = a.values();
  std::vector<T> out(av.begin(), av.end());
  std::vector<T> norms(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    T sq = 0;
    for (std::size_t c = 0; c < cols; ++c) sq += av[r * cols + c] * av[r * cols + c];
    norms[r] = std::sqrt(sq);
    if (norms[r] < T(kL2NormEps)) continue;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= norms[r];
  }
  return tape.record("l2_normalize", a.shape(), std::move(out), {a},
                     [rows, cols, norms](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       const auto y = ctx.output();
                       auto da = ctx.input_grad(0);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t base = r * cols;
                         if (norms[r] < T(kL2NormEps)) {
                           for (std::size_t c = 0; c < cols; ++c) da[base + c] += g[base + c];
                           continue;
                         }
                         T dot = 0;
                         for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
                         for (std::size_t c = 0; c < cols; ++c)
                           da[base + c] += (g[base + c] - y[base + c] * dot) / norms[r];
                       }
                     });
}

template <typename T>
Tensor<T> embed_lookup(Tape<T>& tape, const Tensor<T>& table, std::size_t index) {
  require_ndim("embed_lookup", table, 2);
  const std::size_t rows = table.dim(0), d = table.dim(1);
  if (index >= rows) {
    throw std::out_of_range("embed_lookup: index " + std::to_string(index) +
                            " outside table of " + std::to_string(rows) + " rows");
  }
  const auto tv = table.values();
  std::vector<T> out(tv.begin() + index * d, tv.begin() + (index + 1) * d);
  return tape.record("embed_lookup", Shape{d}, std::move(out), {table},
                     [index, d](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       auto dt = ctx.input_grad(0);
                       for (std::size_t c = 0; c < d; ++c) dt[index * d + c] += g[c];
                     });
}

template <typename T>
Tensor<T> broadcast_rows(Tape<T>& tape, const Tensor<T>& a, std::size_t rows) {
  require_ndim("broadcast_rows", a, 1);
  const std::size_t n = a.numel();
  std::vector<T> out;
  out.reserve(rows * n);
  for (std::size_t r = 0; r < rows; ++r) out.insert(out.end(), a.values().begin(), a.values().end());
  return tape.record("broadcast_rows", Shape{rows, n}, std::move(out), {a},
                     [rows, n](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       auto da = ctx.input_grad(0);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < n; ++c) da[c] += g[r * n + c];
                     });
}

template <typename T>
Tensor<T> pick(Tape<T>& tape, const Tensor<T>& a, std::size_t index) {
  require_ndim("pick", a, 1);
  if (index >= a.numel()) {
    throw std::out_of_range("pick: index " + std::to_string(index) + " outside vector of " +
                            std::to_string(a.numel()));
  }
  return tape.record("pick", Shape{}, {a[index]}, {a},
                     [index](const BackwardContext<T>& ctx) {
                       ctx.input_grad(0)[index] += ctx.out_grad()[0];
                     });
}

template <typename T>
Tensor<T> log_clamped(Tape<T>& tape, const Tensor<T>& a, T floor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = std::log(std::max(v, floor));
  return tape.record("log", a.shape(), std::move(out), {a},
                     [floor](const BackwardContext<T>& ctx) {
                       const auto g = ctx.out_grad();
                       const auto x = ctx.input(0);
                       auto da = ctx.input_grad(0);
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (x[i] > floor) da[i] += g[i] / x[i];
                     });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T total = 0;
  for (const T v : a.values()) total += v;
  return tape.record("sum", Shape{}, {total}, {a}, [](const BackwardContext<T>& ctx) {
    const T g = ctx.out_grad()[0];
    for (auto& d : ctx.input_grad(0)) d += g;
  });
}

#define IVQA_INSTANTIATE_OPS(T)                                                       \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> transpose(Tape<T>&, const Tensor<T>&);                           \
  template Tensor<T> ewise(Tape<T>&, const Tensor<T>&, const Tensor<T>&, Ewise);      \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                            \
  template Tensor<T> activation(Tape<T>&, const Tensor<T>&, Activation);              \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                             \
  template Tensor<T> concat(Tape<T>&, const std::vector<Tensor<T>>&);                 \
  template Tensor<T> sum_pool(Tape<T>&, const Tensor<T>&, std::size_t);               \
  template Tensor<T> signed_sqrt(Tape<T>&, const Tensor<T>&);                         \
  template Tensor<T> l2_normalize(Tape<T>&, const Tensor<T>&);                        \
  template Tensor<T> embed_lookup(Tape<T>&, const Tensor<T>&, std::size_t);           \
  template Tensor<T> broadcast_rows(Tape<T>&, const Tensor<T>&, std::size_t);         \
  template Tensor<T> pick(Tape<T>&, const Tensor<T>&, std::size_t);                   \
  template Tensor<T> log_clamped(Tape<T>&, const Tensor<T>&, T);                      \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);

IVQA_INSTANTIATE_OPS(float)
IVQA_INSTANTIATE_OPS(double)

#undef IVQA_INSTANTIATE_OPS

}  // namespace ivqa::ops
