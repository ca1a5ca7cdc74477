#pragma once

// Straight-line re-implementation of the question generator in plain double
// loops, with no tape and no shared code with the library's forward pass.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "ivqa/features.hpp"
#include "ivqa/model.hpp"

namespace ivqa::oracle {

using Vec = std::vector<double>;
using Rows = std::vector<Vec>;

struct Mat {
  std::size_t rows = 0, cols = 0;
  Vec v;
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

template <typename T>
Vec vec(const Tensor<T>& t) {
  return Vec(t.values().begin(), t.values().end());
}

template <typename T>
Mat mat(const Tensor<T>& t) {
  return {t.dim(0), t.dim(1), vec(t)};
}

inline Rows rows_of(std::span<const double> flat, std::size_t n, std::size_t d) {
  Rows out(n, Vec(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) out[i][c] = flat[i * d + c];
  return out;
}

inline Vec matvec(const Mat& m, const Vec& x) {
  Vec y(m.rows, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) y[r] += m.at(r, c) * x[c];
  return y;
}

inline Vec plus(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

inline Vec cat(std::initializer_list<Vec> parts) {
  Vec out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec softmax(const Vec& x) {
  double m = *std::max_element(x.begin(), x.end());
  Vec e(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - m);
  for (auto& v : e) v /= s;
  return e;
}

template <typename T>
Vec gru(const model::GruParams<T>& p, const Vec& x, const Vec& h) {
  const Vec az = plus(plus(matvec(mat(p.W_z), x), matvec(mat(p.U_z), h)), vec(p.b_z));
  const Vec ar = plus(plus(matvec(mat(p.W_r), x), matvec(mat(p.U_r), h)), vec(p.b_r));
  Vec rh(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) rh[i] = sigm(ar[i]) * h[i];
  const Vec ah = plus(plus(matvec(mat(p.W_h), x), matvec(mat(p.U_h), rh)), vec(p.b_h));
  Vec out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double z = sigm(az[i]);
    out[i] = (1.0 - z) * h[i] + z * std::tanh(ah[i]);
  }
  return out;
}

struct Att {
  Vec logits, beta, context;
};

inline Vec weighted_sum(const Rows& rows, const Vec& beta) {
  Vec c(rows[0].size(), 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t d = 0; d < c.size(); ++d) c[d] += beta[i] * rows[i][d];
  return c;
}

template <typename T>
Att guide(const model::GuideAttentionParams<T>& p, const Rows& F, const Vec& a) {
  const Vec w = vec(p.w);
  Vec cue = plus(matvec(mat(p.U_ans), a), vec(p.b_ans));
  for (auto& x : cue) x = std::tanh(x);
  Att out;
  for (const auto& f : F) {
    Vec feat = plus(matvec(mat(p.U_feat), f), vec(p.b_feat));
    double alpha = 0;
    for (std::size_t n = 0; n < w.size(); ++n) alpha += w[n] * std::tanh(feat[n]) * cue[n];
    out.logits.push_back(alpha);
  }
  out.beta = softmax(out.logits);
  out.context = weighted_sum(F, out.beta);
  return out;
}

template <typename T>
Rows mfb(const model::MfbParams<T>& p, const Rows& E, const Vec& a, std::size_t window) {
  const Vec ans = plus(matvec(mat(p.U_2), a), vec(p.b_2));
  Rows Z;
  for (const auto& e : E) {
    const Vec x = plus(matvec(mat(p.U_1), e), vec(p.b_1));
    Vec z(x.size() / window, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) z[i / window] += x[i] * ans[i];
    double norm2 = 0;
    for (auto& v : z) {
      v = (v > 0 ? 1.0 : v < 0 ? -1.0 : 0.0) * std::sqrt(std::abs(v));
      norm2 += v * v;
    }
    const double norm = std::sqrt(norm2);
    if (norm > 1e-12)
      for (auto& v : z) v /= norm;
    Z.push_back(z);
  }
  return Z;
}

template <typename T>
Att dynamic(const model::DynamicAttentionParams<T>& p, const Rows& Z, const Rows& V, const Vec& h1) {
  const Vec w = vec(p.w);
  const Vec shift = plus(vec(p.b_z), matvec(mat(p.W_h), h1));
  Att out;
  for (const auto& z : Z) {
    const Vec pre = plus(matvec(mat(p.W_z), z), shift);
    double alpha = 0;
    for (std::size_t n = 0; n < w.size(); ++n) alpha += w[n] * std::tanh(pre[n]);
    out.logits.push_back(alpha);
  }
  out.beta = softmax(out.logits);
  out.context = weighted_sum(V, out.beta);
  return out;
}

struct Forward {
  Vec answer;
  Att visual, semantic;
  Rows Z;
  std::vector<Vec> h1, h2, probs, beta;
};

/// Teacher-forced unroll of the whole model.
template <typename T>
Forward forward(const model::ModelConfig& cfg, const model::ModelParameters<T>& p,
                const features::ImageFeatures& img, std::span<const text::TokenId> answer,
                std::span<const text::TokenId> question) {
  const Mat W_emb = mat(p.W_emb);
  auto emb_row = [&](text::TokenId id) {
    return Vec(W_emb.v.begin() + static_cast<std::ptrdiff_t>(id * W_emb.cols),
               W_emb.v.begin() + static_cast<std::ptrdiff_t>((id + 1) * W_emb.cols));
  };
  Forward f;
  f.answer = Vec(cfg.hidden, 0.0);
  for (auto id : answer)
    if (id != text::kPadId) f.answer = gru(p.answer_gru, emb_row(id), f.answer);

  const Rows V = rows_of(img.visual, img.k, img.d_v);
  Vec att0;
  Rows E = V;
  if (!cfg.ablate_semantic) {
    const Rows S = rows_of(img.semantic, img.k, img.d_s);
    f.visual = guide(p.visual_att, V, f.answer);
    f.semantic = guide(p.semantic_att, S, f.answer);
    att0 = cat({f.visual.context, f.semantic.context});
    for (std::size_t i = 0; i < img.k; ++i) E[i] = cat({V[i], S[i]});
  }
  f.Z = mfb(p.mfb, E, f.answer, cfg.mfb_window);

  Vec h1(cfg.hidden, 0.0), h2(cfg.decoder_hidden, 0.0);
  text::TokenId prev = text::kStartId;
  for (auto gold : question) {
    const Vec M = plus(emb_row(prev), vec(p.b_emb));
    h1 = gru(p.encoder_gru, cat({M, h2, att0}), plus(h1, f.answer));
    const Att dyn = dynamic(p.dynamic_att, f.Z, V, h1);
    h2 = gru(p.decoder_gru, cat({dyn.context, h1}), h2);
    f.h1.push_back(h1);
    f.h2.push_back(h2);
    f.beta.push_back(dyn.beta);
    f.probs.push_back(softmax(plus(matvec(mat(p.W_dec), h2), vec(p.b_dec))));
    prev = gold;
  }
  return f;
}

}  // namespace ivqa::oracle
