#pragma once

// Question generator conditioned on an image and an answer phrase.
//
// Pipeline per instance:
//   answer ids --GRU--> a
//   (V, S, a) --dual guiding attention--> att_0 = [c_v; c_s]
//   (E_v, a) --MFB--> Z (signed-sqrt + L2 normalized rows)
// then per step t, from the previous token q_{t-1}:
//   h1_t = GRU_1([M_t; h2_{t-1}; att_0], h1_{t-1} + a)
//   beta_t = softmax(w' tanh(W_z z_i + b_z + W_h h1_t)),  c_t = sum_i beta_i v_i
//   h2_t = GRU_2([c_t; h1_t], h2_{t-1})
//   p_t = softmax(W_dec h2_t + b_dec)
//
// With `ablate_semantic` the semantic features and att_0 are removed: E_v = V
// and GRU_1 reads [M_t; h2_{t-1}] only.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ivqa/features.hpp"
#include "ivqa/tensor.hpp"
#include "ivqa/text.hpp"

namespace ivqa::model {

using text::TokenId;

struct ModelConfig {
  std::size_t hidden = 1280;          // H: answer GRU and GRU_1 state size
  std::size_t decoder_hidden = 1280;  // N_h: GRU_2 state size, must equal H
  std::size_t attention = 512;        // N
  std::size_t d_v = 2048;
  std::size_t d_e = 300;
  std::size_t k = 36;
  std::size_t mfb_window = 5;    // j
  std::size_t mfb_expand = 1600; // N_f
  std::size_t vocab_size = 0;    // N_w
  std::size_t max_question_len = text::kQuestionLength;
  std::size_t answer_len = text::kAnswerLength;
  bool ablate_semantic = false;

  std::size_t mfb_out() const { return mfb_expand / mfb_window; }           // N_z
  std::size_t semantic_dim() const { return ablate_semantic ? 0 : 2 * d_e; }
  std::size_t enhanced_dim() const { return d_v + semantic_dim(); }        // N_e
  std::size_t guide_dim() const { return ablate_semantic ? 0 : d_v + 2 * d_e; }
  std::size_t encoder_input_dim() const { return d_e + decoder_hidden + guide_dim(); }

  /// Throws ConfigError on zero sizes, j not dividing N_f, or H != N_h.
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(std::string_view json);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ParamInfo {
  std::string name;
  Shape shape;
  enum class Init { matrix, bias, embedding } init;
};

/// Every trainable tensor for a configuration, in canonical order.
std::vector<ParamInfo> parameter_layout(const ModelConfig& cfg);

template <typename T>
struct GruParams {
  Tensor<T> W_z, U_z, b_z;
  Tensor<T> W_r, U_r, b_r;
  Tensor<T> W_h, U_h, b_h;
};

/// alpha_i = w' (tanh(U_f f_i + b_f) . tanh(U_a a + b_a))
template <typename T>
struct GuideAttentionParams {
  Tensor<T> w, U_feat, b_feat, U_ans, b_ans;
};

template <typename T>
struct MfbParams {
  Tensor<T> U_1, b_1, U_2, b_2;
};

template <typename T>
struct DynamicAttentionParams {
  Tensor<T> w, W_z, b_z, W_h;
};

template <typename T>
struct ModelParameters {
  GruParams<T> answer_gru;
  GuideAttentionParams<T> visual_att;    // undefined when ablated
  GuideAttentionParams<T> semantic_att;  // undefined when ablated
  MfbParams<T> mfb;
  Tensor<T> W_emb;  // [N_w x d_e], row i is the embedding of token i
  Tensor<T> b_emb;
  GruParams<T> encoder_gru;
  GruParams<T> decoder_gru;
  DynamicAttentionParams<T> dynamic_att;
  Tensor<T> W_dec, b_dec;

  /// Tensor slot for a layout name; nullptr for unknown names.
  Tensor<T>* slot(std::string_view name);
  /// (name, tensor) for every defined tensor, in canonical order.
  std::vector<std::pair<std::string, Tensor<T>>> named(const ModelConfig& cfg);
  void zero_grad(const ModelConfig& cfg);
};

struct InitOptions {
  std::uint64_t seed = 1;
  double matrix_scale = 0.08;  // matrices ~ uniform(-s, s)
  double bias_scale = 0.0;     // biases ~ uniform(-s, s); 0 gives zero biases
};

/// Fresh parameters; W_emb is copied from the embedding table.
template <typename T>
ModelParameters<T> init_parameters(const ModelConfig& cfg, const text::EmbeddingTable& emb,
                                   const InitOptions& opts = {});

template <typename T>
struct Attended {
  Tensor<T> beta;     // [k]
  Tensor<T> context;  // weighted sum of the attended rows
};

template <typename T>
struct GuidedContext {
  Attended<T> visual;
  Attended<T> semantic;
  Tensor<T> att0;  // [c_v; c_s]
};

/// Per-instance quantities that do not change across decoding steps.
template <typename T>
struct Conditioning {
  Tensor<T> V;  // [k x d_v]
  Tensor<T> S;  // [k x 2d_e]; undefined when ablated
  Tensor<T> E;  // [k x N_e]
  Tensor<T> answer;  // a
  GuidedContext<T> guide;  // undefined members when ablated
  Tensor<T> Z;  // [k x N_z]
};

template <typename T>
struct DecoderState {
  Tensor<T> h1;
  Tensor<T> h2;
  std::size_t t = 0;
};

template <typename T>
struct StepResult {
  DecoderState<T> state;
  Tensor<T> probs;  // p* over the vocabulary
  Tensor<T> beta;   // dynamic attention weights
};

struct TraceStep {
  std::size_t t = 0;  // 1-based step
  TokenId token = 0;
  std::vector<double> beta;
  int top1 = -1;
  int top2 = -1;  // -1 when k == 1
};
using AttentionTrace = std::vector<TraceStep>;

TraceStep make_trace_step(std::size_t t, TokenId token, std::span<const double> beta);

template <typename T>
struct TeacherForced {
  std::vector<Tensor<T>> distributions;  // one per gold token
  AttentionTrace trace;
  Conditioning<T> conditioning;
};

using FeatureStore = std::map<std::string, features::ImageFeatures>;

/// Features of an image; std::out_of_range naming the image when absent.
const features::ImageFeatures& find_features(const FeatureStore& store, const std::string& image_id);

/// Standard reset/update GRU: h' = (1 - z) h + z tanh(W_h x + U_h (r h) + b_h).
template <typename T>
Tensor<T> gru_cell(Tape<T>& tape, const GruParams<T>& p, const Tensor<T>& x, const Tensor<T>& h);

template <typename T>
class IvqaModel {
 public:
  IvqaModel(ModelConfig cfg, ModelParameters<T> params);

  const ModelConfig& config() const { return cfg_; }
  const ModelParameters<T>& params() const { return params_; }
  ModelParameters<T>& params() { return params_; }

  Tensor<T> embed_word(Tape<T>& tape, TokenId token) const;
  Tensor<T> encode_answer(Tape<T>& tape, std::span<const TokenId> answer) const;
  Attended<T> visual_attention(Tape<T>& tape, const Tensor<T>& V, const Tensor<T>& a) const;
  Attended<T> semantic_attention(Tape<T>& tape, const Tensor<T>& S, const Tensor<T>& a) const;
  /// Both guiding attentions and att_0; all members undefined when ablated.
  GuidedContext<T> guiding_context(Tape<T>& tape, const Tensor<T>& V, const Tensor<T>& S,
                                   const Tensor<T>& a) const;
  /// [k x N_z] fused features, one normalized row per region.
  Tensor<T> mfb_fuse(Tape<T>& tape, const Tensor<T>& E, const Tensor<T>& a) const;
  /// `att0` is ignored when ablated.
  Tensor<T> encoder_step(Tape<T>& tape, const Tensor<T>& M, const Tensor<T>& h2_prev,
                         const Tensor<T>& att0, const Tensor<T>& h1_prev, const Tensor<T>& a) const;
  Attended<T> dynamic_attention(Tape<T>& tape, const Tensor<T>& Z, const Tensor<T>& V,
                                const Tensor<T>& h1) const;
  Tensor<T> decoder_step(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& h1,
                         const Tensor<T>& h2_prev) const;
  Tensor<T> output_distribution(Tape<T>& tape, const Tensor<T>& h2) const;

  /// Answer encoding, guiding context and fused features for one instance.
  Conditioning<T> condition(Tape<T>& tape, const features::ImageFeatures& image,
                            std::span<const TokenId> answer) const;
  DecoderState<T> initial_state() const;
  /// One generation step fed with the previous token (<start> at t = 0).
  StepResult<T> step(Tape<T>& tape, const Conditioning<T>& cond, const DecoderState<T>& state,
                     TokenId prev) const;

  /// Unrolls over the gold question with gold previous tokens.
  TeacherForced<T> forward_teacher_forced(Tape<T>& tape, const text::DatasetInstance& instance,
                                          const features::ImageFeatures& image) const;
  TeacherForced<T> forward_teacher_forced(Tape<T>& tape, const text::DatasetInstance& instance,
                                          const FeatureStore& store) const;

 private:
  Attended<T> guide_attention(Tape<T>& tape, const GuideAttentionParams<T>& p, const Tensor<T>& F,
                              const Tensor<T>& a) const;
  void check_token(TokenId token) const;

  ModelConfig cfg_;
  ModelParameters<T> params_;
};

extern template class IvqaModel<float>;
extern template class IvqaModel<double>;

}  // namespace ivqa::model
