#include "ivqa/model.hpp"

#include <algorithm>
#include <stdexcept>

#include "ivqa/errors.hpp"
#include "ivqa/ops.hpp"
#include "ivqa/random.hpp"
#include "json.hpp"

namespace ivqa::model {

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> sizes[] = {
      {"hidden", hidden},         {"decoder_hidden", decoder_hidden},
      {"attention", attention},   {"d_v", d_v},
      {"d_e", d_e},               {"k", k},
      {"mfb_window", mfb_window}, {"mfb_expand", mfb_expand},
      {"max_question_len", max_question_len}, {"answer_len", answer_len}};
  for (const auto& [name, value] : sizes) {
    if (value == 0) throw ConfigError(std::string(name) + " must be positive");
  }
  if (vocab_size <= text::kFirstWordId) {
    throw ConfigError("vocab_size must exceed the " + std::to_string(text::kFirstWordId) +
                      " reserved tokens");
  }
  if (mfb_expand % mfb_window != 0) {
    throw ConfigError("mfb_window (" + std::to_string(mfb_window) + ") must divide mfb_expand (" +
                      std::to_string(mfb_expand) + ")");
  }
  if (hidden != decoder_hidden) {
    throw ConfigError("hidden (" + std::to_string(hidden) + ") must equal decoder_hidden (" +
                      std::to_string(decoder_hidden) + "): the answer vector is added to the encoder state");
  }
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["hidden"] = hidden;
  j["decoder_hidden"] = decoder_hidden;
  j["attention"] = attention;
  j["d_v"] = d_v;
  j["d_e"] = d_e;
  j["k"] = k;
  j["mfb_window"] = mfb_window;
  j["mfb_expand"] = mfb_expand;
  j["vocab_size"] = vocab_size;
  j["max_question_len"] = max_question_len;
  j["answer_len"] = answer_len;
  j["ablate_semantic"] = ablate_semantic;
  return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) throw ParseError(std::string("model config: missing \"") + key + "\"");
    try {
      field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw ParseError(std::string("model config: bad value for \"") + key + "\"");
    }
  };
  get("hidden", c.hidden);
  get("decoder_hidden", c.decoder_hidden);
  get("attention", c.attention);
  get("d_v", c.d_v);
  get("d_e", c.d_e);
  get("k", c.k);
  get("mfb_window", c.mfb_window);
  get("mfb_expand", c.mfb_expand);
  get("vocab_size", c.vocab_size);
  get("max_question_len", c.max_question_len);
  get("answer_len", c.answer_len);
  get("ablate_semantic", c.ablate_semantic);
  return c;
}

// ---------------------------------------------------------------- parameters

namespace {

constexpr const char* kGruFields[] = {"W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"};

void add_gru(std::vector<ParamInfo>& out, const std::string& prefix, std::size_t in, std::size_t hid) {
  using I = ParamInfo::Init;
  for (const char* gate : {"z", "r", "h"}) {
    out.push_back({prefix + ".W_" + gate, {hid, in}, I::matrix});
    out.push_back({prefix + ".U_" + gate, {hid, hid}, I::matrix});
    out.push_back({prefix + ".b_" + gate, {hid}, I::bias});
  }
}

template <typename T>
Tensor<T>* gru_slot(GruParams<T>& g, std::string_view field) {
  Tensor<T>* fields[] = {&g.W_z, &g.U_z, &g.b_z, &g.W_r, &g.U_r, &g.b_r, &g.W_h, &g.U_h, &g.b_h};
  for (std::size_t i = 0; i < 9; ++i)
    if (field == kGruFields[i]) return fields[i];
  return nullptr;
}

template <typename T>
Tensor<T>* guide_slot(GuideAttentionParams<T>& p, std::string_view field, const char* feat) {
  if (field == "W_att") return &p.w;
  if (field == std::string("U_") + feat) return &p.U_feat;
  if (field == std::string("b_") + feat) return &p.b_feat;
  if (field == "U_a") return &p.U_ans;
  if (field == "b_a") return &p.b_ans;
  return nullptr;
}

template <typename T>
std::vector<T> to_precision(std::span<const double> v) {
  return std::vector<T>(v.begin(), v.end());
}

}  // namespace

std::vector<ParamInfo> parameter_layout(const ModelConfig& cfg) {
  using I = ParamInfo::Init;
  const std::size_t H = cfg.hidden, N = cfg.attention, Nh = cfg.decoder_hidden;
  std::vector<ParamInfo> out;
  add_gru(out, "answer_gru", cfg.d_e, H);
  if (!cfg.ablate_semantic) {
    out.push_back({"visual_att.W_att", {N}, I::matrix});
    out.push_back({"visual_att.U_v", {N, cfg.d_v}, I::matrix});
    out.push_back({"visual_att.b_v", {N}, I::bias});
    out.push_back({"visual_att.U_a", {N, H}, I::matrix});
    out.push_back({"visual_att.b_a", {N}, I::bias});
    out.push_back({"semantic_att.W_att", {N}, I::matrix});
    out.push_back({"semantic_att.U_s", {N, 2 * cfg.d_e}, I::matrix});
    out.push_back({"semantic_att.b_s", {N}, I::bias});
    out.push_back({"semantic_att.U_a", {N, H}, I::matrix});
    out.push_back({"semantic_att.b_a", {N}, I::bias});
  }
  out.push_back({"mfb.U_1", {cfg.mfb_expand, cfg.enhanced_dim()}, I::matrix});
  out.push_back({"mfb.b_1", {cfg.mfb_expand}, I::bias});
  out.push_back({"mfb.U_2", {cfg.mfb_expand, H}, I::matrix});
  out.push_back({"mfb.b_2", {cfg.mfb_expand}, I::bias});
  out.push_back({"embedding.W_emb", {cfg.vocab_size, cfg.d_e}, I::embedding});
  out.push_back({"embedding.b_emb", {cfg.d_e}, I::bias});
  add_gru(out, "encoder_gru", cfg.encoder_input_dim(), H);
  add_gru(out, "decoder_gru", cfg.d_v + H, Nh);
  out.push_back({"dynamic_att.W_att", {N}, I::matrix});
  out.push_back({"dynamic_att.W_z", {N, cfg.mfb_out()}, I::matrix});
  out.push_back({"dynamic_att.b_z", {N}, I::bias});
  out.push_back({"dynamic_att.W_h", {N, H}, I::matrix});
  out.push_back({"output.W_dec", {cfg.vocab_size, Nh}, I::matrix});
  out.push_back({"output.b_dec", {cfg.vocab_size}, I::bias});
  return out;
}

template <typename T>
Tensor<T>* ModelParameters<T>::slot(std::string_view name) {
  const auto dot = name.find('.');
  if (dot == std::string_view::npos) return nullptr;
  const auto group = name.substr(0, dot);
  const auto field = name.substr(dot + 1);
  if (group == "answer_gru") return gru_slot(answer_gru, field);
  if (group == "encoder_gru") return gru_slot(encoder_gru, field);
  if (group == "decoder_gru") return gru_slot(decoder_gru, field);
  if (group == "visual_att") return guide_slot(visual_att, field, "v");
  if (group == "semantic_att") return guide_slot(semantic_att, field, "s");
  if (group == "mfb") {
    if (field == "U_1") return &mfb.U_1;
    if (field == "b_1") return &mfb.b_1;
    if (field == "U_2") return &mfb.U_2;
    if (field == "b_2") return &mfb.b_2;
  }
  if (group == "embedding") {
    if (field == "W_emb") return &W_emb;
    if (field == "b_emb") return &b_emb;
  }
  if (group == "dynamic_att") {
    if (field == "W_att") return &dynamic_att.w;
    if (field == "W_z") return &dynamic_att.W_z;
    if (field == "b_z") return &dynamic_att.b_z;
    if (field == "W_h") return &dynamic_att.W_h;
  }
  if (group == "output") {
    if (field == "W_dec") return &W_dec;
    if (field == "b_dec") return &b_dec;
  }
  return nullptr;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelParameters<T>::named(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& info : parameter_layout(cfg)) {
    Tensor<T>* t = slot(info.name);
    if (t && t->defined()) out.emplace_back(info.name, *t);
  }
  return out;
}

template <typename T>
void ModelParameters<T>::zero_grad(const ModelConfig& cfg) {
  for (auto& [name, t] : named(cfg)) t.zero_grad();
}

template <typename T>
ModelParameters<T> init_parameters(const ModelConfig& cfg, const text::EmbeddingTable& emb,
                                   const InitOptions& opts) {
  cfg.validate();
  if (emb.dim() != cfg.d_e || emb.vocab().size() != cfg.vocab_size) {
    throw DimensionError("embedding table is " + std::to_string(emb.vocab().size()) + "x" +
                         std::to_string(emb.dim()) + ", config expects " +
                         std::to_string(cfg.vocab_size) + "x" + std::to_string(cfg.d_e));
  }
  Rng rng(opts.seed);
  ModelParameters<T> p;
  for (const auto& info : parameter_layout(cfg)) {
    std::vector<T> values(numel(info.shape), T(0));
    switch (info.init) {
      case ParamInfo::Init::matrix:
        for (auto& v : values) v = static_cast<T>(rng.uniform(-opts.matrix_scale, opts.matrix_scale));
        break;
      case ParamInfo::Init::bias:
        if (opts.bias_scale > 0)
          for (auto& v : values) v = static_cast<T>(rng.uniform(-opts.bias_scale, opts.bias_scale));
        break;
      case ParamInfo::Init::embedding:
        values = to_precision<T>(emb.matrix());
        break;
    }
    *p.slot(info.name) = Tensor<T>(info.shape, std::move(values), true);
  }
  return p;
}

// ---------------------------------------------------------------- helpers

const features::ImageFeatures& find_features(const FeatureStore& store, const std::string& image_id) {
  auto it = store.find(image_id);
  if (it == store.end()) throw std::out_of_range("missing features for image \"" + image_id + "\"");
  return it->second;
}

TraceStep make_trace_step(std::size_t t, TokenId token, std::span<const double> beta) {
  TraceStep s;
  s.t = t;
  s.token = token;
  s.beta.assign(beta.begin(), beta.end());
  for (std::size_t i = 0; i < beta.size(); ++i) {
    const int ii = static_cast<int>(i);
    if (s.top1 < 0 || beta[i] > beta[static_cast<std::size_t>(s.top1)]) {
      s.top2 = s.top1;
      s.top1 = ii;
    } else if (s.top2 < 0 || beta[i] > beta[static_cast<std::size_t>(s.top2)]) {
      s.top2 = ii;
    }
  }
  return s;
}

template <typename T>
Tensor<T> gru_cell(Tape<T>& tape, const GruParams<T>& p, const Tensor<T>& x, const Tensor<T>& h) {
  using namespace ops;
  auto gate = [&](const Tensor<T>& W, const Tensor<T>& U, const Tensor<T>& b, const Tensor<T>& hh) {
    return add(tape, add(tape, matmul(tape, W, x), matmul(tape, U, hh)), b);
  };
  const auto z = sigmoid(tape, gate(p.W_z, p.U_z, p.b_z, h));
  const auto r = sigmoid(tape, gate(p.W_r, p.U_r, p.b_r, h));
  const auto cand = ops::tanh(tape, gate(p.W_h, p.U_h, p.b_h, hadamard(tape, r, h)));
  // (1 - z) h + z cand == h + z (cand - h)
  return add(tape, h, hadamard(tape, z, sub(tape, cand, h)));
}

// ---------------------------------------------------------------- model

template <typename T>
IvqaModel<T>::IvqaModel(ModelConfig cfg, ModelParameters<T> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  for (const auto& info : parameter_layout(cfg_)) {
    Tensor<T>* t = params_.slot(info.name);
    if (!t || !t->defined()) throw DimensionError("missing parameter " + info.name);
    if (t->shape() != info.shape) {
      throw DimensionError("parameter " + info.name + " has shape " + shape_str(t->shape()) +
                           ", expected " + shape_str(info.shape));
    }
  }
}

template <typename T>
void IvqaModel<T>::check_token(TokenId token) const {
  if (token >= cfg_.vocab_size) {
    throw std::out_of_range("token id " + std::to_string(token) + " outside vocabulary of " +
                            std::to_string(cfg_.vocab_size));
  }
}

template <typename T>
Tensor<T> IvqaModel<T>::embed_word(Tape<T>& tape, TokenId token) const {
  check_token(token);
  return ops::add(tape, ops::embed_lookup(tape, params_.W_emb, token), params_.b_emb);
}

template <typename T>
Tensor<T> IvqaModel<T>::encode_answer(Tape<T>& tape, std::span<const TokenId> answer) const {
  Tensor<T> h = Tensor<T>::zeros({cfg_.hidden});
  for (TokenId id : answer) {
    check_token(id);
    if (id == text::kPadId) continue;
    h = gru_cell(tape, params_.answer_gru, ops::embed_lookup(tape, params_.W_emb, id), h);
  }
  return h;
}

template <typename T>
Attended<T> IvqaModel<T>::guide_attention(Tape<T>& tape, const GuideAttentionParams<T>& p,
                                          const Tensor<T>& F, const Tensor<T>& a) const {
  using namespace ops;
  if (F.ndim() != 2 || F.dim(1) != p.U_feat.dim(1)) {
    throw DimensionError("attention features of shape " + shape_str(F.shape()) +
                         " do not match projection " + shape_str(p.U_feat.shape()));
  }
  const std::size_t k = F.dim(0);
  const auto feat = ops::tanh(tape, add(tape, matmul(tape, F, transpose(tape, p.U_feat)),
                                        broadcast_rows(tape, p.b_feat, k)));
  const auto cue = ops::tanh(tape, add(tape, matmul(tape, p.U_ans, a), p.b_ans));
  const auto logits = matmul(tape, hadamard(tape, feat, broadcast_rows(tape, cue, k)), p.w);
  Attended<T> out;
  out.beta = softmax(tape, logits);
  out.context = matmul(tape, transpose(tape, F), out.beta);
  return out;
}

template <typename T>
Attended<T> IvqaModel<T>::visual_attention(Tape<T>& tape, const Tensor<T>& V, const Tensor<T>& a) const {
  if (cfg_.ablate_semantic) throw std::logic_error("visual guiding attention is disabled in the ablated model");
  return guide_attention(tape, params_.visual_att, V, a);
}

template <typename T>
Attended<T> IvqaModel<T>::semantic_attention(Tape<T>& tape, const Tensor<T>& S, const Tensor<T>& a) const {
  if (cfg_.ablate_semantic) throw std::logic_error("semantic attention is disabled in the ablated model");
  return guide_attention(tape, params_.semantic_att, S, a);
}

template <typename T>
GuidedContext<T> IvqaModel<T>::guiding_context(Tape<T>& tape, const Tensor<T>& V, const Tensor<T>& S,
                                               const Tensor<T>& a) const {
  GuidedContext<T> g;
  if (cfg_.ablate_semantic) return g;
  g.visual = visual_attention(tape, V, a);
  g.semantic = semantic_attention(tape, S, a);
  g.att0 = ops::concat(tape, {g.visual.context, g.semantic.context});
  return g;
}

template <typename T>
Tensor<T> IvqaModel<T>::mfb_fuse(Tape<T>& tape, const Tensor<T>& E, const Tensor<T>& a) const {
  using namespace ops;
  if (E.ndim() != 2 || E.dim(1) != cfg_.enhanced_dim()) {
    throw DimensionError("enhanced features of shape " + shape_str(E.shape()) + ", expected rows of " +
                         std::to_string(cfg_.enhanced_dim()));
  }
  const std::size_t k = E.dim(0);
  const auto& p = params_.mfb;
  const auto expanded = add(tape, matmul(tape, E, transpose(tape, p.U_1)), broadcast_rows(tape, p.b_1, k));
  const auto answer = add(tape, matmul(tape, p.U_2, a), p.b_2);
  const auto fused = hadamard(tape, expanded, broadcast_rows(tape, answer, k));
  return l2_normalize(tape, signed_sqrt(tape, sum_pool(tape, fused, cfg_.mfb_window)));
}

template <typename T>
Tensor<T> IvqaModel<T>::encoder_step(Tape<T>& tape, const Tensor<T>& M, const Tensor<T>& h2_prev,
                                     const Tensor<T>& att0, const Tensor<T>& h1_prev,
                                     const Tensor<T>& a) const {
  std::vector<Tensor<T>> parts{M, h2_prev};
  if (!cfg_.ablate_semantic) parts.push_back(att0);
  const auto r = ops::concat(tape, parts);
  return gru_cell(tape, params_.encoder_gru, r, ops::add(tape, h1_prev, a));
}

template <typename T>
Attended<T> IvqaModel<T>::dynamic_attention(Tape<T>& tape, const Tensor<T>& Z, const Tensor<T>& V,
                                            const Tensor<T>& h1) const {
  using namespace ops;
  if (Z.ndim() != 2 || V.ndim() != 2 || Z.dim(0) != V.dim(0)) {
    throw DimensionError("dynamic attention: fused " + shape_str(Z.shape()) + " and visual " +
                         shape_str(V.shape()) + " disagree on k");
  }
  const std::size_t k = Z.dim(0);
  const auto& p = params_.dynamic_att;
  const auto shift = add(tape, p.b_z, matmul(tape, p.W_h, h1));
  const auto hidden = ops::tanh(tape, add(tape, matmul(tape, Z, transpose(tape, p.W_z)),
                                          broadcast_rows(tape, shift, k)));
  Attended<T> out;
  out.beta = softmax(tape, matmul(tape, hidden, p.w));
  out.context = matmul(tape, transpose(tape, V), out.beta);
  return out;
}

template <typename T>
Tensor<T> IvqaModel<T>::decoder_step(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& h1,
                                     const Tensor<T>& h2_prev) const {
  return gru_cell(tape, params_.decoder_gru, ops::concat(tape, {c, h1}), h2_prev);
}

template <typename T>
Tensor<T> IvqaModel<T>::output_distribution(Tape<T>& tape, const Tensor<T>& h2) const {
  return ops::softmax(tape, ops::add(tape, ops::matmul(tape, params_.W_dec, h2), params_.b_dec));
}

template <typename T>
Conditioning<T> IvqaModel<T>::condition(Tape<T>& tape, const features::ImageFeatures& image,
                                        std::span<const TokenId> answer) const {
  if (image.k != cfg_.k || image.d_v != cfg_.d_v) {
    throw DimensionError("image " + image.image_id + " has k=" + std::to_string(image.k) +
                         ", d_v=" + std::to_string(image.d_v) + "; model expects k=" +
                         std::to_string(cfg_.k) + ", d_v=" + std::to_string(cfg_.d_v));
  }
  Conditioning<T> c;
  c.V = Tensor<T>::matrix(image.k, image.d_v, to_precision<T>(image.visual));
  if (cfg_.ablate_semantic) {
    c.E = c.V;
  } else {
    if (image.d_s != cfg_.semantic_dim() || image.enhanced.size() != image.k * cfg_.enhanced_dim()) {
      throw DimensionError("image " + image.image_id + " has semantic size " + std::to_string(image.d_s) +
                           "; model expects " + std::to_string(cfg_.semantic_dim()));
    }
    c.S = Tensor<T>::matrix(image.k, image.d_s, to_precision<T>(image.semantic));
    c.E = Tensor<T>::matrix(image.k, cfg_.enhanced_dim(), to_precision<T>(image.enhanced));
  }
  c.answer = encode_answer(tape, answer);
  c.guide = guiding_context(tape, c.V, c.S, c.answer);
  c.Z = mfb_fuse(tape, c.E, c.answer);
  return c;
}

template <typename T>
DecoderState<T> IvqaModel<T>::initial_state() const {
  return {Tensor<T>::zeros({cfg_.hidden}), Tensor<T>::zeros({cfg_.decoder_hidden}), 0};
}

template <typename T>
StepResult<T> IvqaModel<T>::step(Tape<T>& tape, const Conditioning<T>& cond, const DecoderState<T>& state,
                                 TokenId prev) const {
  const auto M = embed_word(tape, prev);
  StepResult<T> out;
  out.state.h1 = encoder_step(tape, M, state.h2, cond.guide.att0, state.h1, cond.answer);
  const auto dyn = dynamic_attention(tape, cond.Z, cond.V, out.state.h1);
  out.state.h2 = decoder_step(tape, dyn.context, out.state.h1, state.h2);
  out.state.t = state.t + 1;
  out.probs = output_distribution(tape, out.state.h2);
  out.beta = dyn.beta;
  return out;
}

template <typename T>
TeacherForced<T> IvqaModel<T>::forward_teacher_forced(Tape<T>& tape, const text::DatasetInstance& instance,
                                                      const features::ImageFeatures& image) const {
  if (instance.question_length == 0 || instance.question_length > instance.question_tokens.size()) {
    throw std::invalid_argument("instance for image " + instance.image_id + " has no question tokens");
  }
  TeacherForced<T> out;
  out.conditioning = condition(tape, image, instance.answer_tokens);
  auto state = initial_state();
  TokenId prev = text::kStartId;
  for (TokenId gold : instance.question()) {
    check_token(gold);
    auto res = step(tape, out.conditioning, state, prev);
    const std::vector<double> beta(res.beta.values().begin(), res.beta.values().end());
    out.trace.push_back(make_trace_step(res.state.t, gold, beta));
    out.distributions.push_back(res.probs);
    state = std::move(res.state);
    prev = gold;
  }
  return out;
}

template <typename T>
TeacherForced<T> IvqaModel<T>::forward_teacher_forced(Tape<T>& tape, const text::DatasetInstance& instance,
                                                      const FeatureStore& store) const {
  return forward_teacher_forced(tape, instance, find_features(store, instance.image_id));
}

template struct ModelParameters<float>;
template struct ModelParameters<double>;
template ModelParameters<float> init_parameters<float>(const ModelConfig&, const text::EmbeddingTable&,
                                                       const InitOptions&);
template ModelParameters<double> init_parameters<double>(const ModelConfig&, const text::EmbeddingTable&,
                                                         const InitOptions&);
template Tensor<float> gru_cell(Tape<float>&, const GruParams<float>&, const Tensor<float>&,
                                const Tensor<float>&);
template Tensor<double> gru_cell(Tape<double>&, const GruParams<double>&, const Tensor<double>&,
                                 const Tensor<double>&);
template class IvqaModel<float>;
template class IvqaModel<double>;

}  // namespace ivqa::model
