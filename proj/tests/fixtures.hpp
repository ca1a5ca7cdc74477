#pragma once

#include <string>
#include <vector>

#include "ivqa/features.hpp"
#include "ivqa/model.hpp"
#include "ivqa/ops.hpp"
#include "ivqa/random.hpp"
#include "ivqa/synth.hpp"
#include "ivqa/text.hpp"

namespace ivqa::fixtures {

/// H = N_h = 8, N = 6, k = 3, d_v = 5, d_e = 4, N_f = 12, j = 3, N_w = 20.
inline model::ModelConfig tiny_config(bool ablate = false) {
  model::ModelConfig c;
  c.hidden = c.decoder_hidden = 8;
  c.attention = 6;
  c.k = 3;
  c.d_v = 5;
  c.d_e = 4;
  c.mfb_expand = 12;
  c.mfb_window = 3;
  c.vocab_size = 20;
  c.ablate_semantic = ablate;
  return c;
}

/// Reserved tokens, "?", then w4, w5, ...
inline text::Vocabulary numbered_vocab(std::size_t size) {
  std::vector<std::string> tokens{"<pad>", "<start>", "<unk>", "?"};
  for (std::size_t i = tokens.size(); i < size; ++i) tokens.push_back("w" + std::to_string(i));
  return text::Vocabulary(tokens);
}

inline text::EmbeddingTable embeddings_for(const model::ModelConfig& cfg, std::uint64_t seed = 3) {
  return text::random_embeddings(numbered_vocab(cfg.vocab_size), cfg.d_e, seed);
}

/// Random normal region features with labels drawn from the vocabulary.
inline features::ImageFeatures random_image(Rng& rng, const model::ModelConfig& cfg,
                                            const text::EmbeddingTable& emb,
                                            const std::string& id = "img") {
  features::RegionalFeatureSet rfs{id, cfg.k, cfg.d_v, {}, {}, {}};
  for (std::size_t i = 0; i < cfg.k * cfg.d_v; ++i) rfs.visual.push_back(rng.normal());
  const auto& vocab = emb.vocab();
  for (std::size_t i = 0; i < cfg.k; ++i) {
    auto pick = [&] { return vocab.token(static_cast<text::TokenId>(3 + rng.below(vocab.size() - 3))); };
    rfs.attributes.push_back(pick());
    rfs.objects.push_back(pick() + " " + pick());
  }
  return features::prepare_image(rfs, emb, cfg.ablate_semantic);
}

inline std::vector<text::TokenId> random_tokens(Rng& rng, const model::ModelConfig& cfg, std::size_t n) {
  std::vector<text::TokenId> out(n);
  for (auto& t : out) t = static_cast<text::TokenId>(3 + rng.below(cfg.vocab_size - 3));
  return out;
}

inline text::DatasetInstance random_instance(Rng& rng, const model::ModelConfig& cfg, const std::string& image_id,
                                             std::size_t question_len) {
  text::DatasetInstance inst;
  inst.image_id = image_id;
  inst.answer_tokens = random_tokens(rng, cfg, cfg.answer_len);
  if (rng.below(2)) inst.answer_tokens.back() = text::kPadId;
  inst.question_tokens = random_tokens(rng, cfg, question_len);
  inst.question_length = question_len;
  inst.question_tokens.resize(cfg.max_question_len, text::kPadId);
  return inst;
}

template <typename T>
model::IvqaModel<T> random_model(const model::ModelConfig& cfg, std::uint64_t seed, double matrix_scale = 0.5,
                                 double bias_scale = 0.2) {
  model::InitOptions opts;
  opts.seed = seed;
  opts.matrix_scale = matrix_scale;
  opts.bias_scale = bias_scale;
  return model::IvqaModel<T>(cfg, model::init_parameters<T>(cfg, embeddings_for(cfg), opts));
}

template <typename T>
void fill(Tensor<T>& t, T value) {
  for (auto& v : t.mutable_values()) v = value;
}

/// -(1/T) sum_t log p_t[gold_t], built directly from ops.
template <typename T>
Tensor<T> nll(Tape<T>& tape, const std::vector<Tensor<T>>& dists, std::span<const text::TokenId> gold) {
  Tensor<T> total;
  for (std::size_t t = 0; t < dists.size(); ++t) {
    auto term = ops::log_clamped(tape, ops::pick(tape, dists[t], gold[t]), T(1e-12));
    total = t == 0 ? term : ops::add(tape, total, term);
  }
  return ops::scale(tape, total, T(-1) / static_cast<T>(dists.size()));
}

struct SynthSetup {
  model::ModelConfig cfg;
  text::EmbeddingTable emb;
  std::vector<text::DatasetInstance> data;
  model::FeatureStore store;
};

/// Synthetic dataset encoded for a small model sized to it.
inline SynthSetup synth_setup(const synth::SynthSpec& spec, bool ablate = false, std::size_t hidden = 16) {
  auto raw = synth::generate(spec);
  auto build = text::build_vocabulary(raw.instances, 1000);
  model::ModelConfig cfg;
  cfg.hidden = cfg.decoder_hidden = hidden;
  cfg.attention = hidden;
  cfg.k = spec.k;
  cfg.d_v = spec.d_v;
  cfg.d_e = 8;
  cfg.mfb_expand = 32;
  cfg.mfb_window = 4;
  cfg.vocab_size = build.vocab.size();
  cfg.ablate_semantic = ablate;
  SynthSetup out{cfg, text::random_embeddings(build.vocab, cfg.d_e, spec.seed), {}, {}};
  for (const auto& r : build.kept) out.data.push_back(text::DatasetInstance::encode(r, out.emb.vocab()));
  for (const auto& img : raw.images) out.store.emplace(img.image_id, features::prepare_image(img, out.emb, ablate));
  return out;
}

}  // namespace ivqa::fixtures
