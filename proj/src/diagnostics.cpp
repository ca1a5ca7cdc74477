#include "ivqa/diagnostics.hpp"

#include "ivqa/features.hpp"
#include "ivqa/grad_check.hpp"
#include "ivqa/random.hpp"
#include "ivqa/text.hpp"
#include "ivqa/training.hpp"

namespace ivqa::diagnostics {

model::ModelConfig gradcheck_config(bool ablate) {
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

namespace {

text::Vocabulary numbered_vocab(std::size_t size) {
  std::vector<std::string> tokens{"<pad>", "<start>", "<unk>", "?"};
  for (std::size_t i = tokens.size(); i < size; ++i) tokens.push_back("w" + std::to_string(i));
  return text::Vocabulary(tokens);
}

text::TokenId random_word(Rng& rng, std::size_t vocab_size) {
  return static_cast<text::TokenId>(text::kFirstWordId + rng.below(vocab_size - text::kFirstWordId));
}

}  // namespace

std::vector<TensorCheck> model_gradient_check(const model::ModelConfig& cfg, const GradCheckDraw& draw, double h) {
  cfg.validate();
  if (draw.question_len == 0 || draw.question_len > cfg.max_question_len) {
    throw ConfigError("gradient-check question length must be in 1.." + std::to_string(cfg.max_question_len));
  }

  Rng emb_rng(draw.seed);
  std::vector<double> rows(cfg.vocab_size * cfg.d_e);
  for (auto& x : rows) x = draw.embedding_scale * emb_rng.normal();
  std::fill(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(cfg.d_e), 0.0);
  const text::EmbeddingTable emb(numbered_vocab(cfg.vocab_size), cfg.d_e, rows);

  Rng rng(draw.seed + 100);
  features::RegionalFeatureSet rfs{"gradcheck", cfg.k, cfg.d_v, {}, {}, {}};
  for (std::size_t i = 0; i < cfg.k * cfg.d_v; ++i) rfs.visual.push_back(rng.normal());
  for (std::size_t i = 0; i < cfg.k; ++i) {
    rfs.attributes.push_back(emb.vocab().token(random_word(rng, cfg.vocab_size)));
    rfs.objects.push_back(emb.vocab().token(random_word(rng, cfg.vocab_size)) + " " +
                          emb.vocab().token(random_word(rng, cfg.vocab_size)));
  }
  const auto image = features::prepare_image(rfs, emb, cfg.ablate_semantic);

  text::DatasetInstance inst;
  inst.image_id = rfs.image_id;
  for (std::size_t i = 0; i < cfg.answer_len; ++i) inst.answer_tokens.push_back(random_word(rng, cfg.vocab_size));
  if (rng.below(2)) inst.answer_tokens.back() = text::kPadId;
  for (std::size_t i = 0; i < draw.question_len; ++i) inst.question_tokens.push_back(random_word(rng, cfg.vocab_size));
  inst.question_length = draw.question_len;
  inst.question_tokens.resize(cfg.max_question_len, text::kPadId);

  model::InitOptions opts;
  opts.seed = draw.seed;
  opts.matrix_scale = draw.matrix_scale;
  opts.bias_scale = draw.bias_scale;
  model::IvqaModel<double> m(cfg, model::init_parameters<double>(cfg, emb, opts));

  auto named = m.params().named(cfg);
  std::vector<Tensor<double>> wrt;
  for (auto& [name, t] : named) wrt.push_back(t);
  const auto report = grad_check(
      [&](Tape<double>& tape) {
        auto out = m.forward_teacher_forced(tape, inst, image);
        return training::sequence_loss<double>(tape, out.distributions, inst.question());
      },
      wrt, h);

  std::vector<TensorCheck> out;
  for (std::size_t i = 0; i < named.size(); ++i) out.push_back({named[i].first, report.max_rel_error[i]});
  return out;
}

}  // namespace ivqa::diagnostics
