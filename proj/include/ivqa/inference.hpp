#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ivqa/features.hpp"
#include "ivqa/model.hpp"
#include "ivqa/text.hpp"

namespace ivqa::inference {

using text::TokenId;

struct DecodeOptions {
  std::optional<TokenId> stop_token;  // "?"; decoding also ends at max_len
  std::size_t max_len = 0;            // 0 means the model's max_question_len
  bool mask_unk = true;               // <pad> and <start> are always masked

  /// Stop token looked up from the vocabulary's "?".
  static DecodeOptions for_vocab(const text::Vocabulary& vocab);
};

struct GenerationResult {
  std::vector<TokenId> tokens;
  double logprob = 0.0;  // sum of log p over the generated tokens
  model::AttentionTrace trace;
  bool stopped = false;  // ended on the stop token rather than max_len
};

/// Repeatedly takes the most probable unmasked token, lowest id on ties.
template <typename T>
GenerationResult greedy_decode(const model::IvqaModel<T>& model, const features::ImageFeatures& image,
                               std::span<const TokenId> answer, const DecodeOptions& opts);

/// Length-unnormalized beam search. Each live hypothesis proposes its `beam`
/// most probable unmasked tokens; finished hypotheses keep competing on their
/// frozen scores. Returns up to `top_n` finished hypotheses, best first.
/// With beam = 1 the result equals greedy_decode exactly.
template <typename T>
std::vector<GenerationResult> beam_decode(const model::IvqaModel<T>& model, const features::ImageFeatures& image,
                                          std::span<const TokenId> answer, std::size_t beam, std::size_t top_n,
                                          const DecodeOptions& opts);

/// sum_t log max(p_t[token_t], 1e-12) with the given tokens fed back.
template <typename T>
double score_sequence(const model::IvqaModel<T>& model, const features::ImageFeatures& image,
                      std::span<const TokenId> answer, std::span<const TokenId> tokens);

// ---------------------------------------------------------------- file formats

struct GenerationRequest {
  std::string image_id;
  std::string answer;
};

/// JSON Lines {"image_id", "answer"}; ParseError with the line number.
std::vector<GenerationRequest> load_requests(const std::string& path);

/// Answer ids padded to `answer_len`.
std::vector<TokenId> encode_answer(const std::string& answer, const text::Vocabulary& vocab, std::size_t answer_len);

/// {"image_id","answer","question","logprob"}
std::string generation_line(const GenerationRequest& request, const std::string& question, double logprob);

/// {"t","token","beta","top1","top2"}
std::string trace_line(const model::TraceStep& step, const text::Vocabulary& vocab);
/// {"image_id","answer","rank","t","token","beta","top1","top2"}; rank is 1-based.
std::string trace_line(const GenerationRequest& request, std::size_t rank, const model::TraceStep& step,
                       const text::Vocabulary& vocab);

}  // namespace ivqa::inference
