#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ivqa::metrics {

using Tokens = std::vector<std::string>;

struct EvalPair {
  Tokens hypothesis;
  std::vector<Tokens> references;  // at least one
};

struct BleuStats {
  std::vector<double> precisions;  // clipped p_1..p_max_n; 0 when no n-grams
  double brevity_penalty = 0.0;
};

BleuStats bleu_stats(std::span<const EvalPair> pairs, std::size_t max_n = 4);

/// Corpus BLEU-1..max_n: clipped n-gram precisions pooled over the corpus,
/// brevity penalty from the closest reference length per pair (shorter on
/// ties), no smoothing. A zero precision zeroes every higher order.
std::vector<double> bleu_corpus(std::span<const EvalPair> pairs, std::size_t max_n = 4);

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

inline constexpr double kRougeBeta = 1.2;

/// LCS-based F-measure against the best reference.
double rouge_l_pair(const EvalPair& pair, double beta = kRougeBeta);
/// Mean of rouge_l_pair over the corpus.
double rouge_l(std::span<const EvalPair> pairs, double beta = kRougeBeta);

/// 10 x mean over n = 1..4 of the mean per-pair TF-IDF cosine, with
/// IDF(g) = log(N / (1 + df(g))) over the N pairs' reference sets. Requires at
/// least two distinct references.
double cider(std::span<const EvalPair> pairs);

struct EvalReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t n_pairs = 0;

  /// {"bleu1".."bleu4", "rouge_l", "cider", "n_pairs"}
  std::string to_json() const;
};

EvalReport evaluate(std::span<const EvalPair> pairs);

/// Pairs generated questions with gold questions on (image_id, answer). Gold
/// lines sharing a key become multiple references; the first generated line
/// per key is the hypothesis. Throws ParseError listing keys present in only
/// one of the files.
std::vector<EvalPair> align_files(const std::string& generated_path, const std::string& gold_path);

EvalReport evaluate_corpus(const std::string& generated_path, const std::string& gold_path);

}  // namespace ivqa::metrics
