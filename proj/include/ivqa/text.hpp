#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ivqa::text {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kStartId = 1;
inline constexpr TokenId kUnkId = 2;
inline constexpr TokenId kFirstWordId = 3;

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kStartToken = "<start>";
inline constexpr std::string_view kUnkToken = "<unk>";
inline constexpr std::string_view kQuestionMark = "?";

inline constexpr std::size_t kQuestionLength = 19;
inline constexpr std::size_t kAnswerLength = 3;

/// Lowercases, splits on whitespace and splits off ? , . ! ' as tokens.
std::vector<std::string> tokenize(std::string_view text);

/// Space-joined tokens.
std::string join(std::span<const std::string> tokens);

/// Token table with reserved ids 0 = <pad>, 1 = <start>, 2 = <unk>.
class Vocabulary {
 public:
  /// Reserved tokens only.
  Vocabulary();
  /// `tokens[i]` gets id i. The first three must be the reserved tokens and
  /// all tokens must be distinct.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(std::string_view token) const;
  /// Id of `token`, or <unk>.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// One token per line; line number (0-based) is the id.
Vocabulary load_vocabulary(const std::string& path);
void save_vocabulary(const std::string& path, const Vocabulary& vocab);

/// A dataset line before encoding.
struct RawInstance {
  std::string image_id;
  std::string answer;
  std::string question;

  friend bool operator==(const RawInstance&, const RawInstance&) = default;
};

/// JSON Lines: {"image_id": ..., "answer": ..., "question": ...}
std::vector<RawInstance> load_dataset(const std::string& path);
void save_dataset(const std::string& path, std::span<const RawInstance> instances);
std::string dataset_line(const RawInstance& instance);

struct VocabularyBuild {
  Vocabulary vocab;
  std::vector<RawInstance> kept;
};

/// Keeps instances whose answer is among the `answer_top` most frequent
/// answers and builds the vocabulary over their questions and answers, most
/// frequent token first, ties in lexicographic order.
VocabularyBuild build_vocabulary(std::span<const RawInstance> dataset, std::size_t answer_top);

struct EncodedSequence {
  std::vector<TokenId> ids;  // exactly target_len entries
  std::size_t length = 0;    // real tokens before padding
};

/// Maps tokens to ids (<unk> for unknown), trims to target_len and pads with <pad>.
EncodedSequence encode_sequence(std::span<const std::string> tokens, std::size_t target_len,
                                const Vocabulary& vocab);

/// Tokens of the ids up to the first <pad>.
std::vector<std::string> decode_sequence(std::span<const TokenId> ids, const Vocabulary& vocab);

struct DatasetInstance {
  std::string image_id;
  std::vector<TokenId> answer_tokens;    // answer_len entries, pad-suffixed
  std::vector<TokenId> question_tokens;  // question_len entries, pad-suffixed
  std::size_t question_length = 0;       // T_i

  std::span<const TokenId> question() const {
    return std::span(question_tokens).first(question_length);
  }

  /// Encodes a raw line; throws std::invalid_argument when the question has no tokens.
  static DatasetInstance encode(const RawInstance& raw, const Vocabulary& vocab,
                                std::size_t answer_len = kAnswerLength,
                                std::size_t question_len = kQuestionLength);
};

/// Word vectors for every vocabulary id.
class EmbeddingTable {
 public:
  EmbeddingTable(Vocabulary vocab, std::size_t dim, std::vector<double> rows);

  std::size_t dim() const { return dim_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::span<const double> row(TokenId id) const;
  /// Vector for a token; <unk>'s vector when the token is not in the vocabulary.
  std::span<const double> lookup(std::string_view token) const;
  /// Row-major [vocab size x dim] matrix.
  const std::vector<double>& matrix() const { return rows_; }

 private:
  Vocabulary vocab_;
  std::size_t dim_;
  std::vector<double> rows_;
};

/// Reads a whitespace text embedding file ("token f1 ... f_d" per line).
/// Vocabulary tokens missing from the file, and the reserved tokens other than
/// <pad>, get uniform(-0.1, 0.1) vectors from the seeded generator; <pad> is zero.
EmbeddingTable load_embeddings(const std::string& path, const Vocabulary& vocab, std::size_t dim,
                               std::uint64_t seed);

/// Same initialization rule with no file.
EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed);

}  // namespace ivqa::text
