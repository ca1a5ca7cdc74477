#include "ivqa/text.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "ivqa/errors.hpp"
#include "ivqa/random.hpp"
#include "json.hpp"

namespace ivqa::text {

namespace {

bool is_split_char(char c) { return c == '?' || c == ',' || c == '.' || c == '!' || c == '\''; }

bool is_reserved(std::string_view token) {
  return token == kPadToken || token == kStartToken || token == kUnkToken;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path + " for reading");
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  return out;
}

std::string require_string(const nlohmann::json& obj, const char* key, const std::string& path,
                           std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) {
    throw ParseError(path, line, std::string("missing string field \"") + key + "\"");
  }
  return it->get<std::string>();
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_split_char(c)) {
      flush();
      tokens.emplace_back(1, c);
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return tokens;
}

std::string join(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary()
    : Vocabulary({std::string(kPadToken), std::string(kStartToken), std::string(kUnkToken)}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 3 || tokens_[kPadId] != kPadToken || tokens_[kStartId] != kStartToken ||
      tokens_[kUnkId] != kUnkToken) {
    throw std::invalid_argument("vocabulary must start with <pad>, <start>, <unk>");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw std::invalid_argument("empty token at id " + std::to_string(i));
    auto [it, fresh] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!fresh) throw std::invalid_argument("duplicate vocabulary token \"" + tokens_[i] + "\"");
  }
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnkId); }

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

Vocabulary load_vocabulary(const std::string& path) {
  auto in = open_in(path);
  std::vector<std::string> tokens;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw ParseError(path, lineno, "empty vocabulary line");
    tokens.push_back(line);
  }
  try {
    return Vocabulary(std::move(tokens));
  } catch (const std::invalid_argument& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void save_vocabulary(const std::string& path, const Vocabulary& vocab) {
  auto out = open_out(path);
  for (const auto& t : vocab.tokens()) out << t << '\n';
  if (!out) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------- dataset files

std::vector<RawInstance> load_dataset(const std::string& path) {
  auto in = open_in(path);
  std::vector<RawInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path, lineno, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(path, lineno, "expected a JSON object");
    out.push_back({require_string(obj, "image_id", path, lineno),
                   require_string(obj, "answer", path, lineno),
                   require_string(obj, "question", path, lineno)});
  }
  return out;
}

std::string dataset_line(const RawInstance& instance) {
  nlohmann::ordered_json obj;
  obj["image_id"] = instance.image_id;
  obj["answer"] = instance.answer;
  obj["question"] = instance.question;
  return obj.dump();
}

void save_dataset(const std::string& path, std::span<const RawInstance> instances) {
  auto out = open_out(path);
  for (const auto& inst : instances) out << dataset_line(inst) << '\n';
  if (!out) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------- vocabulary building

VocabularyBuild build_vocabulary(std::span<const RawInstance> dataset, std::size_t answer_top) {
  if (dataset.empty()) throw std::invalid_argument("build_vocabulary: empty dataset");
  if (answer_top == 0) throw std::invalid_argument("build_vocabulary: answer_top must be >= 1");

  std::vector<std::string> normalized;
  normalized.reserve(dataset.size());
  std::map<std::string, std::size_t> answer_counts;
  for (const auto& inst : dataset) {
    normalized.push_back(join(tokenize(inst.answer)));
    ++answer_counts[normalized.back()];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(answer_counts.begin(), answer_counts.end());
  // std::map iteration is lexicographic, so a stable sort on count keeps ties in that order
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > answer_top) ranked.resize(answer_top);
  std::unordered_map<std::string, bool> top;
  for (const auto& [answer, count] : ranked) top.emplace(answer, true);

  VocabularyBuild result;
  std::map<std::string, std::size_t> token_counts;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (!top.count(normalized[i])) continue;
    result.kept.push_back(dataset[i]);
    for (const auto* text : {&dataset[i].question, &dataset[i].answer})
      for (auto& tok : tokenize(*text))
        if (!is_reserved(tok)) ++token_counts[tok];
  }
  token_counts.try_emplace(std::string(kQuestionMark), 0);

  std::vector<std::pair<std::string, std::size_t>> words(token_counts.begin(), token_counts.end());
  std::stable_sort(words.begin(), words.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{std::string(kPadToken), std::string(kStartToken),
                                  std::string(kUnkToken)};
  for (auto& [w, c] : words) tokens.push_back(w);
  result.vocab = Vocabulary(std::move(tokens));
  return result;
}

// ---------------------------------------------------------------- encoding

EncodedSequence encode_sequence(std::span<const std::string> tokens, std::size_t target_len,
                                const Vocabulary& vocab) {
  if (target_len == 0) throw std::invalid_argument("encode_sequence: target_len must be >= 1");
  EncodedSequence seq;
  seq.length = std::min(tokens.size(), target_len);
  seq.ids.assign(target_len, kPadId);
  for (std::size_t i = 0; i < seq.length; ++i) seq.ids[i] = vocab.id(tokens[i]);
  return seq;
}

std::vector<std::string> decode_sequence(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (TokenId id : ids) {
    if (id == kPadId) break;
    out.push_back(vocab.token(id));
  }
  return out;
}

DatasetInstance DatasetInstance::encode(const RawInstance& raw, const Vocabulary& vocab,
                                        std::size_t answer_len, std::size_t question_len) {
  DatasetInstance inst;
  inst.image_id = raw.image_id;
  auto answer = encode_sequence(tokenize(raw.answer), answer_len, vocab);
  auto question = encode_sequence(tokenize(raw.question), question_len, vocab);
  if (question.length == 0) {
    throw std::invalid_argument("instance for image " + raw.image_id + " has an empty question");
  }
  inst.answer_tokens = std::move(answer.ids);
  inst.question_tokens = std::move(question.ids);
  inst.question_length = question.length;
  return inst;
}

// ---------------------------------------------------------------- embeddings

EmbeddingTable::EmbeddingTable(Vocabulary vocab, std::size_t dim, std::vector<double> rows)
    : vocab_(std::move(vocab)), dim_(dim), rows_(std::move(rows)) {
  if (dim_ == 0) throw std::invalid_argument("embedding dimension must be positive");
  if (rows_.size() != vocab_.size() * dim_) {
    throw std::invalid_argument("embedding matrix does not match vocabulary size x dimension");
  }
}

std::span<const double> EmbeddingTable::row(TokenId id) const {
  if (id >= vocab_.size()) throw std::out_of_range("embedding row " + std::to_string(id));
  return std::span(rows_).subspan(std::size_t{id} * dim_, dim_);
}

std::span<const double> EmbeddingTable::lookup(std::string_view token) const {
  return row(vocab_.id(token));
}

namespace {

EmbeddingTable fill_embeddings(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed,
                               const std::unordered_map<std::string, std::vector<double>>& file) {
  if (dim == 0) throw std::invalid_argument("embedding dimension must be positive");
  Rng rng(seed);
  std::vector<double> rows(vocab.size() * dim, 0.0);
  for (TokenId id = 0; id < vocab.size(); ++id) {
    if (id == kPadId) continue;
    double* dst = rows.data() + std::size_t{id} * dim;
    auto it = id >= kFirstWordId ? file.find(vocab.token(id)) : file.end();
    if (it != file.end()) {
      std::copy(it->second.begin(), it->second.end(), dst);
    } else {
      for (std::size_t c = 0; c < dim; ++c) dst[c] = rng.uniform(-0.1, 0.1);
    }
  }
  return EmbeddingTable(vocab, dim, std::move(rows));
}

}  // namespace

EmbeddingTable load_embeddings(const std::string& path, const Vocabulary& vocab, std::size_t dim,
                               std::uint64_t seed) {
  auto in = open_in(path);
  std::unordered_map<std::string, std::vector<double>> file;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string token;
    fields >> token;
    std::vector<double> vec;
    std::string field;
    while (fields >> field) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw ParseError(path, lineno, "not a number: \"" + field + "\"");
      }
      vec.push_back(v);
    }
    if (vec.size() != dim) {
      throw ParseError(path, lineno,
                       "expected " + std::to_string(dim) + " values, found " + std::to_string(vec.size()));
    }
    if (vocab.contains(token)) file.try_emplace(token, std::move(vec));
  }
  return fill_embeddings(vocab, dim, seed, file);
}

EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, std::uint64_t seed) {
  return fill_embeddings(vocab, dim, seed, {});
}

}  // namespace ivqa::text
