#include "ivqa/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ivqa/errors.hpp"
#include "ivqa/training.hpp"
#include "json.hpp"

namespace ivqa::inference {

DecodeOptions DecodeOptions::for_vocab(const text::Vocabulary& vocab) {
  DecodeOptions opts;
  opts.stop_token = vocab.find("?");
  return opts;
}

namespace {

double log_prob(double p) { return std::log(std::max(p, training::kProbabilityFloor)); }

std::size_t resolve_max_len(const model::ModelConfig& cfg, const DecodeOptions& opts) {
  return opts.max_len == 0 ? cfg.max_question_len : opts.max_len;
}

bool masked(TokenId id, const DecodeOptions& opts) {
  return id == text::kPadId || id == text::kStartId || (opts.mask_unk && id == text::kUnkId);
}

/// Unmasked ids ordered by descending probability, lowest id first on ties.
template <typename T>
std::vector<TokenId> ranked_tokens(std::span<const T> probs, const DecodeOptions& opts, std::size_t limit) {
  std::vector<TokenId> ids;
  for (TokenId id = 0; id < probs.size(); ++id)
    if (!masked(id, opts)) ids.push_back(id);
  limit = std::min(limit, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(limit), ids.end(),
                    [&](TokenId a, TokenId b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
  ids.resize(limit);
  return ids;
}

template <typename T>
struct Hypothesis {
  GenerationResult result;
  model::DecoderState<T> state;
  bool finished = false;
};

}  // namespace

template <typename T>
GenerationResult greedy_decode(const model::IvqaModel<T>& model, const features::ImageFeatures& image,
                               std::span<const TokenId> answer, const DecodeOptions& opts) {
  const std::size_t max_len = resolve_max_len(model.config(), opts);
  auto tape = Tape<T>::inference();
  const auto cond = model.condition(tape, image, answer);
  auto state = model.initial_state();
  GenerationResult out;
  TokenId prev = text::kStartId;
  for (std::size_t t = 1; t <= max_len; ++t) {
    auto step = model.step(tape, cond, state, prev);
    const auto probs = step.probs.values();
    std::optional<TokenId> best;
    for (TokenId id = 0; id < probs.size(); ++id) {
      if (!masked(id, opts) && (!best || probs[id] > probs[*best])) best = id;
    }
    out.tokens.push_back(*best);
    out.logprob += log_prob(static_cast<double>(probs[*best]));
    const std::vector<double> beta(step.beta.values().begin(), step.beta.values().end());
    out.trace.push_back(model::make_trace_step(t, *best, beta));
    state = std::move(step.state);
    prev = *best;
    if (opts.stop_token && *best == *opts.stop_token) {
      out.stopped = true;
      break;
    }
  }
  return out;
}

template <typename T>
std::vector<GenerationResult> beam_decode(const model::IvqaModel<T>& model, const features::ImageFeatures& image,
                                          std::span<const TokenId> answer, std::size_t beam, std::size_t top_n,
                                          const DecodeOptions& opts) {
  if (beam == 0) throw std::invalid_argument("beam size must be at least 1");
  if (top_n == 0) throw std::invalid_argument("top_n must be at least 1");
  const std::size_t max_len = resolve_max_len(model.config(), opts);
  auto tape = Tape<T>::inference();
  const auto cond = model.condition(tape, image, answer);

  std::vector<Hypothesis<T>> live{{{}, model.initial_state(), false}};
  for (std::size_t t = 1; t <= max_len; ++t) {
    std::vector<Hypothesis<T>> pool;
    for (auto& hyp : live) {
      if (hyp.finished) {
        pool.push_back(std::move(hyp));
        continue;
      }
      const TokenId prev = hyp.result.tokens.empty() ? text::kStartId : hyp.result.tokens.back();
      auto step = model.step(tape, cond, hyp.state, prev);
      const auto probs = step.probs.values();
      std::vector<double> beta(step.beta.values().begin(), step.beta.values().end());
      for (TokenId id : ranked_tokens(probs, opts, beam)) {
        Hypothesis<T> next{hyp.result, step.state, false};
        next.result.tokens.push_back(id);
        next.result.logprob += log_prob(static_cast<double>(probs[id]));
        next.result.trace.push_back(model::make_trace_step(t, id, beta));
        next.result.stopped = opts.stop_token && id == *opts.stop_token;
        next.finished = next.result.stopped || t == max_len;
        pool.push_back(std::move(next));
      }
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const auto& a, const auto& b) { return a.result.logprob > b.result.logprob; });
    if (pool.size() > beam) pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(beam), pool.end());
    live = std::move(pool);
    if (std::all_of(live.begin(), live.end(), [](const auto& h) { return h.finished; })) break;
  }

  std::vector<GenerationResult> out;
  for (auto& hyp : live) {
    if (out.size() == top_n) break;
    out.push_back(std::move(hyp.result));
  }
  return out;
}

template <typename T>
double score_sequence(const model::IvqaModel<T>& model, const features::ImageFeatures& image,
                      std::span<const TokenId> answer, std::span<const TokenId> tokens) {
  const auto& cfg = model.config();
  if (tokens.size() > cfg.max_question_len) {
    throw std::invalid_argument("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max length " +
                                std::to_string(cfg.max_question_len));
  }
  for (TokenId id : tokens) {
    if (id >= cfg.vocab_size) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  if (tokens.empty()) return 0.0;
  auto tape = Tape<T>::inference();
  const auto cond = model.condition(tape, image, answer);
  auto state = model.initial_state();
  TokenId prev = text::kStartId;
  double total = 0.0;
  for (TokenId id : tokens) {
    auto step = model.step(tape, cond, state, prev);
    total += log_prob(static_cast<double>(step.probs.values()[id]));
    state = std::move(step.state);
    prev = id;
  }
  return total;
}

std::vector<GenerationRequest> load_requests(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path + " for reading");
  std::vector<GenerationRequest> out;
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
    GenerationRequest req;
    for (auto [key, field] : {std::pair{"image_id", &req.image_id}, std::pair{"answer", &req.answer}}) {
      if (!obj.is_object() || !obj.contains(key) || !obj[key].is_string()) {
        throw ParseError(path, lineno, std::string("missing string field \"") + key + "\"");
      }
      *field = obj[key].get<std::string>();
    }
    out.push_back(std::move(req));
  }
  return out;
}

std::vector<TokenId> encode_answer(const std::string& answer, const text::Vocabulary& vocab, std::size_t answer_len) {
  return text::encode_sequence(text::tokenize(answer), answer_len, vocab).ids;
}

std::string generation_line(const GenerationRequest& request, const std::string& question, double logprob) {
  nlohmann::ordered_json obj;
  obj["image_id"] = request.image_id;
  obj["answer"] = request.answer;
  obj["question"] = question;
  obj["logprob"] = logprob;
  return obj.dump();
}

namespace {

void put_step(nlohmann::ordered_json& obj, const model::TraceStep& step, const text::Vocabulary& vocab) {
  obj["t"] = step.t;
  obj["token"] = vocab.token(step.token);
  obj["beta"] = step.beta;
  obj["top1"] = step.top1;
  obj["top2"] = step.top2;
}

}  // namespace

std::string trace_line(const model::TraceStep& step, const text::Vocabulary& vocab) {
  nlohmann::ordered_json obj;
  put_step(obj, step, vocab);
  return obj.dump();
}

std::string trace_line(const GenerationRequest& request, std::size_t rank, const model::TraceStep& step,
                       const text::Vocabulary& vocab) {
  nlohmann::ordered_json obj;
  obj["image_id"] = request.image_id;
  obj["answer"] = request.answer;
  obj["rank"] = rank;
  put_step(obj, step, vocab);
  return obj.dump();
}

#define IVQA_INSTANTIATE(T)                                                                                       \
  template GenerationResult greedy_decode<T>(const model::IvqaModel<T>&, const features::ImageFeatures&,         \
                                             std::span<const TokenId>, const DecodeOptions&);                   \
  template std::vector<GenerationResult> beam_decode<T>(const model::IvqaModel<T>&,                             \
                                                        const features::ImageFeatures&, std::span<const TokenId>, \
                                                        std::size_t, std::size_t, const DecodeOptions&);         \
  template double score_sequence<T>(const model::IvqaModel<T>&, const features::ImageFeatures&,                  \
                                    std::span<const TokenId>, std::span<const TokenId>);

IVQA_INSTANTIATE(float)
IVQA_INSTANTIATE(double)

}  // namespace ivqa::inference
