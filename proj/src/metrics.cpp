#include "ivqa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "ivqa/errors.hpp"
#include "ivqa/text.hpp"
#include "json.hpp"

namespace ivqa::metrics {

namespace {

using Counts = std::map<std::string, double>;

Counts ngrams(std::span<const std::string> tokens, std::size_t n) {
  Counts out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (std::size_t j = 1; j < n; ++j) key += '\x1f' + tokens[i + j];
    out[key] += 1.0;
  }
  return out;
}

void check_corpus(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("empty evaluation corpus");
  for (const auto& p : pairs)
    if (p.references.empty()) throw std::invalid_argument("evaluation pair without references");
}

}  // namespace

BleuStats bleu_stats(std::span<const EvalPair> pairs, std::size_t max_n) {
  check_corpus(pairs);
  if (max_n == 0) throw std::invalid_argument("max_n must be positive");
  std::vector<double> matches(max_n, 0.0), totals(max_n, 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (const auto& p : pairs) {
    const std::size_t c = p.hypothesis.size();
    hyp_len += static_cast<double>(c);
    std::size_t closest = p.references.front().size();
    for (const auto& r : p.references) {
      const auto d = [c](std::size_t len) { return len > c ? len - c : c - len; };
      if (d(r.size()) < d(closest) || (d(r.size()) == d(closest) && r.size() < closest)) closest = r.size();
    }
    ref_len += static_cast<double>(closest);

    for (std::size_t n = 1; n <= max_n; ++n) {
      Counts max_ref;
      for (const auto& r : p.references)
        for (const auto& [g, count] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], count);
      for (const auto& [g, count] : ngrams(p.hypothesis, n)) {
        auto it = max_ref.find(g);
        if (it != max_ref.end()) matches[n - 1] += std::min(count, it->second);
        totals[n - 1] += count;
      }
    }
  }

  BleuStats stats;
  stats.brevity_penalty = hyp_len == 0 ? 0.0 : std::min(1.0, std::exp(1.0 - ref_len / hyp_len));
  for (std::size_t n = 0; n < max_n; ++n) stats.precisions.push_back(totals[n] == 0 ? 0.0 : matches[n] / totals[n]);
  return stats;
}

std::vector<double> bleu_corpus(std::span<const EvalPair> pairs, std::size_t max_n) {
  const auto stats = bleu_stats(pairs, max_n);
  std::vector<double> out(max_n, 0.0);
  double log_sum = 0.0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (stats.precisions[n] == 0) break;
    log_sum += std::log(stats.precisions[n]);
    out[n] = stats.brevity_penalty * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l_pair(const EvalPair& pair, double beta) {
  if (pair.references.empty()) throw std::invalid_argument("evaluation pair without references");
  double best = 0.0;
  for (const auto& ref : pair.references) {
    const double l = static_cast<double>(lcs_length(pair.hypothesis, ref));
    if (l == 0) continue;
    const double r = l / static_cast<double>(ref.size());
    const double p = l / static_cast<double>(pair.hypothesis.size());
    best = std::max(best, (1 + beta * beta) * r * p / (r + beta * beta * p));
  }
  return best;
}

double rouge_l(std::span<const EvalPair> pairs, double beta) {
  check_corpus(pairs);
  double sum = 0.0;
  for (const auto& p : pairs) sum += rouge_l_pair(p, beta);
  return sum / static_cast<double>(pairs.size());
}

double cider(std::span<const EvalPair> pairs) {
  check_corpus(pairs);
  std::set<Tokens> distinct;
  for (const auto& p : pairs) distinct.insert(p.references.begin(), p.references.end());
  if (distinct.size() < 2) throw std::invalid_argument("CIDEr needs at least two distinct references");

  const double n_docs = static_cast<double>(pairs.size());
  double total = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    Counts df;
    for (const auto& p : pairs) {
      std::set<std::string> seen;
      for (const auto& r : p.references)
        for (const auto& [g, count] : ngrams(r, n)) seen.insert(g);
      for (const auto& g : seen) df[g] += 1.0;
    }
    auto weigh = [&](const Tokens& tokens) {
      Counts v = ngrams(tokens, n);
      for (auto& [g, w] : v) {
        auto it = df.find(g);
        w *= std::log(n_docs / (1.0 + (it == df.end() ? 0.0 : it->second)));
      }
      return v;
    };
    auto norm2 = [](const Counts& v) {
      double s = 0.0;
      for (const auto& [g, w] : v) s += w * w;
      return s;
    };
    double sum = 0.0;
    for (const auto& p : pairs) {
      const Counts h = weigh(p.hypothesis);
      const double hh = norm2(h);
      double pair_sum = 0.0;
      for (const auto& ref : p.references) {
        const Counts r = weigh(ref);
        const double rr = norm2(r);
        if (hh == 0 || rr == 0) continue;
        double dot = 0.0;
        for (const auto& [g, w] : h) {
          auto it = r.find(g);
          if (it != r.end()) dot += w * it->second;
        }
        pair_sum += dot / std::sqrt(hh * rr);
      }
      sum += pair_sum / static_cast<double>(p.references.size());
    }
    total += sum / n_docs;
  }
  return 10.0 * total / 4.0;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json obj;
  for (std::size_t n = 0; n < 4; ++n) obj["bleu" + std::to_string(n + 1)] = bleu[n];
  obj["rouge_l"] = rouge_l;
  obj["cider"] = cider;
  obj["n_pairs"] = n_pairs;
  return obj.dump(2);
}

EvalReport evaluate(std::span<const EvalPair> pairs) {
  EvalReport report;
  const auto b = bleu_corpus(pairs, 4);
  std::copy(b.begin(), b.end(), report.bleu.begin());
  report.rouge_l = metrics::rouge_l(pairs);
  report.cider = metrics::cider(pairs);
  report.n_pairs = pairs.size();
  return report;
}

std::vector<EvalPair> align_files(const std::string& generated_path, const std::string& gold_path) {
  auto key = [](const text::RawInstance& r) { return r.image_id + " / " + text::join(text::tokenize(r.answer)); };
  const auto gold = text::load_dataset(gold_path);
  const auto generated = text::load_dataset(generated_path);

  std::map<std::string, std::size_t> index;
  std::vector<EvalPair> pairs;
  for (const auto& g : gold) {
    auto [it, inserted] = index.emplace(key(g), pairs.size());
    if (inserted) pairs.emplace_back();
    pairs[it->second].references.push_back(text::tokenize(g.question));
  }
  std::set<std::string> filled, extra;
  for (const auto& g : generated) {
    const auto k = key(g);
    auto it = index.find(k);
    if (it == index.end()) {
      extra.insert(k);
    } else if (filled.insert(k).second) {
      pairs[it->second].hypothesis = text::tokenize(g.question);
    }
  }
  std::string problems;
  for (const auto& [k, i] : index)
    if (!filled.count(k)) problems += "\n  missing from " + generated_path + ": " + k;
  for (const auto& k : extra) problems += "\n  missing from " + gold_path + ": " + k;
  if (!problems.empty()) throw ParseError("generated and gold files do not align on (image_id, answer):" + problems);
  return pairs;
}

EvalReport evaluate_corpus(const std::string& generated_path, const std::string& gold_path) {
  const auto pairs = align_files(generated_path, gold_path);
  return evaluate(pairs);
}

}  // namespace ivqa::metrics
