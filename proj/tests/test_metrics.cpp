#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "ivqa/errors.hpp"
#include "ivqa/metrics.hpp"
#include "ivqa/random.hpp"
#include "ivqa/text.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace ivqa;
using namespace ivqa::metrics;

namespace {

const std::string kData = IVQA_TEST_DATA_DIR;

Tokens toks(const std::string& s) { return text::tokenize(s); }

EvalPair pair(const std::string& hyp, std::initializer_list<std::string> refs) {
  EvalPair p{toks(hyp), {}};
  for (const auto& r : refs) p.references.push_back(toks(r));
  return p;
}

std::vector<EvalPair> random_corpus(Rng& rng, std::size_t n) {
  const std::vector<std::string> words{"a", "b", "c", "d", "e", "f", "?"};
  auto sentence = [&] {
    Tokens t(1 + rng.below(9));
    for (auto& w : t) w = words[rng.below(words.size())];
    return t;
  };
  std::vector<EvalPair> out(n);
  for (auto& p : out) {
    p.hypothesis = sentence();
    for (std::size_t r = 0; r < 1 + rng.below(3); ++r) p.references.push_back(sentence());
  }
  return out;
}

/// Single-reference CIDEr written out with vectors of (gram, weight) pairs.
double cider_single_ref(const std::vector<std::pair<Tokens, Tokens>>& corpus) {
  const double N = static_cast<double>(corpus.size());
  double total = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    auto grams = [n](const Tokens& t) {
      std::vector<std::pair<Tokens, double>> g;
      for (std::size_t i = 0; i + n <= t.size(); ++i) {
        Tokens gram(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n));
        auto it = std::find_if(g.begin(), g.end(), [&](const auto& e) { return e.first == gram; });
        if (it == g.end()) g.push_back({gram, 1.0});
        else it->second += 1.0;
      }
      return g;
    };
    auto df = [&](const Tokens& gram) {
      double d = 0;
      for (const auto& [h, r] : corpus) {
        auto rg = grams(r);
        if (std::any_of(rg.begin(), rg.end(), [&](const auto& e) { return e.first == gram; })) d += 1;
      }
      return d;
    };
    double sum = 0;
    for (const auto& [h, r] : corpus) {
      auto hv = grams(h), rv = grams(r);
      for (auto& e : hv) e.second *= std::log(N / (1 + df(e.first)));
      for (auto& e : rv) e.second *= std::log(N / (1 + df(e.first)));
      double dot = 0, nh = 0, nr = 0;
      for (const auto& a : hv) {
        nh += a.second * a.second;
        for (const auto& b : rv)
          if (a.first == b.first) dot += a.second * b.second;
      }
      for (const auto& b : rv) nr += b.second * b.second;
      if (nh > 0 && nr > 0) sum += dot / (std::sqrt(nh) * std::sqrt(nr));
    }
    total += sum / N;
  }
  return 10 * total / 4;
}

}  // namespace

TEST_CASE("BLEU") {
  SUBCASE("identical corpus") {
    std::vector<EvalPair> c{pair("what color is the bus ?", {"what color is the bus ?"}),
                            pair("how many dogs are there ?", {"how many dogs are there ?"})};
    CHECK(bleu_corpus(c) == std::vector<double>{1.0, 1.0, 1.0, 1.0});
  }
  SUBCASE("clipping") {
    std::vector<EvalPair> c{pair("the the the", {"the cat"})};
    auto b = bleu_corpus(c);
    CHECK(std::abs(b[0] - 1.0 / 3) < 1e-12);
    CHECK(b[1] == 0.0);
    CHECK(b[3] == 0.0);
  }
  SUBCASE("brevity penalty") {
    std::vector<EvalPair> c{pair("a b", {"a b c d"})};
    CHECK(std::abs(bleu_corpus(c)[0] - std::exp(-1.0)) < 1e-12);
    CHECK(std::abs(bleu_corpus(c)[0] - 0.36788) < 1e-5);
    CHECK(std::abs(bleu_corpus(c)[1] - std::exp(-1.0)) < 1e-12);
  }
  SUBCASE("closest reference length, shorter on ties") {
    std::vector<EvalPair> c{pair("a b c", {"a b c d e", "a b", "a b c d"})};
    CHECK(bleu_corpus(c)[0] == 1.0);
    std::vector<EvalPair> d{pair("a b c", {"a b c d", "x y z w v"})};
    CHECK(std::abs(bleu_corpus(d)[0] - std::exp(1.0 - 4.0 / 3.0)) < 1e-12);
  }
  SUBCASE("clipping uses the largest reference count") {
    std::vector<EvalPair> c{pair("the the cat", {"the cat", "the the dog"})};
    CHECK(std::abs(bleu_corpus(c)[0] - 1.0) < 1e-12);
  }
  SUBCASE("higher orders can score above lower ones") {
    std::vector<EvalPair> c{pair("x", {"a"}), pair("a b", {"a b"})};
    auto b = bleu_corpus(c);
    CHECK(std::abs(b[0] - 2.0 / 3) < 1e-12);
    CHECK(std::abs(b[1] - std::sqrt(2.0 / 3)) < 1e-12);
    CHECK(b[1] > b[0]);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(bleu_corpus({}), std::invalid_argument);
    std::vector<EvalPair> c{EvalPair{toks("a"), {}}};
    CHECK_THROWS_AS(bleu_corpus(c), std::invalid_argument);
  }
}

TEST_CASE("ROUGE-L") {
  CHECK(lcs_length(toks("a b c d"), toks("a c d")) == 3);
  CHECK(lcs_length(toks("a b"), toks("")) == 0);
  std::vector<EvalPair> same{pair("is it red ?", {"is it red ?"})};
  CHECK(rouge_l(same) == 1.0);
  std::vector<EvalPair> c{pair("a c d", {"a b c d"})};
  CHECK(std::abs(rouge_l(c) - 2.44 * 0.75 / (0.75 + 1.44)) < 1e-12);
  CHECK(std::abs(rouge_l(c) - 0.83562) < 1e-5);
  std::vector<EvalPair> disjoint{pair("x y", {"a b"})};
  CHECK(rouge_l(disjoint) == 0.0);
  CHECK(rouge_l_pair(pair("a c d", {"z", "a b c d"})) == rouge_l(c));
  CHECK_THROWS_AS(rouge_l({}), std::invalid_argument);
}

TEST_CASE("CIDEr") {
  SUBCASE("identical corpus with distinct references") {
    std::vector<EvalPair> c{pair("what color is the bus ?", {"what color is the bus ?"}),
                            pair("how many dogs are there ?", {"how many dogs are there ?"}),
                            pair("is the man holding a kite ?", {"is the man holding a kite ?"}),
                            pair("where is the red car parked ?", {"where is the red car parked ?"})};
    CHECK(cider(c) == 10.0);
  }
  SUBCASE("no shared n-grams") {
    std::vector<EvalPair> c{pair("x y z", {"a b c"}), pair("u v w", {"d e f"}), pair("p q", {"g h"})};
    CHECK(cider(c) == 0.0);
  }
  SUBCASE("toy corpus against a straight-line computation") {
    std::vector<std::pair<std::string, std::string>> raw{
        {"what is the man holding ?", "what is the man carrying ?"},
        {"how many people are there ?", "how many people are in the photo ?"},
        {"what color is the man 's shirt ?", "what color is the shirt ?"}};
    std::vector<EvalPair> c;
    std::vector<std::pair<Tokens, Tokens>> plain;
    for (const auto& [h, r] : raw) {
      c.push_back(pair(h, {r}));
      plain.push_back({toks(h), toks(r)});
    }
    CHECK(std::abs(cider(c) - cider_single_ref(plain)) < 1e-9);
    CHECK(cider(c) > 0);
  }
  SUBCASE("needs two distinct references") {
    std::vector<EvalPair> c{pair("a b", {"a b"}), pair("a c", {"a b"})};
    CHECK_THROWS_AS(cider(c), std::invalid_argument);
  }
}

TEST_CASE("corpus properties on random corpora") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    CAPTURE(trial);
    auto c = random_corpus(rng, 2 + rng.below(8));
    auto b = bleu_corpus(c);
    for (std::size_t n = 0; n < 4; ++n) {
      CHECK(b[n] >= 0);
      CHECK(b[n] <= 1);
    }
    const auto stats = bleu_stats(c, 4);
    double log_sum = 0;
    for (std::size_t n = 0; n < 4; ++n) {
      if (stats.precisions[n] == 0) {
        for (std::size_t k = n; k < 4; ++k) CHECK(b[k] == 0.0);
        break;
      }
      if (n > 0) {
        const double geo = std::exp(log_sum / static_cast<double>(n));
        if (stats.precisions[n] <= geo) CHECK(b[n] <= b[n - 1] + 1e-12);
        else CHECK(b[n] >= b[n - 1] - 1e-12);
      }
      log_sum += std::log(stats.precisions[n]);
      CHECK(std::abs(b[n] - stats.brevity_penalty * std::exp(log_sum / static_cast<double>(n + 1))) < 1e-12);
    }
    const double r = rouge_l(c);
    CHECK(r >= 0);
    CHECK(r <= 1 + 1e-12);

    auto shuffled = c;
    rng.shuffle(shuffled.begin(), shuffled.end());
    auto b2 = bleu_corpus(shuffled);
    for (std::size_t n = 0; n < 4; ++n) CHECK(std::abs(b2[n] - b[n]) < 1e-12);
    CHECK(std::abs(rouge_l(shuffled) - r) < 1e-12);

    std::set<Tokens> distinct;
    for (const auto& p : c) distinct.insert(p.references.begin(), p.references.end());
    if (distinct.size() >= 2) {
      const double ci = cider(c);
      CHECK(std::abs(cider(shuffled) - ci) < 1e-9);
      CHECK(std::isfinite(ci));
    }
  }
}

TEST_CASE("corpus evaluation files") {
  SUBCASE("golden report") {
    const auto report = evaluate_corpus(kData + "/metrics_generated.jsonl", kData + "/metrics_gold.jsonl");
    const auto golden = nlohmann::json::parse(testing_util::read_file(kData + "/metrics_golden.json"));
    for (std::size_t n = 0; n < 4; ++n) CHECK(std::abs(report.bleu[n] - golden["bleu" + std::to_string(n + 1)].get<double>()) < 1e-6);
    CHECK(std::abs(report.rouge_l - golden["rouge_l"].get<double>()) < 1e-6);
    CHECK(std::abs(report.cider - golden["cider"].get<double>()) < 1e-6);
    CHECK(report.n_pairs == 6);

    auto keys = nlohmann::ordered_json::parse(report.to_json());
    std::vector<std::string> names;
    for (const auto& [k, v] : keys.items()) names.push_back(k);
    CHECK(names == std::vector<std::string>{"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "n_pairs"});
  }
  SUBCASE("multiple references and ranked hypotheses") {
    auto pairs = align_files(kData + "/metrics_generated.jsonl", kData + "/metrics_gold.jsonl");
    REQUIRE(pairs.size() == 6);
    CHECK(pairs[0].references.size() == 2);
    CHECK(pairs[5].hypothesis == toks("the the the"));
  }
  SUBCASE("generated equals gold") {
    auto report = evaluate_corpus(kData + "/metrics_gold.jsonl", kData + "/metrics_gold.jsonl");
    for (double b : report.bleu) CHECK(b == 1.0);
    CHECK(report.rouge_l == 1.0);
  }
  SUBCASE("key mismatch") {
    testing_util::TempDir dir;
    testing_util::write_file(dir.file("gen.jsonl"),
                             "{\"image_id\": \"img1\", \"answer\": \"red\", \"question\": \"q ?\"}\n"
                             "{\"image_id\": \"img9\", \"answer\": \"blue\", \"question\": \"q ?\"}\n");
    try {
      evaluate_corpus(dir.file("gen.jsonl"), kData + "/metrics_gold.jsonl");
      FAIL("expected an alignment error");
    } catch (const ParseError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("img2 / two") != std::string::npos);
      CHECK(msg.find("img9 / blue") != std::string::npos);
    }
  }
}
