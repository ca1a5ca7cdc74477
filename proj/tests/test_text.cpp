#include <algorithm>
#include <map>
#include <unordered_map>

#include "doctest.h"
#include "ivqa/errors.hpp"
#include "ivqa/random.hpp"
#include "ivqa/text.hpp"
#include "test_util.hpp"

using namespace ivqa;
using namespace ivqa::text;
using ivqa::testing_util::TempDir;
using ivqa::testing_util::write_file;

namespace {

using Tokens = std::vector<std::string>;

Vocabulary small_vocab() { return Vocabulary({"<pad>", "<start>", "<unk>", "what", "is", "?", "cat"}); }

}  // namespace

TEST_CASE("tokenize") {
  CHECK(tokenize("What color is the sign?") == Tokens{"what", "color", "is", "the", "sign", "?"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("Brown Horse") == Tokens{"brown", "horse"});
  CHECK(tokenize("  it's red, isn't it!  ") ==
        Tokens{"it", "'", "s", "red", ",", "isn", "'", "t", "it", "!"});
  CHECK(tokenize("a.b\tc\n?") == Tokens{"a", ".", "b", "c", "?"});
}

TEST_CASE("vocabulary construction") {
  Vocabulary v;
  CHECK(v.size() == 3);
  CHECK(v.token(kPadId) == "<pad>");
  CHECK(v.id("anything") == kUnkId);
  CHECK_THROWS_AS(Vocabulary({"<pad>", "<unk>", "<start>"}), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary({"<pad>", "<start>", "<unk>", "a", "a"}), std::invalid_argument);
  CHECK_THROWS_AS(v.token(3), std::out_of_range);
}

TEST_CASE("build_vocabulary keeps the most frequent answers") {
  std::vector<RawInstance> data{{"a", "yes", "is it?"}, {"a", "yes", "is it red?"}, {"b", "no", "is it blue?"}};
  auto built = build_vocabulary(data, 1);
  REQUIRE(built.kept.size() == 2);
  CHECK(built.kept[0].answer == "yes");
  CHECK(built.kept[1].answer == "yes");
  CHECK_FALSE(built.vocab.contains("blue"));
  CHECK_FALSE(built.vocab.contains("no"));
  // is, it, ? appear twice; yes twice; red once
  CHECK(built.vocab.tokens() == Tokens{"<pad>", "<start>", "<unk>", "?", "is", "it", "yes", "red"});

  CHECK_THROWS_AS(build_vocabulary(std::vector<RawInstance>{}, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_vocabulary(data, 0), std::invalid_argument);
}

TEST_CASE("build_vocabulary answer ties break lexicographically") {
  std::vector<RawInstance> data{{"a", "zebra", "q one?"}, {"b", "apple", "q two?"}};
  auto built = build_vocabulary(data, 1);
  REQUIRE(built.kept.size() == 1);
  CHECK(built.kept[0].answer == "apple");
}

TEST_CASE("build_vocabulary matches a brute-force recount") {
  const std::vector<RawInstance> corpus{
      {"1", "red", "What color is the car?"},        {"2", "two", "How many dogs are there?"},
      {"3", "red", "What color is the sign, then?"}, {"4", "dog", "What animal is it?"},
      {"5", "two", "How many cats?"},                {"6", "yes", "Is the man's hat red?"},
  };
  auto built = build_vocabulary(corpus, 3);

  // answers: red 2, two 2, dog 1, yes 1 -> top 3 = red, two, dog
  std::unordered_map<std::string, int> counts;
  std::size_t kept = 0;
  for (const auto& inst : corpus) {
    if (inst.answer == "yes") continue;
    ++kept;
    for (const auto& text : {inst.question, inst.answer}) {
      std::string word;
      for (char c : text + " ") {
        char lower = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (c == ' ' || c == '?' || c == ',' || c == '.' || c == '!' || c == '\'') {
          if (!word.empty()) ++counts[word];
          word.clear();
          if (c != ' ') ++counts[std::string(1, c)];
        } else {
          word.push_back(lower);
        }
      }
    }
  }
  CHECK(built.kept.size() == kept);
  std::vector<std::pair<std::string, int>> expected(counts.begin(), counts.end());
  std::sort(expected.begin(), expected.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  REQUIRE(built.vocab.size() == expected.size() + 3);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(built.vocab.token(static_cast<TokenId>(i + 3)) == expected[i].first);
  }
  CHECK(build_vocabulary(corpus, 3).vocab == built.vocab);
}

TEST_CASE("question mark is always in a built vocabulary") {
  std::vector<RawInstance> data{{"a", "x", "no mark here"}};
  CHECK(build_vocabulary(data, 1).vocab.contains("?"));
}

TEST_CASE("encode_sequence") {
  auto v = small_vocab();
  auto e = encode_sequence(Tokens{"what", "is"}, 5, v);
  CHECK(e.ids == std::vector<TokenId>{3, 4, 0, 0, 0});
  CHECK(e.length == 2);

  Tokens long_seq(21, "cat");
  long_seq[18] = "what";
  long_seq[19] = "is";
  auto t = encode_sequence(long_seq, 19, v);
  CHECK(t.ids.size() == 19);
  CHECK(t.length == 19);
  CHECK(t.ids[18] == 3);

  CHECK(encode_sequence(Tokens{"zebra"}, 2, v).ids == std::vector<TokenId>{kUnkId, 0});
  CHECK_THROWS_AS(encode_sequence(Tokens{"a"}, 0, v), std::invalid_argument);
}

TEST_CASE("encode/decode round trip property") {
  auto v = small_vocab();
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Tokens seq(rng.below(25));
    for (auto& tok : seq) tok = v.token(static_cast<TokenId>(3 + rng.below(4)));
    const std::size_t target = 1 + rng.below(20);
    auto e = encode_sequence(seq, target, v);
    Tokens trimmed(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(std::min(seq.size(), target)));
    CHECK(decode_sequence(e.ids, v) == trimmed);
  }
}

TEST_CASE("dataset instances satisfy their invariants") {
  auto v = small_vocab();
  Rng rng(11);
  const char* words[] = {"what", "is", "cat", "dog", "?", "the"};
  for (int trial = 0; trial < 300; ++trial) {
    RawInstance raw{"img", "", ""};
    for (std::size_t i = 0, n = rng.below(5); i < n; ++i) raw.answer += std::string(words[rng.below(6)]) + " ";
    for (std::size_t i = 0, n = 1 + rng.below(30); i < n; ++i)
      raw.question += std::string(words[rng.below(6)]) + " ";
    auto inst = DatasetInstance::encode(raw, v);
    CHECK(inst.answer_tokens.size() == kAnswerLength);
    CHECK(inst.question_tokens.size() == kQuestionLength);
    CHECK(inst.question_length >= 1);
    CHECK(inst.question_length <= kQuestionLength);
    for (const auto* seq : {&inst.answer_tokens, &inst.question_tokens}) {
      auto first_pad = std::find(seq->begin(), seq->end(), kPadId);
      CHECK(std::all_of(first_pad, seq->end(), [](TokenId id) { return id == kPadId; }));
    }
    CHECK(std::count(inst.question_tokens.begin(), inst.question_tokens.end(), kPadId) ==
          static_cast<long>(kQuestionLength - inst.question_length));
  }
  CHECK_THROWS_AS(DatasetInstance::encode({"img", "cat", "   "}, v), std::invalid_argument);
}

TEST_CASE("vocabulary and dataset files round trip") {
  TempDir dir;
  auto v = small_vocab();
  save_vocabulary(dir.file("vocab.txt"), v);
  CHECK(load_vocabulary(dir.file("vocab.txt")) == v);

  write_file(dir.file("bad.txt"), "<pad>\n<unk>\n<start>\n");
  CHECK_THROWS_AS(load_vocabulary(dir.file("bad.txt")), ParseError);

  std::vector<RawInstance> data{{"img1", "red", "What color is it?"}, {"img2", "two \"cats\"", "How many?"}};
  save_dataset(dir.file("data.jsonl"), data);
  CHECK(load_dataset(dir.file("data.jsonl")) == data);

  write_file(dir.file("broken.jsonl"), dataset_line(data[0]) + "\n{\"image_id\": 3}\n");
  try {
    load_dataset(dir.file("broken.jsonl"));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(load_dataset(dir.file("missing.jsonl")), IoError);
}

TEST_CASE("load_embeddings") {
  TempDir dir;
  Vocabulary v({"<pad>", "<start>", "<unk>", "cat", "dog"});
  write_file(dir.file("emb.txt"), "cat 1.0 2.0\nunrelated 5 5\ncat 9 9\n");
  auto emb = load_embeddings(dir.file("emb.txt"), v, 2, 3);
  CHECK(emb.row(3)[0] == 1.0);
  CHECK(emb.row(3)[1] == 2.0);
  CHECK(emb.row(kPadId)[0] == 0.0);
  CHECK(emb.row(kPadId)[1] == 0.0);
  for (TokenId id : {kStartId, kUnkId, TokenId{4}}) {
    for (double x : emb.row(id)) {
      CHECK(x > -0.1);
      CHECK(x < 0.1);
    }
  }
  CHECK(emb.lookup("zebra")[0] == emb.row(kUnkId)[0]);

  auto again = load_embeddings(dir.file("emb.txt"), v, 2, 3);
  CHECK(again.matrix() == emb.matrix());
  auto other_seed = load_embeddings(dir.file("emb.txt"), v, 2, 4);
  CHECK(other_seed.matrix() != emb.matrix());

  write_file(dir.file("short.txt"), "cat 1.0 2.0\ndog 1.0\n");
  try {
    load_embeddings(dir.file("short.txt"), v, 2, 3);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  write_file(dir.file("nan.txt"), "cat 1.0 x\n");
  CHECK_THROWS_AS(load_embeddings(dir.file("nan.txt"), v, 2, 3), ParseError);

  auto rnd = random_embeddings(v, 4, 3);
  CHECK(rnd.matrix().size() == 20);
}
