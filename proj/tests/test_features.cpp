#include "doctest.h"
#include "ivqa/errors.hpp"
#include "ivqa/features.hpp"
#include "ivqa/random.hpp"
#include "test_util.hpp"

using namespace ivqa;
using namespace ivqa::features;
using ivqa::testing_util::TempDir;
using ivqa::testing_util::write_file;

namespace {

text::EmbeddingTable label_table() {
  text::Vocabulary v({"<pad>", "<start>", "<unk>", "brown", "horse", "fire", "hydrant"});
  std::vector<double> rows{0, 0,    0.5, 0.5,  -0.5, 0.25, 1, 2,
                           3, 4,    5,   6,    7,    9};
  return text::EmbeddingTable(v, 2, rows);
}

RegionalFeatureSet random_set(Rng& rng, const std::string& id, std::size_t k, std::size_t d_v) {
  RegionalFeatureSet s{id, k, d_v, {}, {}, {}};
  for (std::size_t i = 0; i < k * d_v; ++i) s.visual.push_back(rng.normal());
  const char* labels[] = {"brown", "horse", "fire hydrant", "", "zebra"};
  for (std::size_t i = 0; i < k; ++i) {
    s.attributes.emplace_back(labels[rng.below(5)]);
    s.objects.emplace_back(labels[rng.below(5)]);
  }
  return s;
}

}  // namespace

TEST_CASE("load_features parses a record") {
  TempDir dir;
  write_file(dir.file("f.jsonl"),
             R"({"image_id": "img1", "k": 2, "d_v": 3, "features": [[1, 2, 3], [4.5, 5, -6]],)"
             R"( "attributes": ["brown", "red"], "objects": ["horse", "sign"]})" "\n");
  auto map = load_features(dir.file("f.jsonl"));
  REQUIRE(map.size() == 1);
  const auto& s = map.at("img1");
  CHECK(s.k == 2);
  CHECK(s.d_v == 3);
  CHECK(s.visual == std::vector<double>{1, 2, 3, 4.5, 5, -6});
  CHECK(s.attributes == std::vector<std::string>{"brown", "red"});
  CHECK(s.objects == std::vector<std::string>{"horse", "sign"});
  CHECK_THROWS_AS(load_features(dir.file("f.jsonl"), 3), ParseError);
}

TEST_CASE("load_features reports length mismatches with the line") {
  TempDir dir;
  write_file(dir.file("f.jsonl"),
             R"({"image_id": "a", "k": 1, "d_v": 1, "features": [[1]], "attributes": ["x"], "objects": ["y"]})"
             "\n"
             R"({"image_id": "b", "k": 2, "d_v": 1, "features": [[1], [2], [3]], "attributes": ["x", "x"], "objects": ["y", "y"]})"
             "\n");
  try {
    load_features(dir.file("f.jsonl"));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).find("length mismatch") != std::string::npos);
  }

  write_file(dir.file("g.jsonl"), "{not json\n");
  CHECK_THROWS_AS(load_features(dir.file("g.jsonl")), ParseError);

  write_file(dir.file("h.jsonl"),
             R"({"image_id": "a", "k": 1, "d_v": 2, "features": [[1]], "attributes": ["x"], "objects": ["y"]})" "\n");
  CHECK_THROWS_AS(load_features(dir.file("h.jsonl")), ParseError);

  const std::string rec =
      R"({"image_id": "a", "k": 1, "d_v": 1, "features": [[1]], "attributes": ["x"], "objects": ["y"]})";
  write_file(dir.file("dup.jsonl"), rec + "\n" + rec + "\n");
  CHECK_THROWS_AS(load_features(dir.file("dup.jsonl")), ParseError);
}

TEST_CASE("feature files round trip value-identically") {
  TempDir dir;
  Rng rng(5);
  std::vector<RegionalFeatureSet> sets;
  for (int i = 0; i < 6; ++i) sets.push_back(random_set(rng, "img" + std::to_string(i), 1 + rng.below(5), 1 + rng.below(6)));
  save_features(dir.file("f.jsonl"), sets);
  auto map = load_features(dir.file("f.jsonl"));
  REQUIRE(map.size() == sets.size());
  for (const auto& s : sets) CHECK(map.at(s.image_id) == s);
}

TEST_CASE("semantic features embed attribute and object labels") {
  auto emb = label_table();
  RegionalFeatureSet rfs{"img", 2, 1, {0.0, 1.0}, {"brown", ""}, {"horse", "fire hydrant"}};
  auto sem = assemble_semantic(rfs, emb);
  CHECK(sem.k == 2);
  CHECK(sem.d_e == 2);
  // region 0: [emb(brown); emb(horse)]
  CHECK(std::vector<double>(sem.semantic.begin(), sem.semantic.begin() + 4) ==
        std::vector<double>{1, 2, 3, 4});
  // region 1: [emb(<unk>); mean(emb(fire), emb(hydrant))]
  CHECK(std::vector<double>(sem.semantic.begin() + 4, sem.semantic.end()) ==
        std::vector<double>{-0.5, 0.25, 6, 7.5});
  CHECK(label_embedding("zebra", emb) == std::vector<double>{-0.5, 0.25});
  CHECK(label_embedding("Brown", emb) == std::vector<double>{1, 2});
}

TEST_CASE("enhanced features are per-region concatenations") {
  auto emb = label_table();
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.below(6), d_v = 1 + rng.below(5);
    auto rfs = random_set(rng, "img", k, d_v);
    auto sem = assemble_semantic(rfs, emb);
    auto e = assemble_enhanced(rfs, sem);
    REQUIRE(e.dim == d_v + 4);
    REQUIRE(e.rows.size() == k * e.dim);
    for (std::size_t i = 0; i < k; ++i) {
      const double* row = e.rows.data() + i * e.dim;
      for (std::size_t c = 0; c < d_v; ++c) CHECK(row[c] == rfs.visual[i * d_v + c]);
      for (std::size_t c = 0; c < 4; ++c) CHECK(row[d_v + c] == sem.semantic[i * 4 + c]);
      for (std::size_t c = 0; c < 2; ++c) {
        CHECK(sem.semantic[i * 4 + c] == sem.attributes[i * 2 + c]);
        CHECK(sem.semantic[i * 4 + 2 + c] == sem.objects[i * 2 + c]);
      }
    }
  }

  RegionalFeatureSet three{"img", 1, 3, {1, 2, 3}, {"brown"}, {"horse"}};
  CHECK(assemble_enhanced(three, assemble_semantic(three, emb)).rows == std::vector<double>{1, 2, 3, 1, 2, 3, 4});

  RegionalFeatureSet two{"img", 2, 1, {1, 2}, {"a", "b"}, {"c", "d"}};
  CHECK_THROWS_AS(assemble_enhanced(two, assemble_semantic(three, emb)), DimensionError);
}

TEST_CASE("prepare_image in full and ablated form") {
  auto emb = label_table();
  RegionalFeatureSet rfs{"img", 2, 3, {1, 2, 3, 4, 5, 6}, {"brown", "brown"}, {"horse", "fire hydrant"}};
  auto full = prepare_image(rfs, emb, false);
  CHECK(full.d_s == 4);
  CHECK(full.semantic.size() == 8);
  CHECK(full.enhanced.size() == 14);
  CHECK(prepare_image(rfs, emb, false).enhanced == full.enhanced);

  auto ablated = prepare_image(rfs, emb, true);
  CHECK(ablated.d_s == 0);
  CHECK(ablated.semantic.empty());
  CHECK(ablated.enhanced == rfs.visual);

  RegionalFeatureSet bad = rfs;
  bad.visual.pop_back();
  CHECK_THROWS_AS(prepare_image(bad, emb, false), DimensionError);
  bad = rfs;
  bad.visual[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(prepare_image(bad, emb, false), NumericError);
}
