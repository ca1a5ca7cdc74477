#include "ivqa/synth.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string_view>

#include "ivqa/errors.hpp"
#include "ivqa/random.hpp"

namespace ivqa::synth {

namespace {

constexpr std::array<std::string_view, 8> kAttributes = {"red",   "green", "blue",  "brown",
                                                         "white", "black", "small", "large"};
constexpr std::array<std::string_view, 8> kObjects = {"horse", "sign", "car",  "dog",
                                                      "cat",   "tree", "man",  "fire hydrant"};
constexpr std::array<std::string_view, 3> kTemplates = {
    "what is the {} object?", "which {} thing is in the picture?", "what {} item can you see?"};

std::string fill(std::string_view tmpl, std::string_view word) {
  std::string out(tmpl);
  out.replace(out.find("{}"), 2, word);
  return out;
}

std::vector<double> prototype(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

SynthData generate(const SynthSpec& spec) {
  if (spec.n_images == 0 || spec.k == 0 || spec.d_v == 0 || spec.qa_per_image == 0 ||
      spec.n_attributes == 0 || spec.n_objects == 0) {
    throw std::invalid_argument("synth: all sizes must be positive");
  }
  if (spec.qa_per_image > spec.k) throw std::invalid_argument("synth: qa_per_image exceeds k");
  const std::size_t n_attr = std::min(spec.n_attributes, kAttributes.size());
  const std::size_t n_obj = std::min(spec.n_objects, kObjects.size());

  Rng rng(spec.seed);
  std::vector<std::vector<double>> attr_proto, obj_proto;
  for (std::size_t i = 0; i < n_attr; ++i) attr_proto.push_back(prototype(rng, spec.d_v));
  for (std::size_t i = 0; i < n_obj; ++i) obj_proto.push_back(prototype(rng, spec.d_v));

  SynthData data;
  for (std::size_t img = 0; img < spec.n_images; ++img) {
    features::RegionalFeatureSet set;
    set.image_id = "synth_" + std::to_string(img);
    set.k = spec.k;
    set.d_v = spec.d_v;

    // distinct objects per image while the pool allows it
    std::vector<std::size_t> pool(n_obj);
    std::iota(pool.begin(), pool.end(), 0);
    rng.shuffle(pool.begin(), pool.end());
    std::vector<std::size_t> obj_idx(spec.k), attr_idx(spec.k);
    for (std::size_t r = 0; r < spec.k; ++r) {
      obj_idx[r] = r < n_obj ? pool[r] : rng.below(n_obj);
      attr_idx[r] = rng.below(n_attr);
      set.objects.emplace_back(kObjects[obj_idx[r]]);
      set.attributes.emplace_back(kAttributes[attr_idx[r]]);
      for (std::size_t c = 0; c < spec.d_v; ++c) {
        set.visual.push_back(attr_proto[attr_idx[r]][c] + obj_proto[obj_idx[r]][c] +
                             spec.noise * rng.normal());
      }
    }

    std::vector<std::size_t> regions(spec.k);
    std::iota(regions.begin(), regions.end(), 0);
    rng.shuffle(regions.begin(), regions.end());
    for (std::size_t q = 0; q < spec.qa_per_image; ++q) {
      const std::size_t r = regions[q];
      const auto tmpl = kTemplates[rng.below(kTemplates.size())];
      data.instances.push_back({set.image_id, set.objects[r], fill(tmpl, set.attributes[r])});
    }
    data.images.push_back(std::move(set));
  }
  return data;
}

void write(const SynthData& data, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir);
  features::save_features((std::filesystem::path(dir) / "features.jsonl").string(), data.images);
  text::save_dataset((std::filesystem::path(dir) / "dataset.jsonl").string(), data.instances);
}

}  // namespace ivqa::synth
