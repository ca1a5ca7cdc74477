#pragma once

// Small seeded datasets with the same file formats as real data. Each image
// gets labelled regions whose feature vectors are built from per-label
// prototypes, and templated questions whose answers are region object labels,
// so attention has something to find.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ivqa/features.hpp"
#include "ivqa/text.hpp"

namespace ivqa::synth {

struct SynthSpec {
  std::uint64_t seed = 42;
  std::size_t n_images = 8;
  std::size_t k = 4;
  std::size_t d_v = 16;
  std::size_t qa_per_image = 1;  // at most k
  std::size_t n_attributes = 8;  // label pool sizes, capped at the built-in lists
  std::size_t n_objects = 8;
  double noise = 0.3;
};

struct SynthData {
  std::vector<features::RegionalFeatureSet> images;
  std::vector<text::RawInstance> instances;
};

SynthData generate(const SynthSpec& spec);

/// Writes <dir>/features.jsonl and <dir>/dataset.jsonl.
void write(const SynthData& data, const std::string& dir);

}  // namespace ivqa::synth
