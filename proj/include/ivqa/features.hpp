#pragma once

// Per-image regional features produced by an external object detector, and
// the semantic / enhanced region representations built from them.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ivqa/text.hpp"

namespace ivqa::features {

struct RegionalFeatureSet {
  std::string image_id;
  std::size_t k = 0;
  std::size_t d_v = 0;
  std::vector<double> visual;  // k x d_v, regions by descending detector confidence
  std::vector<std::string> attributes;
  std::vector<std::string> objects;

  std::span<const double> region(std::size_t i) const {
    return std::span(visual).subspan(i * d_v, d_v);
  }
  /// Throws DimensionError / NumericError when the fields disagree or values are not finite.
  void validate() const;

  friend bool operator==(const RegionalFeatureSet&, const RegionalFeatureSet&) = default;
};

using FeatureMap = std::map<std::string, RegionalFeatureSet>;

/// JSON Lines, one image per line:
/// {"image_id", "k", "d_v", "features": [[d_v floats] x k], "attributes": [k], "objects": [k]}
/// When `required_k` is set every record must have exactly that many regions.
FeatureMap load_features(const std::string& path, std::optional<std::size_t> required_k = std::nullopt);
std::string feature_line(const RegionalFeatureSet& set);
void save_features(const std::string& path, std::span<const RegionalFeatureSet> sets);

struct SemanticFeatureSet {
  std::size_t k = 0;
  std::size_t d_e = 0;
  std::vector<double> attributes;  // B: k x d_e
  std::vector<double> objects;     // O: k x d_e
  std::vector<double> semantic;    // S: k x 2d_e, rows [b_i; o_i]
};

/// Embeds every region's attribute and object label. Multi-word labels use the
/// mean of their word vectors; unknown words and empty labels use <unk>.
SemanticFeatureSet assemble_semantic(const RegionalFeatureSet& rfs, const text::EmbeddingTable& emb);

/// Embedding of a (possibly multi-word) label.
std::vector<double> label_embedding(const std::string& label, const text::EmbeddingTable& emb);

struct EnhancedFeatureSet {
  std::size_t k = 0;
  std::size_t dim = 0;        // N_e
  std::vector<double> rows;   // k x N_e, rows [v_i; s_i]
};

EnhancedFeatureSet assemble_enhanced(const RegionalFeatureSet& rfs, const SemanticFeatureSet& sfs);
/// Ablated form with no semantic part: E_vi = v_i.
EnhancedFeatureSet assemble_enhanced(const RegionalFeatureSet& rfs);

/// Everything the model reads for one image.
struct ImageFeatures {
  std::string image_id;
  std::size_t k = 0;
  std::size_t d_v = 0;
  std::size_t d_s = 0;            // 2 d_e; 0 when ablated
  std::vector<double> visual;     // k x d_v
  std::vector<double> semantic;   // k x d_s
  std::vector<double> enhanced;   // k x (d_v + d_s)
  std::vector<std::string> attributes;
  std::vector<std::string> objects;
};

ImageFeatures prepare_image(const RegionalFeatureSet& rfs, const text::EmbeddingTable& emb, bool ablate);

}  // namespace ivqa::features
