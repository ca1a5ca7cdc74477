#include "ivqa/features.hpp"

#include <cmath>
#include <fstream>

#include "ivqa/errors.hpp"
#include "json.hpp"

namespace ivqa::features {

using nlohmann::json;

void RegionalFeatureSet::validate() const {
  if (k == 0 || d_v == 0) throw DimensionError(image_id + ": k and d_v must be positive");
  if (visual.size() != k * d_v) {
    throw DimensionError(image_id + ": expected " + std::to_string(k * d_v) + " feature values, got " +
                         std::to_string(visual.size()));
  }
  if (attributes.size() != k || objects.size() != k) {
    throw DimensionError(image_id + ": expected " + std::to_string(k) + " attribute and object labels");
  }
  for (double v : visual)
    if (!std::isfinite(v)) throw NumericError(image_id + ": non-finite feature value");
}

namespace {

std::size_t require_count(const json& obj, const char* key, const std::string& path, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_number_integer() || it->get<long long>() <= 0) {
    throw ParseError(path, line, std::string("\"") + key + "\" must be a positive integer");
  }
  return it->get<std::size_t>();
}

std::vector<std::string> require_labels(const json& obj, const char* key, std::size_t k,
                                        const std::string& path, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_array()) {
    throw ParseError(path, line, std::string("missing array \"") + key + "\"");
  }
  if (it->size() != k) {
    throw ParseError(path, line, std::string("length mismatch: declared k=") + std::to_string(k) +
                                     " but \"" + key + "\" has " + std::to_string(it->size()) + " entries");
  }
  std::vector<std::string> out;
  for (const auto& v : *it) {
    if (!v.is_string()) throw ParseError(path, line, std::string("\"") + key + "\" entries must be strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

RegionalFeatureSet parse_record(const std::string& text, const std::string& path, std::size_t line) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path, line, std::string("malformed JSON: ") + e.what());
  }
  if (!obj.is_object()) throw ParseError(path, line, "expected a JSON object");

  RegionalFeatureSet set;
  auto id = obj.find("image_id");
  if (id == obj.end() || !id->is_string()) throw ParseError(path, line, "missing string \"image_id\"");
  set.image_id = id->get<std::string>();
  set.k = require_count(obj, "k", path, line);
  set.d_v = require_count(obj, "d_v", path, line);

  auto feats = obj.find("features");
  if (feats == obj.end() || !feats->is_array()) throw ParseError(path, line, "missing array \"features\"");
  if (feats->size() != set.k) {
    throw ParseError(path, line, "length mismatch: declared k=" + std::to_string(set.k) + " but " +
                                     std::to_string(feats->size()) + " feature rows");
  }
  set.visual.reserve(set.k * set.d_v);
  for (const auto& row : *feats) {
    if (!row.is_array() || row.size() != set.d_v) {
      throw ParseError(path, line, "length mismatch: every feature row must have d_v=" +
                                       std::to_string(set.d_v) + " numbers");
    }
    for (const auto& v : row) {
      if (!v.is_number()) throw ParseError(path, line, "feature values must be numbers");
      set.visual.push_back(v.get<double>());
    }
  }
  set.attributes = require_labels(obj, "attributes", set.k, path, line);
  set.objects = require_labels(obj, "objects", set.k, path, line);
  return set;
}

}  // namespace

FeatureMap load_features(const std::string& path, std::optional<std::size_t> required_k) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path + " for reading");
  FeatureMap out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto set = parse_record(text, path, line);
    if (required_k && set.k != *required_k) {
      throw ParseError(path, line, "image " + set.image_id + " has k=" + std::to_string(set.k) +
                                       ", expected " + std::to_string(*required_k));
    }
    const std::string id = set.image_id;
    if (!out.emplace(id, std::move(set)).second) {
      throw ParseError(path, line, "duplicate image_id \"" + id + "\"");
    }
  }
  return out;
}

std::string feature_line(const RegionalFeatureSet& set) {
  set.validate();
  nlohmann::ordered_json obj;
  obj["image_id"] = set.image_id;
  obj["k"] = set.k;
  obj["d_v"] = set.d_v;
  json rows = json::array();
  for (std::size_t i = 0; i < set.k; ++i) {
    auto r = set.region(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  obj["features"] = std::move(rows);
  obj["attributes"] = set.attributes;
  obj["objects"] = set.objects;
  return obj.dump();
}

void save_features(const std::string& path, std::span<const RegionalFeatureSet> sets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& s : sets) out << feature_line(s) << '\n';
  if (!out) throw IoError("failed writing " + path);
}

std::vector<double> label_embedding(const std::string& label, const text::EmbeddingTable& emb) {
  const auto words = text::tokenize(label);
  if (words.empty()) {
    auto unk = emb.row(text::kUnkId);
    return {unk.begin(), unk.end()};
  }
  std::vector<double> mean(emb.dim(), 0.0);
  for (const auto& w : words) {
    auto v = emb.lookup(w);
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += v[c];
  }
  for (auto& v : mean) v /= static_cast<double>(words.size());
  return mean;
}

SemanticFeatureSet assemble_semantic(const RegionalFeatureSet& rfs, const text::EmbeddingTable& emb) {
  SemanticFeatureSet s;
  s.k = rfs.k;
  s.d_e = emb.dim();
  for (std::size_t i = 0; i < rfs.k; ++i) {
    const auto b = label_embedding(rfs.attributes.at(i), emb);
    const auto o = label_embedding(rfs.objects.at(i), emb);
    s.attributes.insert(s.attributes.end(), b.begin(), b.end());
    s.objects.insert(s.objects.end(), o.begin(), o.end());
    s.semantic.insert(s.semantic.end(), b.begin(), b.end());
    s.semantic.insert(s.semantic.end(), o.begin(), o.end());
  }
  return s;
}

EnhancedFeatureSet assemble_enhanced(const RegionalFeatureSet& rfs, const SemanticFeatureSet& sfs) {
  if (rfs.k != sfs.k) {
    throw DimensionError("assemble_enhanced: visual set has k=" + std::to_string(rfs.k) +
                         ", semantic set has k=" + std::to_string(sfs.k));
  }
  EnhancedFeatureSet e;
  e.k = rfs.k;
  const std::size_t d_s = 2 * sfs.d_e;
  e.dim = rfs.d_v + d_s;
  e.rows.reserve(e.k * e.dim);
  for (std::size_t i = 0; i < e.k; ++i) {
    auto v = rfs.region(i);
    e.rows.insert(e.rows.end(), v.begin(), v.end());
    auto first = sfs.semantic.begin() + static_cast<std::ptrdiff_t>(i * d_s);
    e.rows.insert(e.rows.end(), first, first + static_cast<std::ptrdiff_t>(d_s));
  }
  return e;
}

EnhancedFeatureSet assemble_enhanced(const RegionalFeatureSet& rfs) {
  return {rfs.k, rfs.d_v, rfs.visual};
}

ImageFeatures prepare_image(const RegionalFeatureSet& rfs, const text::EmbeddingTable& emb, bool ablate) {
  rfs.validate();
  ImageFeatures f;
  f.image_id = rfs.image_id;
  f.k = rfs.k;
  f.d_v = rfs.d_v;
  f.visual = rfs.visual;
  f.attributes = rfs.attributes;
  f.objects = rfs.objects;
  if (ablate) {
    f.enhanced = assemble_enhanced(rfs).rows;
    return f;
  }
  auto sem = assemble_semantic(rfs, emb);
  f.d_s = 2 * sem.d_e;
  f.enhanced = assemble_enhanced(rfs, sem).rows;
  f.semantic = std::move(sem.semantic);
  return f;
}

}  // namespace ivqa::features
