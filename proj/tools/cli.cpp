#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "ivqa/diagnostics.hpp"
#include "ivqa/errors.hpp"
#include "ivqa/features.hpp"
#include "ivqa/inference.hpp"
#include "ivqa/metrics.hpp"
#include "ivqa/synth.hpp"
#include "ivqa/tensor.hpp"
#include "ivqa/text.hpp"

namespace ivqa::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

RunConfig preset_config(const std::string& name) {
  RunConfig cfg;
  cfg.preset = name;
  if (name == "full") return cfg;
  if (name != "desk") throw ConfigError("unknown preset \"" + name + "\" (expected desk or full)");
  auto& m = cfg.model;
  m.hidden = m.decoder_hidden = 32;
  m.attention = 32;
  m.d_e = 8;
  m.mfb_expand = 32;
  m.mfb_window = 4;
  m.k = 0;
  m.d_v = 0;
  auto& t = cfg.train;
  t.batch_size = 8;
  t.epochs = 300;
  t.lr_initial = t.lr_after = 5e-3;
  t.lr_drop_epoch = 0;
  return cfg;
}

namespace {

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || end != value.data() + value.size() || value.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got \"" + value + "\"");
  }
  return static_cast<std::size_t>(v);
}

double parse_real(const std::string& key, const std::string& value) {
  double v = 0;
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || end != value.data() + value.size() || value.empty() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a finite number, got \"" + value + "\"");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true or false, got \"" + value + "\"");
}

std::string show(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

struct Key {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Field>
Key size_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_size(k, v); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <typename Field>
Key real_key(Field field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_real(k, v); },
          [field](const RunConfig& c) { return show(field(const_cast<RunConfig&>(c))); }};
}

template <typename Field>
Key path_key(Field field) {
  return {[field](RunConfig& c, const std::string&, const std::string& v) { field(c) = v; },
          [field](const RunConfig& c) { return field(const_cast<RunConfig&>(c)); }};
}

const std::vector<std::pair<std::string, Key>>& schema() {
  static const std::vector<std::pair<std::string, Key>> keys = [] {
    std::vector<std::pair<std::string, Key>> k;
    k.emplace_back("preset", Key{[](RunConfig& c, const std::string&, const std::string& v) {
                                   auto fresh = preset_config(v);
                                   fresh.data = c.data;
                                   fresh.features = c.features;
                                   fresh.vocab = c.vocab;
                                   fresh.emb = c.emb;
                                   fresh.out = c.out;
                                   c = std::move(fresh);
                                 },
                                 [](const RunConfig& c) { return c.preset; }});
    k.emplace_back("hidden", size_key([](RunConfig& c) -> auto& { return c.model.hidden; }));
    k.emplace_back("decoder_hidden", size_key([](RunConfig& c) -> auto& { return c.model.decoder_hidden; }));
    k.emplace_back("attention", size_key([](RunConfig& c) -> auto& { return c.model.attention; }));
    k.emplace_back("k", size_key([](RunConfig& c) -> auto& { return c.model.k; }));
    k.emplace_back("d_v", size_key([](RunConfig& c) -> auto& { return c.model.d_v; }));
    k.emplace_back("d_e", size_key([](RunConfig& c) -> auto& { return c.model.d_e; }));
    k.emplace_back("mfb_window", size_key([](RunConfig& c) -> auto& { return c.model.mfb_window; }));
    k.emplace_back("mfb_expand", size_key([](RunConfig& c) -> auto& { return c.model.mfb_expand; }));
    k.emplace_back("vocab_size", size_key([](RunConfig& c) -> auto& { return c.model.vocab_size; }));
    k.emplace_back("max_question_len", size_key([](RunConfig& c) -> auto& { return c.model.max_question_len; }));
    k.emplace_back("answer_len", size_key([](RunConfig& c) -> auto& { return c.model.answer_len; }));
    k.emplace_back("ablate", Key{[](RunConfig& c, const std::string& key, const std::string& v) {
                                   c.model.ablate_semantic = parse_bool(key, v);
                                 },
                                 [](const RunConfig& c) { return std::string(c.model.ablate_semantic ? "true" : "false"); }});
    k.emplace_back("batch_size", size_key([](RunConfig& c) -> auto& { return c.train.batch_size; }));
    k.emplace_back("epochs", size_key([](RunConfig& c) -> auto& { return c.train.epochs; }));
    k.emplace_back("lr_initial", real_key([](RunConfig& c) -> auto& { return c.train.lr_initial; }));
    k.emplace_back("lr_after", real_key([](RunConfig& c) -> auto& { return c.train.lr_after; }));
    k.emplace_back("lr_drop_epoch", size_key([](RunConfig& c) -> auto& { return c.train.lr_drop_epoch; }));
    k.emplace_back("beta1", real_key([](RunConfig& c) -> auto& { return c.train.beta1; }));
    k.emplace_back("beta2", real_key([](RunConfig& c) -> auto& { return c.train.beta2; }));
    k.emplace_back("eps", real_key([](RunConfig& c) -> auto& { return c.train.eps; }));
    k.emplace_back("clip_norm", real_key([](RunConfig& c) -> auto& { return c.train.clip_norm; }));
    k.emplace_back("init_scale", real_key([](RunConfig& c) -> auto& { return c.init_scale; }));
    k.emplace_back("seed", Key{[](RunConfig& c, const std::string& key, const std::string& v) {
                                 c.train.seed = parse_size(key, v);
                               },
                               [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    k.emplace_back("threads", size_key([](RunConfig& c) -> auto& { return c.train.threads; }));
    k.emplace_back("precision", Key{[](RunConfig& c, const std::string& key, const std::string& v) {
                                      const auto p = parse_size(key, v);
                                      if (p != 32 && p != 64) throw ConfigError(key + ": expected 32 or 64, got " + v);
                                      c.precision = static_cast<int>(p);
                                    },
                                    [](const RunConfig& c) { return std::to_string(c.precision); }});
    k.emplace_back("data", path_key([](RunConfig& c) -> auto& { return c.data; }));
    k.emplace_back("features", path_key([](RunConfig& c) -> auto& { return c.features; }));
    k.emplace_back("vocab", path_key([](RunConfig& c) -> auto& { return c.vocab; }));
    k.emplace_back("emb", path_key([](RunConfig& c) -> auto& { return c.emb; }));
    k.emplace_back("out", path_key([](RunConfig& c) -> auto& { return c.out; }));
    return k;
  }();
  return keys;
}

const Key& find_key(const std::string& key) {
  for (const auto& [name, k] : schema())
    if (name == key) return k;
  throw ConfigError("unknown config key \"" + key + "\"");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, k] : schema()) out.push_back(name);
    return out;
  }();
  return names;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "lr") {
    cfg.train.lr_initial = cfg.train.lr_after = parse_real(key, value);
    return;
  }
  find_key(key).set(cfg, key, value);
}

std::string get_key(const RunConfig& cfg, const std::string& key) { return find_key(key).get(cfg); }

std::vector<ConfigEntry> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::vector<ConfigEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto body = trim(std::string_view(line).substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    ConfigEntry e{trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)), lineno};
    if (e.key != "lr") {
      try {
        find_key(e.key);
      } catch (const ConfigError& err) {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": " + err.what());
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

RunConfig resolve_config(const std::string& config_path, const std::string& preset_flag,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::vector<ConfigEntry> entries;
  if (!config_path.empty()) entries = read_config_file(config_path);
  std::string preset = preset_flag;
  if (preset.empty()) {
    preset = "full";
    for (const auto& e : entries)
      if (e.key == "preset") preset = e.value;
  }
  RunConfig cfg = preset_config(preset);
  for (const auto& e : entries) {
    if (e.key == "preset") continue;
    try {
      set_key(cfg, e.key, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError(config_path + ":" + std::to_string(e.line) + ": " + err.what());
    }
  }
  for (const auto& [key, value] : overrides) {
    if (key == "preset") continue;
    set_key(cfg, key, value);
  }
  return cfg;
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& key : config_keys()) out += key + "=" + get_key(cfg, key) + "\n";
  return out;
}

// ---------------------------------------------------------------- commands

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir);
}

void require(const std::string& value, const std::string& flag, const std::string& command) {
  if (value.empty()) throw ConfigError(command + " needs " + flag);
}

int cmd_build_vocab(const std::string& data, std::size_t answer_top, const std::string& out_dir, std::ostream& out) {
  if (answer_top == 0) throw ConfigError("--answer-top must be positive");
  const auto raw = text::load_dataset(data);
  const auto build = text::build_vocabulary(raw, answer_top);
  make_dir(out_dir);
  const auto vocab_path = (fs::path(out_dir) / "vocab.txt").string();
  const auto data_path = (fs::path(out_dir) / "dataset.jsonl").string();
  text::save_vocabulary(vocab_path, build.vocab);
  text::save_dataset(data_path, build.kept);
  out << "kept " << build.kept.size() << " of " << raw.size() << " instances, vocabulary " << build.vocab.size()
      << " tokens\n"
      << "wrote " << vocab_path << "\nwrote " << data_path << "\n";
  return kExitOk;
}

int cmd_synth(const synth::SynthSpec& spec, const std::string& out_dir, std::ostream& out) {
  if (spec.n_images == 0 || spec.k == 0 || spec.d_v == 0) throw ConfigError("--images, --k and --dv must be positive");
  const auto data = synth::generate(spec);
  make_dir(out_dir);
  synth::write(data, out_dir);
  out << "wrote " << data.images.size() << " images and " << data.instances.size() << " questions to " << out_dir
      << "\n";
  return kExitOk;
}

text::EmbeddingTable float_rounded(const text::EmbeddingTable& emb) {
  std::vector<double> rows;
  rows.reserve(emb.matrix().size());
  for (double v : emb.matrix()) rows.push_back(static_cast<double>(static_cast<float>(v)));
  return text::EmbeddingTable(emb.vocab(), emb.dim(), std::move(rows));
}

struct TrainInputs {
  text::EmbeddingTable emb;
  std::vector<text::DatasetInstance> data;
  model::FeatureStore store;
};

TrainInputs load_train_inputs(RunConfig& cfg) {
  require(cfg.data, "--data", "train");
  require(cfg.features, "--features", "train");
  require(cfg.vocab, "--vocab", "train");
  require(cfg.out, "--out", "train");
  auto& m = cfg.model;

  const auto vocab = text::load_vocabulary(cfg.vocab);
  if (m.vocab_size != 0 && m.vocab_size != vocab.size()) {
    throw ConfigError("vocab_size=" + std::to_string(m.vocab_size) + " but " + cfg.vocab + " has " +
                      std::to_string(vocab.size()) + " tokens");
  }
  m.vocab_size = vocab.size();
  const auto raw = text::load_dataset(cfg.data);
  if (raw.empty()) throw ParseError(cfg.data + ": no instances");
  if (!fs::exists(cfg.features)) throw IoError("features file not found: " + cfg.features);
  const auto feats = features::load_features(cfg.features, m.k ? std::optional(m.k) : std::nullopt);
  if (feats.empty()) throw ParseError(cfg.features + ": no feature records");
  if (m.k == 0) m.k = feats.begin()->second.k;
  if (m.d_v == 0) m.d_v = feats.begin()->second.d_v;
  m.validate();
  cfg.train.validate();
  if (!(cfg.init_scale >= 0)) throw ConfigError("init_scale must be non-negative");

  const auto table = cfg.emb.empty() ? text::random_embeddings(vocab, m.d_e, cfg.train.seed)
                                     : text::load_embeddings(cfg.emb, vocab, m.d_e, cfg.train.seed);
  TrainInputs in{float_rounded(table), {}, {}};
  for (std::size_t i = 0; i < raw.size(); ++i) {
    try {
      in.data.push_back(text::DatasetInstance::encode(raw[i], vocab, m.answer_len, m.max_question_len));
    } catch (const std::invalid_argument& e) {
      throw ParseError(cfg.data, i + 1, e.what());
    }
  }
  for (const auto& [id, rfs] : feats) {
    if (rfs.k != m.k || rfs.d_v != m.d_v) {
      throw DimensionError(cfg.features + ": image " + id + " has k=" + std::to_string(rfs.k) + ", d_v=" +
                           std::to_string(rfs.d_v) + "; the config expects k=" + std::to_string(m.k) +
                           ", d_v=" + std::to_string(m.d_v));
    }
    in.store.emplace(id, features::prepare_image(rfs, in.emb, m.ablate_semantic));
  }
  for (const auto& inst : in.data) {
    if (!in.store.count(inst.image_id)) {
      throw ParseError(cfg.data + ": image " + inst.image_id + " has no features in " + cfg.features);
    }
  }
  return in;
}

template <typename T>
int run_training(const RunConfig& cfg, const TrainInputs& in, std::ostream& out) {
  model::InitOptions init;
  init.seed = cfg.train.seed;
  init.matrix_scale = cfg.init_scale;
  model::IvqaModel<T> net(cfg.model, model::init_parameters<T>(cfg.model, in.emb, init));
  training::Trainer<T> trainer(net, cfg.train);
  out << "training " << in.data.size() << " instances, " << cfg.train.epochs << " epochs, " << cfg.precision
      << "-bit\n";
  const auto log = trainer.train(in.data, in.store, [&](const training::EpochLog& e) {
    out << "epoch " << e.epoch << " lr " << show(e.lr) << " loss " << show(e.mean_loss) << "\n";
  });

  auto ckpt = training::make_checkpoint(net, &trainer.adam(), cfg.train.seed, trainer.epochs_done());
  ckpt.vocabulary = in.emb.vocab().tokens();
  ckpt.label_embeddings.assign(in.emb.matrix().begin(), in.emb.matrix().end());
  const auto ckpt_path = (fs::path(cfg.out) / "model.ckpt").string();
  const auto log_path = (fs::path(cfg.out) / "loss.csv").string();
  training::save_checkpoint(ckpt_path, ckpt);
  training::write_loss_log(log_path, log, cfg.train);
  out << "wrote " << ckpt_path << "\nwrote " << log_path << "\n";
  return kExitOk;
}

int cmd_train(RunConfig cfg, bool print_config, std::ostream& out) {
  if (print_config) {
    out << format_config(cfg);
    return kExitOk;
  }
  const auto inputs = load_train_inputs(cfg);
  make_dir(cfg.out);
  return cfg.precision == 64 ? run_training<double>(cfg, inputs, out) : run_training<float>(cfg, inputs, out);
}

struct GenerateArgs {
  std::string ckpt, features, input, out, trace;
  std::size_t beam = 1;
  std::size_t top = 1;
  std::size_t max_len = 0;
  bool allow_unk = false;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  if (a.beam == 0 || a.top == 0) throw ConfigError("--beam and --top must be positive");
  if (a.top > a.beam) throw ConfigError("--top (" + std::to_string(a.top) + ") exceeds --beam (" +
                                        std::to_string(a.beam) + ")");
  const auto ckpt = training::load_checkpoint(a.ckpt);
  const auto& cfg = ckpt.config;
  if (ckpt.vocabulary.empty()) throw CheckpointError(CheckpointError::Kind::inconsistent, a.ckpt + ": no vocabulary");
  const text::Vocabulary vocab(ckpt.vocabulary);
  std::vector<double> rows(ckpt.label_embeddings.begin(), ckpt.label_embeddings.end());
  if (rows.empty()) rows.assign(cfg.vocab_size * cfg.d_e, 0.0);
  const text::EmbeddingTable emb(vocab, cfg.d_e, std::move(rows));
  const auto net = training::model_from_checkpoint<float>(ckpt);

  if (!fs::exists(a.features)) throw IoError("features file not found: " + a.features);
  const auto feats = features::load_features(a.features, cfg.k);
  for (const auto& [id, rfs] : feats) {
    if (rfs.d_v != cfg.d_v) {
      throw DimensionError(a.features + ": image " + id + " has d_v=" + std::to_string(rfs.d_v) +
                           "; the checkpoint expects d_v=" + std::to_string(cfg.d_v));
    }
  }
  const auto requests = inference::load_requests(a.input);
  for (const auto& r : requests) {
    if (!feats.count(r.image_id)) throw ParseError(a.input + ": image " + r.image_id + " has no features in " + a.features);
  }

  auto opts = inference::DecodeOptions::for_vocab(vocab);
  opts.max_len = a.max_len;
  opts.mask_unk = !a.allow_unk;
  model::FeatureStore store;
  std::string lines, trace;
  for (const auto& r : requests) {
    auto it = store.find(r.image_id);
    if (it == store.end()) {
      it = store.emplace(r.image_id, features::prepare_image(feats.at(r.image_id), emb, cfg.ablate_semantic)).first;
    }
    const auto answer = inference::encode_answer(r.answer, vocab, cfg.answer_len);
    std::vector<inference::GenerationResult> results;
    if (a.beam == 1) {
      results.push_back(inference::greedy_decode(net, it->second, answer, opts));
    } else {
      results = inference::beam_decode(net, it->second, answer, a.beam, a.top, opts);
    }
    for (std::size_t rank = 0; rank < results.size(); ++rank) {
      const auto& res = results[rank];
      std::vector<std::string> words;
      for (auto id : res.tokens) words.push_back(vocab.token(id));
      lines += inference::generation_line(r, text::join(words), res.logprob) + "\n";
      for (const auto& step : res.trace) trace += inference::trace_line(r, rank + 1, step, vocab) + "\n";
    }
  }
  if (a.out.empty()) {
    out << lines;
  } else {
    write_text(a.out, lines);
  }
  if (!a.trace.empty()) write_text(a.trace, trace);
  return kExitOk;
}

int cmd_evaluate(const std::string& generated, const std::string& gold, const std::string& out_path,
                 std::ostream& out) {
  const auto report = metrics::evaluate_corpus(generated, gold);
  const auto json = report.to_json() + "\n";
  out << json;
  if (!out_path.empty()) write_text(out_path, json);
  return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, std::optional<std::uint64_t> seed, bool ablate,
                  const std::string& fault, std::ostream& out) {
  RunConfig rc;
  rc.model = diagnostics::gradcheck_config();
  rc.train.seed = diagnostics::GradCheckDraw{}.seed;
  if (!config_path.empty()) {
    for (const auto& e : read_config_file(config_path)) {
      if (e.key == "preset") throw ConfigError(config_path + ":" + std::to_string(e.line) + ": preset does not apply to gradcheck");
      try {
        set_key(rc, e.key, e.value);
      } catch (const ConfigError& err) {
        throw ConfigError(config_path + ":" + std::to_string(e.line) + ": " + err.what());
      }
    }
  }
  if (seed) rc.train.seed = *seed;
  if (ablate) rc.model.ablate_semantic = true;
  rc.model.validate();

  diagnostics::GradCheckDraw draw;
  draw.seed = rc.train.seed;
  draw.question_len = std::min(draw.question_len, rc.model.max_question_len);
  std::optional<testing::ScopedBackwardFault> injected;
  if (!fault.empty()) injected.emplace(fault);
  const auto checks = diagnostics::model_gradient_check(rc.model, draw);

  constexpr double kTolerance = 1e-4;
  double worst = 0.0;
  std::size_t width = 0;
  for (const auto& c : checks) width = std::max(width, c.name.size());
  out << "gradient check, 64-bit, seed " << draw.seed << (rc.model.ablate_semantic ? ", ablated" : "") << "\n";
  for (const auto& c : checks) {
    worst = std::max(worst, std::isnan(c.max_rel_error) ? INFINITY : c.max_rel_error);
    const bool ok = c.max_rel_error < kTolerance;
    std::ostringstream err;
    err << std::scientific;
    err.precision(3);
    err << c.max_rel_error;
    out << "  " << c.name << std::string(width - c.name.size() + 2, ' ') << err.str() << (ok ? "  ok" : "  FAIL")
        << "\n";
  }
  const bool pass = worst < kTolerance;
  out << (pass ? "PASS" : "FAIL") << ": max relative error " << show(worst) << " over " << checks.size()
      << " parameter tensors (limit 1e-4)\n";
  return pass ? kExitOk : kExitVerificationFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Question generation from image regions and an answer phrase", "ivqa"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  std::string data, out_dir, generated, gold, config_path, preset;
  std::size_t answer_top = 3000;
  auto* bv = app.add_subcommand("build-vocab", "Keep the most frequent answers and build the vocabulary");
  bv->add_option("--data", data, "Dataset JSON Lines {image_id, answer, question}")->required();
  bv->add_option("--answer-top", answer_top, "Number of most frequent answers to keep")->capture_default_str();
  bv->add_option("--out", out_dir, "Output directory for vocab.txt and dataset.jsonl")->required();

  synth::SynthSpec spec;
  auto* sy = app.add_subcommand("synth", "Write a seeded synthetic dataset and features");
  sy->add_option("--seed", spec.seed, "Random seed")->capture_default_str();
  sy->add_option("--images", spec.n_images, "Number of images")->capture_default_str();
  sy->add_option("--k", spec.k, "Regions per image")->capture_default_str();
  sy->add_option("--dv", spec.d_v, "Visual feature size")->capture_default_str();
  sy->add_option("--qa-per-image", spec.qa_per_image, "Questions per image, at most k")->capture_default_str();
  sy->add_option("--out-dir", out_dir, "Output directory for features.jsonl and dataset.jsonl")->required();

  std::map<std::string, std::string> train_flags;
  std::vector<std::string> sets;
  bool print_config = false, ablate = false;
  auto* tr = app.add_subcommand("train", "Train a model and write model.ckpt and loss.csv");
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--preset", preset, "desk or full (default full, or the config file's preset)");
  const std::vector<std::pair<std::string, std::string>> train_options{
      {"data", "Dataset JSON Lines"},
      {"features", "Regional features JSON Lines"},
      {"vocab", "Vocabulary file"},
      {"emb", "Word embedding text file (optional; seeded random vectors otherwise)"},
      {"out", "Output directory"},
      {"epochs", "Number of epochs"},
      {"lr", "Constant learning rate (sets lr_initial and lr_after)"},
      {"batch-size", "Mini-batch size"},
      {"seed", "Seed for initialization, embeddings and shuffling"},
      {"threads", "Worker threads for per-instance gradients"},
      {"clip-norm", "Global gradient norm limit, 0 disables"},
      {"precision", "32 or 64"}};
  const auto full = preset_config("full"), desk = preset_config("desk");
  for (const auto& [name, help] : train_options) {
    std::string key = name == "lr" ? "lr_initial" : name;
    std::replace(key.begin(), key.end(), '-', '_');
    std::string text = help;
    if (!get_key(full, key).empty()) {
      text += " [full: " + get_key(full, key) + ", desk: " + get_key(desk, key) + "]";
    }
    tr->add_option_function<std::string>(
          "--" + name, [&train_flags, name](const std::string& v) { train_flags[name] = v; }, text)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)
        ->type_name("VALUE");
  }
  tr->add_flag("--ablate", ablate, "Drop the semantic features and guiding attention");
  tr->add_option("--set", sets, "Override any config key, key=value (repeatable; see --print-config)")
      ->type_name("KEY=VALUE");
  tr->add_flag("--print-config", print_config, "Print the resolved config and exit");

  GenerateArgs gen;
  auto* ge = app.add_subcommand("generate", "Generate questions for {image_id, answer} lines");
  ge->add_option("--ckpt", gen.ckpt, "Checkpoint written by train")->required();
  ge->add_option("--features", gen.features, "Regional features JSON Lines")->required();
  ge->add_option("--input", gen.input, "Requests JSON Lines {image_id, answer}")->required();
  ge->add_option("--out", gen.out, "Output file (default stdout)");
  ge->add_option("--beam", gen.beam, "Beam size; 1 decodes greedily")->capture_default_str();
  ge->add_option("--top", gen.top, "Ranked questions per input, at most --beam")->capture_default_str();
  ge->add_option("--trace", gen.trace, "Write one attention row per generated token to this file");
  ge->add_option("--max-len", gen.max_len, "Maximum question length, 0 for the model's")->capture_default_str();
  ge->add_flag("--allow-unk", gen.allow_unk, "Allow <unk> in generated questions");

  std::string eval_out;
  auto* ev = app.add_subcommand("evaluate", "Score generated questions against gold questions");
  ev->add_option("--generated", generated, "Generated JSON Lines")->required();
  ev->add_option("--gold", gold, "Gold JSON Lines")->required();
  ev->add_option("--out", eval_out, "Also write the report to this file");

  std::string gc_config, fault;
  std::optional<std::uint64_t> gc_seed;
  bool gc_ablate = false;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  gc->add_option("--config", gc_config, "key=value file overriding the default tiny model");
  gc->add_option("--seed", gc_seed, "Seed of the random model and input (default 10)");
  gc->add_flag("--ablate", gc_ablate, "Check the ablated model");
#ifdef IVQA_TEST_HOOKS
  gc->add_option("--inject-fault", fault, "Flip the sign of one op's backward rule")->group("");
#endif

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (bv->parsed()) return cmd_build_vocab(data, answer_top, out_dir, out);
    if (sy->parsed()) return cmd_synth(spec, out_dir, out);
    if (tr->parsed()) {
      std::vector<std::pair<std::string, std::string>> overrides;
      for (const auto& [name, value] : train_flags) {
        std::string key = name;
        std::replace(key.begin(), key.end(), '-', '_');
        overrides.emplace_back(key, value);
      }
      if (ablate) overrides.emplace_back("ablate", "true");
      for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got \"" + s + "\"");
        overrides.emplace_back(trim(std::string_view(s).substr(0, eq)), trim(std::string_view(s).substr(eq + 1)));
      }
      return cmd_train(resolve_config(config_path, preset, overrides), print_config, out);
    }
    if (ge->parsed()) return cmd_generate(gen, out);
    if (ev->parsed()) return cmd_evaluate(generated, gold, eval_out, out);
    if (gc->parsed()) return cmd_gradcheck(gc_config, gc_seed, gc_ablate, fault, out);
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitVerificationFailed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ivqa::cli
