#include "ivqa/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <exception>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "ivqa/errors.hpp"
#include "ivqa/ops.hpp"
#include "ivqa/random.hpp"
#include "json.hpp"

namespace ivqa::training {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (!(lr_initial > 0) || !(lr_after > 0)) throw ConfigError("learning rates must be positive");
  if (lr_drop_epoch >= epochs) {
    throw ConfigError("lr_drop_epoch (" + std::to_string(lr_drop_epoch) + ") must be less than epochs (" +
                      std::to_string(epochs) + ")");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
  if (!(clip_norm >= 0)) throw ConfigError("clip_norm must be non-negative");
  if (threads == 0) throw ConfigError("threads must be positive");
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch == 0) throw std::invalid_argument("epochs are numbered from 1");
  return epoch <= cfg.lr_drop_epoch ? cfg.lr_initial : cfg.lr_after;
}

template <typename T>
Tensor<T> sequence_loss(Tape<T>& tape, std::span<const Tensor<T>> distributions, std::span<const TokenId> gold) {
  if (distributions.size() != gold.size()) {
    throw DimensionError("sequence_loss: " + std::to_string(distributions.size()) + " distributions for " +
                         std::to_string(gold.size()) + " gold tokens");
  }
  if (gold.empty()) throw std::invalid_argument("sequence_loss: empty sequence");
  Tensor<T> total;
  for (std::size_t t = 0; t < gold.size(); ++t) {
    auto term = ops::log_clamped(tape, ops::pick(tape, distributions[t], gold[t]), T(kProbabilityFloor));
    total = t == 0 ? term : ops::add(tape, total, term);
  }
  return ops::scale(tape, total, T(-1) / static_cast<T>(gold.size()));
}

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr, const AdamOptions& opts,
               double grad_scale) {
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("Adam state holds " + std::to_string(state.m.size()) + " moments for " +
                         std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel()) {
      throw DimensionError("Adam moment " + std::to_string(i) + " does not match its parameter");
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto values = p.mutable_values();
    auto grad = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]) * grad_scale;
      m[j] = static_cast<T>(opts.beta1 * m[j] + (1.0 - opts.beta1) * g);
      v[j] = static_cast<T>(opts.beta2 * v[j] + (1.0 - opts.beta2) * g * g);
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      values[j] = static_cast<T>(values[j] - lr * m_hat / (std::sqrt(v_hat) + opts.eps));
    }
  }
}

template <typename T>
double global_grad_norm(std::span<const Tensor<T>> params) {
  double sum = 0.0;
  for (const auto& p : params)
    for (T g : p.grad()) sum += static_cast<double>(g) * g;
  return std::sqrt(sum);
}

double clip_factor(double norm, double clip_norm) {
  return clip_norm > 0 && norm > clip_norm ? clip_norm / norm : 1.0;
}

std::string loss_log_csv(std::span<const EpochLog> log, const TrainConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,lr,mean_loss\n";
  if (cfg.clip_norm > 0) out << "# gradient clipping enabled: global norm <= " << cfg.clip_norm << "\n";
  for (const auto& e : log) out << e.epoch << ',' << e.lr << ',' << e.mean_loss << '\n';
  return out.str();
}

void write_loss_log(const std::string& path, std::span<const EpochLog> log, const TrainConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << loss_log_csv(log, cfg);
  if (!out) throw IoError("failed writing " + path);
}

void check_features(const model::ModelConfig& cfg, std::span<const text::DatasetInstance> data,
                    const model::FeatureStore& store) {
  for (const auto& inst : data) {
    const auto& img = model::find_features(store, inst.image_id);
    if (img.k != cfg.k || img.d_v != cfg.d_v) {
      throw DimensionError("image " + img.image_id + " has k=" + std::to_string(img.k) + ", d_v=" +
                           std::to_string(img.d_v) + "; the model expects k=" + std::to_string(cfg.k) +
                           ", d_v=" + std::to_string(cfg.d_v));
    }
  }
}

// ---------------------------------------------------------------- trainer

template <typename T>
Trainer<T>::Trainer(model::IvqaModel<T>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
  cfg_.validate();
}

template <typename T>
std::vector<Tensor<T>> Trainer<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : model_.params().named(model_.config())) out.push_back(t);
  return out;
}

template <typename T>
double Trainer<T>::instance_loss(const text::DatasetInstance& inst, const model::FeatureStore& store) const {
  auto tape = Tape<T>::inference();
  auto out = model_.forward_teacher_forced(tape, inst, store);
  return static_cast<double>(
      sequence_loss<T>(tape, std::span<const Tensor<T>>(out.distributions), inst.question()).item());
}

template <typename T>
LeafGradients<T> Trainer<T>::instance_gradients(const text::DatasetInstance& inst, const model::FeatureStore& store,
                                                double weight, double& loss) const {
  try {
    Tape<T> tape;
    auto out = model_.forward_teacher_forced(tape, inst, store);
    auto l = sequence_loss<T>(tape, std::span<const Tensor<T>>(out.distributions), inst.question());
    loss = static_cast<double>(l.item());
    return tape.backward_collect(ops::scale(tape, l, static_cast<T>(weight)));
  } catch (const NumericError& e) {
    throw NumericError("non-finite value while training on image " + inst.image_id + ": " + e.what());
  }
}

template <typename T>
double Trainer<T>::accumulate_batch(std::span<const text::DatasetInstance> batch, const model::FeatureStore& store) {
  if (batch.empty()) return 0.0;
  const double weight = 1.0 / static_cast<double>(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  const std::size_t workers = std::min(cfg_.threads, batch.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) instance_gradients(batch[i], store, weight, losses[i]).apply();
  } else {
    std::vector<LeafGradients<T>> grads(batch.size());
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < batch.size(); i += workers)
            grads[i] = instance_gradients(batch[i], store, weight, losses[i]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (const auto& g : grads) g.apply();
  }
  std::sort(losses.begin(), losses.end());
  double sum = 0.0;
  for (double l : losses) sum += l;
  if (!std::isfinite(sum)) throw NumericError("non-finite batch loss");
  return sum * weight;
}

template <typename T>
EpochLog Trainer<T>::run_epoch(std::span<const text::DatasetInstance> data, const model::FeatureStore& store) {
  if (data.empty()) throw std::invalid_argument("training data is empty");
  const std::size_t epoch = epochs_done_ + 1;
  EpochLog log{epoch, lr_schedule(epoch, cfg_), 0.0};

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg_.seed + 0x9E3779B97F4A7C15ULL * epoch);
  rng.shuffle(order.begin(), order.end());

  auto params = parameters();
  const AdamOptions opts{cfg_.beta1, cfg_.beta2, cfg_.eps};
  double loss_sum = 0.0;
  std::vector<text::DatasetInstance> batch;
  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
    batch.clear();
    for (std::size_t i = start; i < std::min(order.size(), start + cfg_.batch_size); ++i) batch.push_back(data[order[i]]);
    for (auto& p : params) p.zero_grad();
    const double mean = accumulate_batch(batch, store);
    loss_sum += mean * static_cast<double>(batch.size());
    const double scale = cfg_.clip_norm > 0 ? clip_factor(global_grad_norm<T>(params), cfg_.clip_norm) : 1.0;
    adam_step<T>(params, adam_, log.lr, opts, scale);
  }
  for (auto& p : params) p.zero_grad();
  log.mean_loss = loss_sum / static_cast<double>(data.size());
  if (!std::isfinite(log.mean_loss)) throw NumericError("non-finite loss in epoch " + std::to_string(epoch));
  epochs_done_ = epoch;
  return log;
}

template <typename T>
std::vector<EpochLog> Trainer<T>::train(std::span<const text::DatasetInstance> data, const model::FeatureStore& store,
                                        const std::function<void(const EpochLog&)>& on_epoch) {
  check_features(model_.config(), data, store);
  std::vector<EpochLog> log;
  while (epochs_done_ < cfg_.epochs) {
    log.push_back(run_epoch(data, store));
    if (on_epoch) on_epoch(log.back());
  }
  return log;
}

// ---------------------------------------------------------------- checkpoint encoding

namespace {

class Writer {
 public:
  void bytes(std::string_view s) { out_.append(s); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(bytes(1)[0]); }
  std::uint16_t u16() {
    auto b = bytes(2);
    return static_cast<std::uint16_t>(static_cast<std::uint8_t>(b[0]) | static_cast<std::uint8_t>(b[1]) << 8);
  }
  std::uint32_t u32() {
    auto b = bytes(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(b[static_cast<std::size_t>(i)]);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint truncated at byte " + std::to_string(in_.size()));
    }
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const NamedTensor& t) {
  if (t.name.size() > 0xFFFF) throw std::invalid_argument("tensor name too long: " + t.name);
  if (t.shape.size() > 0xFF) throw std::invalid_argument("too many dimensions in " + t.name);
  if (numel(t.shape) != t.values.size()) throw DimensionError("tensor " + t.name + " values do not match its shape");
  w.u16(static_cast<std::uint16_t>(t.name.size()));
  w.bytes(t.name);
  w.u8(static_cast<std::uint8_t>(t.shape.size()));
  for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
  for (float f : t.values) w.f32(f);
}

NamedTensor read_tensor(Reader& r) {
  NamedTensor t;
  t.name = std::string(r.bytes(r.u16()));
  const std::size_t ndim = r.u8();
  for (std::size_t i = 0; i < ndim; ++i) t.shape.push_back(r.u32());
  const std::size_t n = numel(t.shape);
  if (n > r.remaining() / 4) {
    throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint truncated inside tensor " + t.name);
  }
  t.values.resize(n);
  for (auto& f : t.values) f = r.f32();
  return t;
}

[[noreturn]] void inconsistent(const std::string& what) {
  throw CheckpointError(CheckpointError::Kind::inconsistent, "checkpoint inconsistent: " + what);
}

const std::string kAdamM = "adam.m/";
const std::string kAdamV = "adam.v/";
const std::string kLabelEmbeddings = "label_embeddings";

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  header["model"] = nlohmann::ordered_json::parse(ckpt.config.to_json());
  header["has_adam"] = ckpt.has_adam;
  header["adam_step"] = ckpt.adam_step;
  header["seed"] = ckpt.seed;
  header["epochs_done"] = ckpt.epochs_done;
  header["vocabulary"] = ckpt.vocabulary;
  const std::string json = header.dump();

  Writer w;
  w.bytes(std::string_view(kCheckpointMagic, sizeof kCheckpointMagic));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(json.size()));
  w.bytes(json);
  const bool has_labels = !ckpt.label_embeddings.empty();
  const std::size_t count = ckpt.params.size() + (ckpt.has_adam ? ckpt.adam_m.size() + ckpt.adam_v.size() : 0) +
                            (has_labels ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(count));
  for (const auto& t : ckpt.params) write_tensor(w, t);
  if (ckpt.has_adam) {
    for (const auto& t : ckpt.adam_m) write_tensor(w, {kAdamM + t.name, t.shape, t.values});
    for (const auto& t : ckpt.adam_v) write_tensor(w, {kAdamV + t.name, t.shape, t.values});
  }
  if (has_labels) {
    const std::size_t d = ckpt.config.d_e;
    write_tensor(w, {kLabelEmbeddings, {ckpt.label_embeddings.size() / d, d}, ckpt.label_embeddings});
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint file (bad magic bytes)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  const auto json_text = r.bytes(r.u32());

  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(json_text);
    ckpt.config = model::ModelConfig::from_json(header.at("model").dump());
    ckpt.has_adam = header.at("has_adam").get<bool>();
    ckpt.adam_step = header.at("adam_step").get<std::uint64_t>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.epochs_done = header.at("epochs_done").get<std::size_t>();
    if (header.contains("vocabulary")) ckpt.vocabulary = header["vocabulary"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    inconsistent(std::string("bad header: ") + e.what());
  } catch (const ParseError& e) {
    inconsistent(e.what());
  }
  try {
    ckpt.config.validate();
  } catch (const ConfigError& e) {
    inconsistent(e.what());
  }

  const std::size_t count = r.u32();
  std::map<std::string, NamedTensor> tensors;
  for (std::size_t i = 0; i < count; ++i) {
    auto t = read_tensor(r);
    const std::string name = t.name;
    if (!tensors.emplace(name, std::move(t)).second) inconsistent("duplicate tensor " + name);
  }
  if (r.remaining() != 0) inconsistent(std::to_string(r.remaining()) + " trailing bytes");

  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) inconsistent("missing tensor " + name);
    if (it->second.shape != shape) {
      inconsistent("tensor " + name + " has shape " + shape_str(it->second.shape) + ", config implies " +
                   shape_str(shape));
    }
    NamedTensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  for (const auto& info : model::parameter_layout(ckpt.config)) {
    ckpt.params.push_back(take(info.name, info.shape));
    if (ckpt.has_adam) {
      auto m = take(kAdamM + info.name, info.shape);
      auto v = take(kAdamV + info.name, info.shape);
      m.name = v.name = info.name;
      ckpt.adam_m.push_back(std::move(m));
      ckpt.adam_v.push_back(std::move(v));
    }
  }
  if (tensors.count(kLabelEmbeddings)) {
    ckpt.label_embeddings = take(kLabelEmbeddings, {ckpt.config.vocab_size, ckpt.config.d_e}).values;
  }
  if (!tensors.empty()) inconsistent("unexpected tensor " + tensors.begin()->first);
  if (!ckpt.vocabulary.empty() && ckpt.vocabulary.size() != ckpt.config.vocab_size) {
    inconsistent("vocabulary has " + std::to_string(ckpt.vocabulary.size()) + " tokens, config says " +
                 std::to_string(ckpt.config.vocab_size));
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading");
  const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

template <typename T>
Checkpoint make_checkpoint(const model::IvqaModel<T>& model, const AdamState<T>* adam, std::uint64_t seed,
                           std::size_t epochs_done) {
  Checkpoint ckpt;
  ckpt.config = model.config();
  ckpt.seed = seed;
  ckpt.epochs_done = epochs_done;
  auto params = model.params();
  const auto named = params.named(ckpt.config);
  for (const auto& [name, t] : named) {
    ckpt.params.push_back({name, t.shape(), std::vector<float>(t.values().begin(), t.values().end())});
  }
  if (adam && adam->step > 0) {
    if (adam->m.size() != named.size()) throw DimensionError("Adam state does not match the model");
    ckpt.has_adam = true;
    ckpt.adam_step = adam->step;
    for (std::size_t i = 0; i < named.size(); ++i) {
      const auto& shape = named[i].second.shape();
      ckpt.adam_m.push_back({named[i].first, shape, std::vector<float>(adam->m[i].begin(), adam->m[i].end())});
      ckpt.adam_v.push_back({named[i].first, shape, std::vector<float>(adam->v[i].begin(), adam->v[i].end())});
    }
  }
  return ckpt;
}

template <typename T>
model::IvqaModel<T> model_from_checkpoint(const Checkpoint& ckpt) {
  model::ModelParameters<T> params;
  for (const auto& t : ckpt.params) {
    auto* slot = params.slot(t.name);
    if (!slot) inconsistent("unknown parameter " + t.name);
    *slot = Tensor<T>(t.shape, std::vector<T>(t.values.begin(), t.values.end()), true);
  }
  return model::IvqaModel<T>(ckpt.config, std::move(params));
}

template <typename T>
AdamState<T> adam_from_checkpoint(const Checkpoint& ckpt) {
  AdamState<T> state;
  if (!ckpt.has_adam) return state;
  state.step = ckpt.adam_step;
  for (const auto& t : ckpt.adam_m) state.m.emplace_back(t.values.begin(), t.values.end());
  for (const auto& t : ckpt.adam_v) state.v.emplace_back(t.values.begin(), t.values.end());
  return state;
}

#define IVQA_INSTANTIATE(T)                                                                                    \
  template Tensor<T> sequence_loss<T>(Tape<T>&, std::span<const Tensor<T>>, std::span<const TokenId>);      \
  template void adam_step<T>(std::span<Tensor<T>>, AdamState<T>&, double, const AdamOptions&, double);       \
  template double global_grad_norm<T>(std::span<const Tensor<T>>);                                           \
  template class Trainer<T>;                                                                                   \
  template Checkpoint make_checkpoint<T>(const model::IvqaModel<T>&, const AdamState<T>*, std::uint64_t,     \
                                         std::size_t);                                                         \
  template model::IvqaModel<T> model_from_checkpoint<T>(const Checkpoint&);                                   \
  template AdamState<T> adam_from_checkpoint<T>(const Checkpoint&);

IVQA_INSTANTIATE(float)
IVQA_INSTANTIATE(double)

}  // namespace ivqa::training
