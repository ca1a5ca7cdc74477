#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ivqa/model.hpp"
#include "ivqa/tensor.hpp"
#include "ivqa/text.hpp"

namespace ivqa::training {

using text::TokenId;

inline constexpr double kProbabilityFloor = 1e-12;

struct TrainConfig {
  std::size_t batch_size = 1000;
  std::size_t epochs = 14;
  double lr_initial = 9.9e-4;
  double lr_after = 9.9e-5;
  std::size_t lr_drop_epoch = 5;  // last epoch at lr_initial
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  // global gradient norm limit; 0 disables clipping
  std::size_t threads = 1;

  /// Throws ConfigError on non-positive sizes or rates, or lr_drop_epoch >= epochs.
  void validate() const;
};

/// lr_initial for epochs 1..lr_drop_epoch, lr_after afterwards.
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

/// -(1/T) sum_t log max(p_t[gold_t], 1e-12).
template <typename T>
Tensor<T> sequence_loss(Tape<T>& tape, std::span<const Tensor<T>> distributions,
                        std::span<const TokenId> gold);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient (treated as zero when absent), multiplied by `grad_scale`. The
/// state is sized on first use and must keep matching the parameter shapes.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, double lr, const AdamOptions& opts,
               double grad_scale = 1.0);

/// sqrt of the sum of squared accumulated gradients.
template <typename T>
double global_grad_norm(std::span<const Tensor<T>> params);

/// Gradient multiplier that brings `norm` down to `clip_norm`; 1 when
/// clipping is off or the norm is already within the limit.
double clip_factor(double norm, double clip_norm);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
};

/// "epoch,lr,mean_loss" CSV; a "# ..." line after the header records enabled
/// gradient clipping.
std::string loss_log_csv(std::span<const EpochLog> log, const TrainConfig& cfg);
void write_loss_log(const std::string& path, std::span<const EpochLog> log, const TrainConfig& cfg);

template <typename T>
class Trainer {
 public:
  Trainer(model::IvqaModel<T>& model, TrainConfig cfg);

  /// Mean loss of one instance under the current parameters, no update.
  double instance_loss(const text::DatasetInstance& inst, const model::FeatureStore& store) const;

  /// Accumulates the gradient of the mean loss over `batch` into the
  /// parameters and returns that mean loss. The losses are summed in sorted
  /// order so the returned mean does not depend on batch order.
  double accumulate_batch(std::span<const text::DatasetInstance> batch, const model::FeatureStore& store);

  /// Shuffles, then for each batch accumulates gradients and takes one Adam
  /// step. Returns the mean of the per-instance losses seen in the epoch.
  EpochLog run_epoch(std::span<const text::DatasetInstance> data, const model::FeatureStore& store);

  /// Runs the remaining epochs up to cfg.epochs.
  std::vector<EpochLog> train(std::span<const text::DatasetInstance> data, const model::FeatureStore& store,
                              const std::function<void(const EpochLog&)>& on_epoch = {});

  const TrainConfig& config() const { return cfg_; }
  std::size_t epochs_done() const { return epochs_done_; }
  void set_epochs_done(std::size_t n) { epochs_done_ = n; }
  AdamState<T>& adam() { return adam_; }
  const AdamState<T>& adam() const { return adam_; }
  std::vector<Tensor<T>> parameters() const;

 private:
  LeafGradients<T> instance_gradients(const text::DatasetInstance& inst, const model::FeatureStore& store,
                                      double weight, double& loss) const;

  model::IvqaModel<T>& model_;
  TrainConfig cfg_;
  AdamState<T> adam_;
  std::size_t epochs_done_ = 0;
};

/// Checks that every instance has features of the model's k and d_v.
void check_features(const model::ModelConfig& cfg, std::span<const text::DatasetInstance> data,
                    const model::FeatureStore& store);

// ---------------------------------------------------------------- checkpoints

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  model::ModelConfig config;
  std::vector<NamedTensor> params;  // parameter_layout order
  bool has_adam = false;
  std::vector<NamedTensor> adam_m;  // "adam.m/<param>"
  std::vector<NamedTensor> adam_v;  // "adam.v/<param>"
  std::uint64_t adam_step = 0;
  std::uint64_t seed = 0;
  std::size_t epochs_done = 0;
  std::vector<std::string> vocabulary;  // optional; config.vocab_size tokens when present
  std::vector<float> label_embeddings;  // optional; [vocab_size x d_e] table for region labels

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr char kCheckpointMagic[8] = {'I', 'V', 'Q', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout: magic, u32 version, u32-prefixed JSON header, u32 tensor
/// count, then per tensor u16 name length, name, u8 ndim, u32 dims, f32 data.
/// All integers and floats little-endian.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
/// Throws CheckpointError on bad magic, version, truncation or shape mismatch.
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
Checkpoint make_checkpoint(const model::IvqaModel<T>& model, const AdamState<T>* adam, std::uint64_t seed,
                           std::size_t epochs_done);
template <typename T>
model::IvqaModel<T> model_from_checkpoint(const Checkpoint& ckpt);
template <typename T>
AdamState<T> adam_from_checkpoint(const Checkpoint& ckpt);

}  // namespace ivqa::training
