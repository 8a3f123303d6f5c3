#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "patchseg/network.hpp"
#include "patchseg/patching.hpp"

namespace patchseg {

struct TrainConfig {
  double learning_rate = 1e-5;
  std::size_t batch_size = 200;
  std::uint64_t steps = 1000;
  double dropout = 0.5;
  std::uint64_t seed = 1;
  /// Plain SGD when zero.
  double momentum = 0.0;
  /// Steps between `ckpt_{step}.pdnn` files; 0 disables.
  std::uint64_t checkpoint_interval = 0;
  /// Steps between held-out evaluations; 0 disables.
  std::uint64_t eval_interval = 0;
  std::filesystem::path checkpoint_dir;
  std::uint32_t patch_size = 13;
  std::uint16_t classes = 2;
  std::vector<std::uint32_t> pathway_widths{96, 48};
  std::vector<std::uint32_t> trunk_widths{128, 64, 32};
  std::uint32_t mask_radius = 3;

  void validate() const;
  Topology topology(Normalization normalization) const;
};

/// Keys match the field names; absent keys keep the values already in `config`.
void merge_json(TrainConfig& config, const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);

struct TrainLogRecord {
  std::uint64_t step = 0;
  /// Mean batch cross-entropy before the update.
  double loss = 0.0;
  double ms_per_step = 0.0;
  std::optional<double> heldout_dice;
};

/// Momentum buffers; unused while momentum is zero.
template <typename T>
struct SgdState {
  double momentum = 0.0;
  std::optional<ParameterSet<T>> velocity;
};

/// One update: params -= lr * mean per-sample gradient. Throws Divergence on a
/// non-finite loss, gradient or updated parameter.
template <typename T>
TrainLogRecord sgd_step(BasicPatchDnn<T>& net, const MiniBatch& batch, double learning_rate,
                        Rng& dropout_rng, SgdState<T>* state = nullptr);

struct TrainHooks {
  /// Called every eval_interval steps; the value lands in the log.
  std::function<double(const PatchDnn&)> heldout_dice;
  std::function<void(const TrainLogRecord&)> on_step;
};

struct TrainResult {
  PatchDnn net;
  std::vector<TrainLogRecord> log;
};

/// Runs config.steps updates on balanced batches from `pool`. Deterministic
/// given config.seed.
TrainResult train(const TrainingPool& pool, const TrainConfig& config, const TrainHooks& hooks = {});

/// CSV with header `step,loss,ms_per_step,heldout_dice`.
void write_train_log(std::ostream& out, std::span<const TrainLogRecord> log);

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t step);

}  // namespace patchseg
