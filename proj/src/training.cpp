#include "patchseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace patchseg {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning rate must be > 0");
  if (batch_size < 2 || batch_size % 2 != 0)
    throw InvalidArgument("batch size must be even and >= 2");
  if (steps < 1) throw InvalidArgument("steps must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("dropout must lie in [0, 1)");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
  topology(Normalization::roi_zscore).validate();
}

Topology TrainConfig::topology(Normalization normalization) const {
  Topology t;
  t.patch_size = patch_size;
  t.classes = classes;
  t.pathway_widths = pathway_widths;
  t.trunk_widths = trunk_widths;
  t.dropout = dropout;
  t.normalization = normalization;
  return t;
}

void merge_json(TrainConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
  static const std::vector<std::string> known = {
      "eta",          "batch",         "steps",          "dropout",        "seed",
      "momentum",     "checkpoint_interval", "eval_interval", "checkpoint_dir", "patch",
      "classes",      "pathway_widths", "trunk_widths",  "mask_radius"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw InvalidArgument("unknown config key: " + key);
  try {
    c.learning_rate = j.value("eta", c.learning_rate);
    c.batch_size = j.value("batch", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.dropout = j.value("dropout", c.dropout);
    c.seed = j.value("seed", c.seed);
    c.momentum = j.value("momentum", c.momentum);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    if (j.contains("checkpoint_dir"))
      c.checkpoint_dir = j.at("checkpoint_dir").get<std::string>();
    c.patch_size = j.value("patch", c.patch_size);
    c.classes = j.value("classes", c.classes);
    c.pathway_widths = j.value("pathway_widths", c.pathway_widths);
    c.trunk_widths = j.value("trunk_widths", c.trunk_widths);
    c.mask_radius = j.value("mask_radius", c.mask_radius);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"eta", c.learning_rate},
          {"batch", c.batch_size},
          {"steps", c.steps},
          {"dropout", c.dropout},
          {"seed", c.seed},
          {"momentum", c.momentum},
          {"checkpoint_interval", c.checkpoint_interval},
          {"eval_interval", c.eval_interval},
          {"checkpoint_dir", c.checkpoint_dir.string()},
          {"patch", c.patch_size},
          {"classes", c.classes},
          {"pathway_widths", c.pathway_widths},
          {"trunk_widths", c.trunk_widths},
          {"mask_radius", c.mask_radius}};
}

template <typename T>
TrainLogRecord sgd_step(BasicPatchDnn<T>& net, const MiniBatch& batch, double learning_rate,
                        Rng& dropout_rng, SgdState<T>* state) {
  if (batch.samples.empty()) throw InvalidArgument("sgd_step: empty batch");
  const auto start = std::chrono::steady_clock::now();
  auto inputs = pack_samples<T>(batch.samples, net.topology.patch_size);
  const auto masks =
      draw_dropout_masks<T>(net.topology, static_cast<Eigen::Index>(batch.samples.size()), dropout_rng);
  const auto tape = forward_batch(net, std::move(inputs), &masks);
  std::vector<std::uint16_t> targets;
  targets.reserve(batch.samples.size());
  for (const auto& s : batch.samples) targets.push_back(s.label);
  auto [grads, loss] = backward_batch(net, tape, targets);

  if (!std::isfinite(loss))
    throw Divergence("non-finite loss at step " + std::to_string(net.step));
  if (!grads.all_finite())
    throw Divergence("non-finite gradient at step " + std::to_string(net.step));

  const T lr = static_cast<T>(learning_rate);
  if (state && state->momentum > 0.0) {
    if (!state->velocity) state->velocity = grads.zeros_like();
    const T mu = static_cast<T>(state->momentum);
    auto& vel = *state->velocity;
    for (int k = 0; k < kPlanes; ++k)
      for (int l = 0; l < kPathwayDepth; ++l) {
        auto& v = vel.pathways[k][l];
        const auto& g = grads.pathways[k][l];
        v.weights = mu * v.weights + g.weights;
        v.bias = mu * v.bias + g.bias;
      }
    for (int l = 0; l < kTrunkDepth; ++l) {
      auto& v = vel.trunk[l];
      v.weights = mu * v.weights + grads.trunk[l].weights;
      v.bias = mu * v.bias + grads.trunk[l].bias;
    }
    grads = vel;
  }
  for (int k = 0; k < kPlanes; ++k)
    for (int l = 0; l < kPathwayDepth; ++l) {
      net.params.pathways[k][l].weights -= lr * grads.pathways[k][l].weights;
      net.params.pathways[k][l].bias -= lr * grads.pathways[k][l].bias;
    }
  for (int l = 0; l < kTrunkDepth; ++l) {
    net.params.trunk[l].weights -= lr * grads.trunk[l].weights;
    net.params.trunk[l].bias -= lr * grads.trunk[l].bias;
  }
  if (!net.params.all_finite())
    throw Divergence("non-finite parameter after step " + std::to_string(net.step));
  ++net.step;

  TrainLogRecord rec;
  rec.step = net.step;
  rec.loss = loss;
  rec.ms_per_step =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

template TrainLogRecord sgd_step<float>(BasicPatchDnn<float>&, const MiniBatch&, double, Rng&,
                                        SgdState<float>*);
template TrainLogRecord sgd_step<double>(BasicPatchDnn<double>&, const MiniBatch&, double, Rng&,
                                         SgdState<double>*);

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t step) {
  return dir / ("ckpt_" + std::to_string(step) + ".pdnn");
}

TrainResult train(const TrainingPool& pool, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (config.patch_size != pool.patch_size())
    throw InvalidArgument("config patch size " + std::to_string(config.patch_size) +
                          " differs from pool patch size " + std::to_string(pool.patch_size()));
  if (config.classes != pool.options().classes)
    throw InvalidArgument("config class count differs from the pool's");
  if (config.checkpoint_interval > 0) {
    if (config.checkpoint_dir.empty())
      throw InvalidArgument("checkpoint interval set without a checkpoint directory");
    std::filesystem::create_directories(config.checkpoint_dir);
  }

  const Rng root(config.seed);
  Rng init_rng = root.derive(0);
  Rng sample_rng = root.derive(1);
  Rng dropout_rng = root.derive(2);

  TrainResult result;
  result.net = init_network<float>(config.topology(pool.options().normalization), init_rng);
  SgdState<float> state{config.momentum, std::nullopt};

  result.log.reserve(config.steps);
  for (std::uint64_t j = 0; j < config.steps; ++j) {
    const auto start = std::chrono::steady_clock::now();
    const MiniBatch batch = next_batch(pool, config.batch_size, sample_rng);
    if (batch.foreground_count() != config.batch_size / 2)
      throw InvalidArgument("mini-batch lost its class balance");
    TrainLogRecord rec = sgd_step(result.net, batch, config.learning_rate, dropout_rng, &state);
    rec.ms_per_step =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (config.eval_interval > 0 && rec.step % config.eval_interval == 0 && hooks.heldout_dice)
      rec.heldout_dice = hooks.heldout_dice(result.net);
    if (config.checkpoint_interval > 0 && rec.step % config.checkpoint_interval == 0)
      save_checkpoint(result.net, checkpoint_path(config.checkpoint_dir, rec.step));
    if (hooks.on_step) hooks.on_step(rec);
    result.log.push_back(rec);
  }
  return result;
}

void write_train_log(std::ostream& out, std::span<const TrainLogRecord> log) {
  out << "step,loss,ms_per_step,heldout_dice\n";
  for (const auto& r : log) {
    std::ostringstream line;
    line << r.step << ',' << std::setprecision(9) << r.loss << ',' << std::setprecision(6)
         << r.ms_per_step << ',';
    if (r.heldout_dice) line << std::setprecision(6) << *r.heldout_dice;
    out << line.str() << '\n';
  }
}

}  // namespace patchseg
