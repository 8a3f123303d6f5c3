#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "patchseg/patching.hpp"
#include "patchseg/random.hpp"

namespace patchseg {

enum class Activation : std::uint8_t { relu, linear };

/// Fully connected layer. `weights` is out x in (column-major, so each input
/// unit's fan-out column is contiguous).
template <typename T>
struct DenseLayer {
  using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  Matrix weights;
  Vector bias;
  Activation activation = Activation::relu;

  Eigen::Index in_width() const noexcept { return weights.cols(); }
  Eigen::Index out_width() const noexcept { return weights.rows(); }
};

/// Shape of the tri-pathway network:
///   per plane  p*p -> pathway[0] -> pathway[1]            (FE1, FE2, ReLU)
///   merged     3*pathway[1] -> trunk[0] -> trunk[1]        (FE3, FE4, ReLU)
///              dropout (layer 5) -> trunk[2]               (FE6, ReLU)
///              dropout (layer 7) -> classes                (FE8, linear) -> softmax
struct Topology {
  std::uint32_t patch_size = 13;
  std::uint16_t classes = 2;
  std::vector<std::uint32_t> pathway_widths{96, 48};
  std::vector<std::uint32_t> trunk_widths{128, 64, 32};
  double dropout = 0.5;
  Normalization normalization = Normalization::roi_zscore;

  void validate() const;
  /// Sum over layers of out*in + out, pathway layers counted three times.
  std::size_t parameter_count() const;

  friend bool operator==(const Topology&, const Topology&) = default;
};

inline constexpr int kPlanes = 3;
inline constexpr int kPathwayDepth = 2;
inline constexpr int kTrunkDepth = 4;

/// Learnable tensors of the network; also used to hold gradients.
template <typename T>
struct ParameterSet {
  std::array<std::array<DenseLayer<T>, kPathwayDepth>, kPlanes> pathways;
  std::array<DenseLayer<T>, kTrunkDepth> trunk;

  /// Visits every layer in serialization order: planes 0..2 (FE1, FE2), then
  /// FE3, FE4, FE6, FE8.
  template <typename F>
  void for_each_layer(F&& f) {
    for (auto& plane : pathways)
      for (auto& layer : plane) f(layer);
    for (auto& layer : trunk) f(layer);
  }
  template <typename F>
  void for_each_layer(F&& f) const {
    for (const auto& plane : pathways)
      for (const auto& layer : plane) f(layer);
    for (const auto& layer : trunk) f(layer);
  }

  /// Number of stored scalars, counted by walking the tensors.
  std::size_t scalar_count() const;
  bool all_finite() const;
  /// Same shapes, all zero.
  ParameterSet zeros_like() const;
};

template <typename T>
struct BasicPatchDnn {
  Topology topology;
  ParameterSet<T> params;
  std::uint64_t step = 0;

  std::size_t parameter_count() const { return params.scalar_count(); }
};

using PatchDnn = BasicPatchDnn<float>;

enum class InitScheme { he_normal, zeros };

/// Weights ~ N(0, 2/fan_in), biases zero. Deterministic given the generator.
template <typename T>
BasicPatchDnn<T> init_network(const Topology& topology, Rng& rng,
                              InitScheme scheme = InitScheme::he_normal);

template <typename U, typename T>
BasicPatchDnn<U> cast_network(const BasicPatchDnn<T>& net);

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

/// One column per sample, one matrix per plane (p*p rows).
template <typename T>
struct InputBatch {
  std::array<Matrix<T>, kPlanes> planes;

  Eigen::Index size() const noexcept { return planes[0].cols(); }
};

template <typename T>
InputBatch<T> pack_samples(std::span<const TriPlanarSample> samples, std::uint32_t patch_size);

/// Inverted-dropout scale factors (0 or 1/(1-eps)) for the two dropout slots.
template <typename T>
struct DropoutMasks {
  Matrix<T> layer5;
  Matrix<T> layer7;
};

/// Draws masks sample by sample (all of layer 5, then all of layer 7, for
/// each column), so a batch consumes the generator exactly like the same
/// samples run one at a time.
template <typename T>
DropoutMasks<T> draw_dropout_masks(const Topology& topology, Eigen::Index samples, Rng& rng);

/// Everything backward needs: inputs, pre-activations, activations, masks.
template <typename T>
struct Tape {
  InputBatch<T> inputs;
  std::array<std::array<Matrix<T>, kPathwayDepth>, kPlanes> pathway_pre;
  std::array<std::array<Matrix<T>, kPathwayDepth>, kPlanes> pathway_out;
  Matrix<T> merged;
  std::array<Matrix<T>, kTrunkDepth> trunk_pre;
  /// Trunk layer outputs after activation and, for FE4/FE6, dropout.
  std::array<Matrix<T>, kTrunkDepth> trunk_out;
  DropoutMasks<T> masks;
  bool train = false;
  Matrix<T> probabilities;  // classes x samples

  Eigen::Index size() const noexcept { return probabilities.cols(); }
};

/// Batched forward pass. With `masks` the dropout slots apply them (train
/// mode); without, dropout is the identity (test mode). Each output column
/// depends only on its own input column and is computed in the same order
/// whatever the batch width.
template <typename T>
Tape<T> forward_batch(const BasicPatchDnn<T>& net, InputBatch<T> inputs,
                      const DropoutMasks<T>* masks = nullptr);

enum class Mode { train, test };

template <typename T>
using LabelDistribution = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct ForwardResult {
  LabelDistribution<T> distribution;
  Tape<T> tape;
};

/// Single-sample forward. Train mode needs `rng` for the dropout masks.
template <typename T>
ForwardResult<T> forward(const BasicPatchDnn<T>& net, const TriPlanarSample& sample, Mode mode,
                         Rng* rng = nullptr);

/// Index of the largest component; ties resolve to the lowest index.
template <typename Vec>
std::uint16_t argmax_class(const Vec& values) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < values.size(); ++c)
    if (values[c] > values[best]) best = c;
  return static_cast<std::uint16_t>(best);
}

template <typename T>
std::uint16_t classify(const BasicPatchDnn<T>& net, const TriPlanarSample& sample);

/// Per-sample cross-entropy -log p_target, via log-sum-exp on the logits.
template <typename T>
double cross_entropy(const Tape<T>& tape, Eigen::Index column, std::uint16_t target);

template <typename T>
struct BackwardResult {
  ParameterSet<T> gradients;
  double mean_loss = 0.0;
};

/// Gradient of the batch-mean cross-entropy with respect to every parameter.
template <typename T>
BackwardResult<T> backward_batch(const BasicPatchDnn<T>& net, const Tape<T>& tape,
                                 std::span<const std::uint16_t> targets);

/// Single-sample gradient of -log L_target.
template <typename T>
ParameterSet<T> backward(const BasicPatchDnn<T>& net, const Tape<T>& tape, std::uint16_t target);

// Checkpoints hold 32-bit parameters.

inline constexpr char kCheckpointMagic[8] = {'P', 'D', 'N', 'N', '0', '0', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::byte> encode_checkpoint(const PatchDnn& net);
PatchDnn decode_checkpoint(std::span<const std::byte> bytes);
void save_checkpoint(const PatchDnn& net, const std::filesystem::path& path);
PatchDnn load_checkpoint(const std::filesystem::path& path);

}  // namespace patchseg
