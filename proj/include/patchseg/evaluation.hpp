#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchseg/pbs.hpp"
#include "patchseg/training.hpp"
#include "patchseg/volume.hpp"

namespace patchseg {

/// Which labels count as "inside" for Dice: any label > 0, or an explicit set.
struct ClassSet {
  std::vector<std::uint16_t> classes;  // empty means pooled foreground

  static ClassSet foreground() { return {}; }
  static ClassSet only(std::uint16_t c) { return {{c}}; }
  bool contains(std::uint16_t label) const noexcept;
};

/// 2|A n B| / (|A| + |B|); 1 when both sets are empty.
double dice(const LabelVolume& a, const LabelVolume& b, const ClassSet& classes = ClassSet::foreground());

struct FoldPlan {
  std::vector<std::vector<std::size_t>> folds;
  std::uint64_t seed = 0;
};

/// Seeded shuffle, then contiguous split; fold sizes differ by at most one.
FoldPlan make_folds(std::span<const std::size_t> ids, std::size_t folds, std::uint64_t seed);

struct Subject {
  std::string id;
  IntensityVolume image;
  LabelVolume labels;
};

struct Summary {
  std::size_t count = 0;
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

/// Quartiles by linear interpolation between order statistics; the median of
/// an even count is the mean of the two central values.
Summary summarize(std::vector<double> values);

struct ImageScore {
  std::string image_id;
  std::size_t fold = 0;
  double dice = 0.0;  // pooled foreground
  /// Dice of each ground-truth class 1..C-1; empty when the segmentation has
  /// fewer classes than the ground truth.
  std::vector<double> per_class;
  double segment_seconds = 0.0;
};

struct DiceReport {
  std::vector<ImageScore> scores;
  Summary pooled;
  std::vector<Summary> per_class;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
  /// Rows `image_id,fold,dice`.
  void write_csv(std::ostream& out) const;
};

DiceReport make_report(std::vector<ImageScore> scores, nlohmann::json metadata = nlohmann::json::object());

/// Plain-text comparison table, one row per experiment arm.
std::string summary_table(std::span<const DiceReport> reports, std::span<const std::string> names);

struct Segmentation {
  LabelVolume labels;
  double seconds = 0.0;
};

using Segmenter = std::function<Segmentation(const IntensityVolume&)>;

/// Builds a segmenter from one fold's training subjects.
using FoldTrainer =
    std::function<Segmenter(std::span<const Subject* const> training, std::size_t fold, std::uint64_t fold_seed)>;

/// For each fold: train on the other folds, segment and score every held-out
/// subject. Fold f uses seed + f. Folds may run concurrently.
DiceReport crossval(std::span<const Subject> corpus, std::size_t folds, const FoldTrainer& trainer,
                    std::uint64_t seed);

struct FoldTrainingInfo {
  std::size_t fold = 0;
  const TrainResult* result = nullptr;
  const RoiMask* mask = nullptr;
  std::size_t pool_size = 0;
};

/// ROI mask from the training labels, balanced pool, SGD, batched inference
/// inside that mask. The config seed is replaced by the fold seed.
FoldTrainer patchdnn_trainer(const TrainConfig& config,
                             std::function<void(const FoldTrainingInfo&)> on_trained = {});

/// SSD atlas selection and patch label fusion inside the training ROI mask.
FoldTrainer pbs_trainer(const PbsConfig& config, std::uint32_t mask_radius);

/// crossval with patchdnn_trainer; metadata records patch size, eta, steps.
DiceReport crossval(std::span<const Subject> corpus, std::size_t folds, const TrainConfig& config,
                    std::uint64_t seed);

}  // namespace patchseg
