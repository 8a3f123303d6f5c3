#include "patchseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>

#include "patchseg/inference.hpp"
#include "patchseg/parallel.hpp"

namespace patchseg {

bool ClassSet::contains(std::uint16_t label) const noexcept {
  if (classes.empty()) return label > 0;
  return std::ranges::find(classes, label) != classes.end();
}

double dice(const LabelVolume& a, const LabelVolume& b, const ClassSet& classes) {
  require_congruent(a.dims(), b.dims(), "dice");
  const auto da = a.data();
  const auto db = b.data();
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const bool in_a = classes.contains(da[i]);
    const bool in_b = classes.contains(db[i]);
    na += in_a;
    nb += in_b;
    both += in_a && in_b;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

FoldPlan make_folds(std::span<const std::size_t> ids, std::size_t folds, std::uint64_t seed) {
  if (folds < 1) throw InvalidArgument("fold count must be >= 1");
  if (folds > ids.size()) throw InvalidArgument("more folds than images");
  std::vector<std::size_t> order(ids.begin(), ids.end());
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_index(i)]);
  FoldPlan plan;
  plan.seed = seed;
  plan.folds.resize(folds);
  const std::size_t base = order.size() / folds;
  const std::size_t extra = order.size() % folds;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    plan.folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  return plan;
}

Summary summarize(std::vector<double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  std::ranges::sort(values);
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
  };
  s.min = values.front();
  s.max = values.back();
  s.q1 = quantile(0.25);
  s.q3 = quantile(0.75);
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return s;
}

namespace {

nlohmann::json summary_json(const Summary& s) {
  return {{"count", s.count}, {"min", s.min}, {"q1", s.q1}, {"median", s.median},
          {"q3", s.q3},       {"max", s.max}};
}

}  // namespace

nlohmann::json DiceReport::to_json() const {
  nlohmann::json per_image = nlohmann::json::array();
  for (const auto& s : scores)
    per_image.push_back({{"image_id", s.image_id},
                         {"fold", s.fold},
                         {"dice", s.dice},
                         {"per_class_dice", s.per_class},
                         {"segment_seconds", s.segment_seconds}});
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& s : per_class) classes.push_back(summary_json(s));
  return {{"metadata", metadata},
          {"pooled_foreground", summary_json(pooled)},
          {"per_class", classes},
          {"images", per_image}};
}

void DiceReport::write_csv(std::ostream& out) const {
  out << "image_id,fold,dice\n";
  for (const auto& s : scores)
    out << s.image_id << ',' << s.fold << ',' << std::setprecision(9) << s.dice << '\n';
}

DiceReport make_report(std::vector<ImageScore> scores, nlohmann::json metadata) {
  DiceReport report;
  std::vector<double> pooled;
  std::size_t per_class_width = scores.empty() ? 0 : scores.front().per_class.size();
  for (const auto& s : scores) {
    pooled.push_back(s.dice);
    per_class_width = std::min(per_class_width, s.per_class.size());
  }
  report.pooled = summarize(pooled);
  for (std::size_t c = 0; c < per_class_width; ++c) {
    std::vector<double> v;
    for (const auto& s : scores) v.push_back(s.per_class[c]);
    report.per_class.push_back(summarize(std::move(v)));
  }
  report.scores = std::move(scores);
  report.metadata = std::move(metadata);
  return report;
}

std::string summary_table(std::span<const DiceReport> reports, std::span<const std::string> names) {
  std::ostringstream out;
  out << std::left << std::setw(16) << "setting" << std::right << std::setw(5) << "n"
      << std::setw(9) << "min" << std::setw(9) << "q1" << std::setw(9) << "median" << std::setw(9)
      << "q3" << std::setw(9) << "max" << '\n';
  out << std::fixed << std::setprecision(4);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& s = reports[i].pooled;
    out << std::left << std::setw(16) << (i < names.size() ? names[i] : "run" + std::to_string(i))
        << std::right << std::setw(5) << s.count << std::setw(9) << s.min << std::setw(9) << s.q1
        << std::setw(9) << s.median << std::setw(9) << s.q3 << std::setw(9) << s.max << '\n';
  }
  return out.str();
}

DiceReport crossval(std::span<const Subject> corpus, std::size_t folds, const FoldTrainer& trainer,
                    std::uint64_t seed) {
  if (corpus.empty()) throw InvalidArgument("crossval: empty corpus");
  std::vector<std::size_t> ids(corpus.size());
  std::iota(ids.begin(), ids.end(), 0);
  const FoldPlan plan = make_folds(ids, folds, seed);

  std::vector<std::vector<ImageScore>> fold_scores(folds);
  parallel_for(folds, [&](std::size_t f) {
    std::vector<const Subject*> training;
    for (std::size_t g = 0; g < folds; ++g)
      if (g != f)
        for (std::size_t id : plan.folds[g]) training.push_back(&corpus[id]);
    if (training.empty()) throw InvalidArgument("crossval: a fold has no training subjects");
    const Segmenter segmenter = trainer(training, f, seed + f);
    for (std::size_t id : plan.folds[f]) {
      const Subject& subject = corpus[id];
      const Segmentation seg = segmenter(subject.image);
      ImageScore score;
      score.image_id = subject.id;
      score.fold = f;
      score.dice = dice(seg.labels, subject.labels);
      score.segment_seconds = seg.seconds;
      if (seg.labels.classes() >= subject.labels.classes())
        for (std::uint16_t c = 1; c < subject.labels.classes(); ++c)
          score.per_class.push_back(dice(seg.labels, subject.labels, ClassSet::only(c)));
      fold_scores[f].push_back(std::move(score));
    }
  });

  std::vector<ImageScore> scores;
  for (auto& fs : fold_scores)
    for (auto& s : fs) scores.push_back(std::move(s));
  std::ranges::sort(scores, [](const ImageScore& a, const ImageScore& b) { return a.image_id < b.image_id; });
  return make_report(std::move(scores), {{"folds", folds}, {"seed", seed}});
}

namespace {

RoiMask training_mask(std::span<const Subject* const> training, std::uint32_t radius) {
  std::vector<LabelVolume> labels;
  for (const Subject* s : training) labels.push_back(s->labels);
  return build_roi_mask(labels, radius);
}

}  // namespace

FoldTrainer patchdnn_trainer(const TrainConfig& config,
                             std::function<void(const FoldTrainingInfo&)> on_trained) {
  return [config, on_trained](std::span<const Subject* const> training, std::size_t fold,
                              std::uint64_t fold_seed) -> Segmenter {
    auto mask = std::make_shared<RoiMask>(training_mask(training, config.mask_radius));
    std::vector<IntensityVolume> images;
    std::vector<LabelVolume> labels;
    for (const Subject* s : training) {
      images.push_back(s->image);
      labels.push_back(s->labels);
    }
    const TrainingPool pool = build_training_pool(
        images, labels, *mask,
        PoolOptions{config.patch_size, config.classes, Normalization::roi_zscore});
    TrainConfig fold_config = config;
    fold_config.seed = fold_seed;
    if (!fold_config.checkpoint_dir.empty())
      fold_config.checkpoint_dir /= "fold" + std::to_string(fold);
    auto result = std::make_shared<TrainResult>(train(pool, fold_config));
    if (on_trained) on_trained({fold, result.get(), mask.get(), pool.size()});
    return [result, mask](const IntensityVolume& image) {
      auto seg = segment_batched(result->net, image, *mask);
      return Segmentation{std::move(seg.labels), seg.seconds};
    };
  };
}

FoldTrainer pbs_trainer(const PbsConfig& config, std::uint32_t mask_radius) {
  config.validate();
  return [config, mask_radius](std::span<const Subject* const> training, std::size_t,
                               std::uint64_t) -> Segmenter {
    auto mask = std::make_shared<RoiMask>(training_mask(training, mask_radius));
    auto images = std::make_shared<std::vector<IntensityVolume>>();
    auto labels = std::make_shared<std::vector<LabelVolume>>();
    for (const Subject* s : training) {
      images->push_back(s->image);
      labels->push_back(s->labels);
    }
    return [config, mask, images, labels](const IntensityVolume& target) {
      const std::size_t k = std::min(config.atlas_count, images->size());
      std::vector<IntensityVolume> chosen_images;
      std::vector<LabelVolume> chosen_labels;
      for (std::size_t id : select_atlases(target, *images, *mask, k)) {
        chosen_images.push_back((*images)[id]);
        chosen_labels.push_back((*labels)[id]);
      }
      auto seg = pbs_segment(target, chosen_images, chosen_labels, *mask, config);
      return Segmentation{std::move(seg.labels), seg.seconds};
    };
  };
}

DiceReport crossval(std::span<const Subject> corpus, std::size_t folds, const TrainConfig& config,
                    std::uint64_t seed) {
  auto report = crossval(corpus, folds, patchdnn_trainer(config), seed);
  report.metadata["patch_size"] = config.patch_size;
  report.metadata["eta"] = config.learning_rate;
  report.metadata["steps"] = config.steps;
  report.metadata["batch"] = config.batch_size;
  report.metadata["dropout"] = config.dropout;
  return report;
}

}  // namespace patchseg
