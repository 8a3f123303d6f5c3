#pragma once

#include <optional>
#include <vector>

#include "patchseg/patching.hpp"
#include "patchseg/phantom.hpp"

namespace patchseg::fixture {

/// One phantom subject, its ROI, the full pool, and a 20-entry pool of ten
/// foreground and ten background voxels spread across the ROI.
struct OverfitData {
  Subject subject;
  RoiMask mask;
  std::optional<TrainingPool> full;
  std::optional<TrainingPool> pool;

  explicit OverfitData(std::uint32_t patch_size = 13, std::uint64_t seed = 1)
      : subject(generate_subject(PhantomSpec::standard(seed), 0)) {
    mask = build_roi_mask(std::span(&subject.labels, 1), 3);
    full.emplace(build_training_pool(std::span(&subject.image, 1), std::span(&subject.labels, 1), mask,
                                     PoolOptions{patch_size, 2, Normalization::roi_zscore}));
    const auto spread = [](std::span<const PoolEntry> entries) {
      std::vector<PoolEntry> out;
      for (std::size_t i = 0; i < 10; ++i) out.push_back(entries[(2 * i + 1) * entries.size() / 20]);
      return out;
    };
    pool.emplace(full->images(), spread(full->foreground()), spread(full->background()), full->options());
  }

  std::vector<TriPlanarSample> samples() const {
    std::vector<TriPlanarSample> out;
    for (std::size_t i = 0; i < pool->size(); ++i) out.push_back(pool->materialize(pool->entry(i)));
    return out;
  }
};

}  // namespace patchseg::fixture
