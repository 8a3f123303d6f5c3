#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "patchseg/network.hpp"
#include "patchseg/patching.hpp"

namespace patchseg {

struct SegmentationResult {
  LabelVolume labels;
  std::size_t voxels_classified = 0;
  /// Normalisation, patch extraction and classification; file I/O excluded.
  double seconds = 0.0;
};

/// Classifies every masked voxel one at a time; voxels outside the mask are
/// background.
SegmentationResult segment(const PatchDnn& net, const IntensityVolume& target, const RoiMask& mask);

inline constexpr std::size_t kDefaultBlockWidth = 512;

/// Same labels as segment(), bit for bit, evaluating masked voxels in blocks
/// of `block_width` columns. Blocks run on worker_count() threads.
SegmentationResult segment_batched(const PatchDnn& net, const IntensityVolume& target,
                                   const RoiMask& mask,
                                   std::size_t block_width = kDefaultBlockWidth);

nlohmann::json sidecar_json(const SegmentationResult& result, const std::string& checkpoint_id,
                            double io_seconds);

}  // namespace patchseg
