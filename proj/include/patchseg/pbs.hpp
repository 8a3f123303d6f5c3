#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <json.hpp>

#include "patchseg/inference.hpp"
#include "patchseg/patching.hpp"

namespace patchseg {

/// Nonlocal patch label fusion with SSD similarity.
struct PbsConfig {
  enum class Bandwidth { adaptive, fixed };

  /// Cube side of the compared patches (5 or 7 in the usual settings).
  std::uint32_t patch_side = 5;
  /// Cube side of the candidate search window.
  std::uint32_t window_side = 11;
  /// Atlases kept after SSD ranking.
  std::size_t atlas_count = 10;
  /// adaptive: h = min candidate SSD + bandwidth_floor, per voxel.
  Bandwidth bandwidth_policy = Bandwidth::adaptive;
  /// h for the fixed policy.
  double bandwidth = 1.0;
  double bandwidth_floor = 1e-6;

  void validate() const;
};

void merge_json(PbsConfig& config, const nlohmann::json& j);
nlohmann::json to_json(const PbsConfig& config);

/// Sum of squared differences; shapes must match.
double ssd(std::span<const float> a, std::span<const float> b);

/// side^3 cube around v, x-fastest, zero outside the volume.
std::vector<float> extract_cube(const IntensityVolume& vol, VoxelIndex v, std::uint32_t side);

struct AtlasScore {
  std::size_t atlas = 0;
  double ssd = 0.0;
};

/// All atlases ranked by whole-ROI voxelwise SSD against the target,
/// ascending, ties by atlas index.
std::vector<AtlasScore> rank_atlases(const IntensityVolume& target,
                                     std::span<const IntensityVolume> atlases, const RoiMask& mask);

/// Indices of the `k` best-ranked atlases.
std::vector<std::size_t> select_atlases(const IntensityVolume& target,
                                        std::span<const IntensityVolume> atlases,
                                        const RoiMask& mask, std::size_t k);

/// Weight-normalised class votes at one voxel. Candidates are every atlas
/// voxel inside the search window (and inside the volume); each votes for its
/// label with weight exp(-SSD/h). Votes are reduced in canonical
/// (SSD, label) order so the result does not depend on atlas order.
std::vector<double> pbs_votes(const IntensityVolume& target, std::span<const IntensityVolume> images,
                              std::span<const LabelVolume> labels, VoxelIndex v,
                              const PbsConfig& config);

/// Fuses labels for every masked voxel using all given atlases (select them
/// first with select_atlases). Unmasked voxels are background; ties go to
/// the lowest class.
SegmentationResult pbs_segment(const IntensityVolume& target, std::span<const IntensityVolume> images,
                               std::span<const LabelVolume> labels, const RoiMask& mask,
                               const PbsConfig& config);

}  // namespace patchseg
