#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "patchseg/random.hpp"
#include "patchseg/volume.hpp"

namespace patchseg {

/// Binary region of interest: dilated union of atlas foreground.
struct RoiMask {
  Volume<std::uint8_t> voxels;
  std::uint32_t radius = 0;

  const Dims& dims() const noexcept { return voxels.dims(); }
  bool operator()(std::uint32_t x, std::uint32_t y, std::uint32_t z) const noexcept {
    return voxels(x, y, z) != 0;
  }
  std::size_t count() const noexcept;

  /// Mask saved as a two-class label volume.
  LabelVolume to_labels() const;
  static RoiMask from_labels(const LabelVolume& labels, std::uint32_t radius = 0);
};

/// Voxels within Chebyshev distance `radius` of any foreground voxel (label > 0)
/// of any atlas. Computed as three separable 1D max filters.
RoiMask build_roi_mask(std::span<const LabelVolume> atlas_labels, std::uint32_t radius);

/// Three orthogonal p x p patches through one voxel, stored row-major:
///   axial    rows y, columns x, at the centre z
///   coronal  rows z, columns x, at the centre y
///   sagittal rows z, columns y, at the centre x
/// Cells outside the volume are zero.
struct TriPlanarSample {
  std::uint32_t patch_size = 0;
  std::vector<float> axial;
  std::vector<float> coronal;
  std::vector<float> sagittal;
  VoxelIndex center;
  std::uint16_t label = 0;

  std::span<const float> plane(int i) const noexcept {
    return i == 0 ? std::span<const float>(axial)
                  : i == 1 ? std::span<const float>(coronal) : std::span<const float>(sagittal);
  }
  float center_value(int plane_index) const noexcept {
    return plane(plane_index)[(patch_size * patch_size) / 2];
  }
};

/// Throws InvalidArgument unless p is odd and >= 3.
void check_patch_size(std::uint32_t p);

TriPlanarSample extract_triplanar(const IntensityVolume& vol, VoxelIndex v, std::uint32_t p);

/// Writes the three planes of the patch at `v` straight into caller storage,
/// each of length p*p. Used by the batched paths to avoid per-sample
/// allocation.
void extract_triplanar_into(const IntensityVolume& vol, VoxelIndex v, std::uint32_t p,
                            float* axial, float* coronal, float* sagittal);

enum class Normalization : std::uint8_t { none = 0, roi_zscore = 1 };

const char* to_string(Normalization mode);
Normalization normalization_from_string(const std::string& name);

struct ZScore {
  double mean = 0.0;
  double sd = 1.0;
};

/// Mean and standard deviation of the intensities inside the mask. A flat or
/// empty region yields sd = 1 so the transform stays finite.
ZScore roi_statistics(const IntensityVolume& image, const RoiMask& mask);

/// Applies `mode` to the whole image using statistics from the masked ROI.
IntensityVolume normalize(const IntensityVolume& image, const RoiMask& mask, Normalization mode);

/// Network class for an atlas label: with two classes any label > 0 is
/// foreground, otherwise the label is used as-is and must be below `classes`.
std::uint16_t training_class(std::uint16_t label, std::uint16_t classes);

struct PoolEntry {
  std::uint32_t image = 0;
  VoxelIndex voxel;
  std::uint16_t label = 0;

  friend bool operator==(const PoolEntry&, const PoolEntry&) = default;
};

struct PoolOptions {
  std::uint32_t patch_size = 13;
  std::uint16_t classes = 2;
  Normalization normalization = Normalization::roi_zscore;
};

/// Masked voxels of every atlas, split into foreground (label > 0) and
/// background. Holds the normalised images; patches are cut on demand.
class TrainingPool {
 public:
  TrainingPool(std::vector<IntensityVolume> images, std::vector<PoolEntry> foreground,
               std::vector<PoolEntry> background, PoolOptions options);

  std::size_t size() const noexcept { return foreground_.size() + background_.size(); }
  std::span<const PoolEntry> foreground() const noexcept { return foreground_; }
  std::span<const PoolEntry> background() const noexcept { return background_; }
  /// Foreground entries first, then background.
  const PoolEntry& entry(std::size_t i) const;
  const std::vector<IntensityVolume>& images() const noexcept { return images_; }
  const PoolOptions& options() const noexcept { return options_; }
  std::uint32_t patch_size() const noexcept { return options_.patch_size; }

  TriPlanarSample materialize(const PoolEntry& entry) const;

  /// JSON lines, one {"image_id","x","y","z","label"} record per entry.
  void write_manifest(std::ostream& out) const;

 private:
  std::vector<IntensityVolume> images_;
  std::vector<PoolEntry> foreground_;
  std::vector<PoolEntry> background_;
  PoolOptions options_;
};

TrainingPool build_training_pool(std::span<const IntensityVolume> images,
                                 std::span<const LabelVolume> labels, const RoiMask& mask,
                                 PoolOptions options);

struct MiniBatch {
  std::vector<TriPlanarSample> samples;
  /// Generator seed and stream position before the batch was drawn.
  std::uint64_t seed = 0;
  std::uint64_t draw_offset = 0;

  std::size_t foreground_count() const noexcept;
};

/// ceil(size/2) foreground and floor(size/2) background entries, drawn
/// uniformly with replacement; foreground samples come first.
MiniBatch next_batch(const TrainingPool& pool, std::size_t batch_size, Rng& rng);

/// Indices only, for callers that pack patches themselves.
std::vector<const PoolEntry*> draw_balanced(const TrainingPool& pool, std::size_t batch_size,
                                            Rng& rng);

}  // namespace patchseg
