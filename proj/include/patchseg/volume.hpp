#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "patchseg/error.hpp"

namespace patchseg {

struct Dims {
  std::uint32_t nx = 1;
  std::uint32_t ny = 1;
  std::uint32_t nz = 1;

  std::size_t count() const noexcept {
    return static_cast<std::size_t>(nx) * ny * nz;
  }
  friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& dims);

/// Millimetres per voxel along each axis.
struct Spacing {
  float sx = 1.0f;
  float sy = 1.0f;
  float sz = 1.0f;

  friend bool operator==(const Spacing&, const Spacing&) = default;
};

struct VoxelIndex {
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  std::uint32_t z = 0;

  friend bool operator==(const VoxelIndex&, const VoxelIndex&) = default;
};

enum class VolumeKind : std::uint8_t { intensity = 0, label = 1 };

/// Dense 3D grid stored x-fastest: element (x, y, z) lives at
/// x + nx * (y + ny * z).
///
/// Intensity volumes use float and carry classes() == 0. Label volumes use
/// uint16 and every value is below classes(); the constructor and
/// check_labels() enforce that.
template <typename T>
class Volume {
 public:
  using value_type = T;

  Volume() = default;

  Volume(Dims dims, Spacing spacing, std::uint16_t classes = 0)
      : Volume(dims, spacing, std::vector<T>(dims.count(), T{}), classes) {}

  Volume(Dims dims, Spacing spacing, std::vector<T> data,
         std::uint16_t classes = 0)
      : dims_(dims), spacing_(spacing), classes_(classes), data_(std::move(data)) {
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1)
      throw InvalidArgument("volume dims must be >= 1, got " + to_string(dims));
    if (!(spacing.sx > 0 && spacing.sy > 0 && spacing.sz > 0))
      throw InvalidArgument("volume spacing must be positive");
    if (data_.size() != dims.count())
      throw DimsMismatch("payload holds " + std::to_string(data_.size()) +
                         " scalars, dims " + to_string(dims) + " need " +
                         std::to_string(dims.count()));
    if constexpr (!std::is_floating_point_v<T>) {
      if (classes_ > 0) check_labels();
    }
  }

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  std::uint16_t classes() const noexcept { return classes_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }

  bool contains(std::int64_t x, std::int64_t y, std::int64_t z) const noexcept {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.nx && y < dims_.ny &&
           z < dims_.nz;
  }

  std::size_t linear(std::uint32_t x, std::uint32_t y, std::uint32_t z) const noexcept {
    return x + static_cast<std::size_t>(dims_.nx) *
                   (y + static_cast<std::size_t>(dims_.ny) * z);
  }

  VoxelIndex index_of(std::size_t linear_index) const noexcept {
    const auto x = static_cast<std::uint32_t>(linear_index % dims_.nx);
    const auto rest = linear_index / dims_.nx;
    return {x, static_cast<std::uint32_t>(rest % dims_.ny),
            static_cast<std::uint32_t>(rest / dims_.ny)};
  }

  /// Unchecked access.
  T operator()(std::uint32_t x, std::uint32_t y, std::uint32_t z) const noexcept {
    return data_[linear(x, y, z)];
  }
  T& operator()(std::uint32_t x, std::uint32_t y, std::uint32_t z) noexcept {
    return data_[linear(x, y, z)];
  }

  /// Bounds-checked access.
  T at(VoxelIndex idx) const {
    if (!contains(idx.x, idx.y, idx.z))
      throw InvalidArgument("voxel (" + std::to_string(idx.x) + "," +
                            std::to_string(idx.y) + "," + std::to_string(idx.z) +
                            ") outside " + to_string(dims_));
    return data_[linear(idx.x, idx.y, idx.z)];
  }

  void check_labels() const {
    for (T v : data_)
      if (static_cast<std::uint32_t>(v) >= classes_)
        throw FormatError("label value " + std::to_string(v) +
                          " not below class count " + std::to_string(classes_));
  }

  bool congruent(const Dims& other) const noexcept { return dims_ == other; }

 private:
  Dims dims_;
  Spacing spacing_;
  std::uint16_t classes_ = 0;
  std::vector<T> data_;
};

using IntensityVolume = Volume<float>;
using LabelVolume = Volume<std::uint16_t>;
using AnyVolume = std::variant<IntensityVolume, LabelVolume>;

template <typename T>
T voxel_at(const Volume<T>& vol, VoxelIndex idx) {
  return vol.at(idx);
}

/// Throws DimsMismatch unless both dims agree.
void require_congruent(const Dims& a, const Dims& b, const std::string& what);

/// Reads a raw-grid (.pseg) file or a single-file NIfTI-1 volume; the format
/// is detected from the file contents.
AnyVolume load_volume(const std::filesystem::path& path);

/// As load_volume, but requires intensity content (integer NIfTI data is
/// promoted to float).
IntensityVolume load_intensity(const std::filesystem::path& path);

/// As load_volume, but requires label content. Integer NIfTI data is accepted
/// when non-negative; the class count becomes max + 1.
LabelVolume load_labels(const std::filesystem::path& path);

/// Writes the raw-grid format: float32 for intensities, uint16 for labels.
void save_volume(const IntensityVolume& vol, const std::filesystem::path& path);
void save_volume(const LabelVolume& vol, const std::filesystem::path& path);

namespace rawgrid {

inline constexpr char kMagic[8] = {'P', 'S', 'E', 'G', '0', '0', '0', '1'};
inline constexpr std::size_t kHeaderBytes = 64;

enum class ScalarCode : std::uint8_t { f32 = 0, u16 = 1, u8 = 2, i16 = 3 };

AnyVolume read(std::span<const std::byte> bytes);
std::vector<std::byte> encode(const IntensityVolume& vol);
std::vector<std::byte> encode(const LabelVolume& vol);

}  // namespace rawgrid

namespace nifti {

/// Minimal NIfTI-1 reader: single-file "n+1", dim[0] of 3 (or 4 with one
/// frame), uint8/int16/float32 data, no scaling, no oblique orientation.
/// Returned volumes are float intensities; `integral` reports whether the
/// on-disk type was an integer type.
struct Decoded {
  IntensityVolume volume;
  bool integral = false;
};

bool looks_like_nifti(std::span<const std::byte> bytes);
Decoded read(std::span<const std::byte> bytes);

}  // namespace nifti

std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace patchseg
