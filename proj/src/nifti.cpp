#include <array>
#include <cmath>
#include <cstring>

#include "bytes.hpp"
#include "patchseg/volume.hpp"

namespace patchseg::nifti {
namespace {

using detail::load_scalar;

constexpr std::int32_t kHeaderSize = 348;

// Byte offsets into the NIfTI-1 header.
constexpr std::size_t kDim = 40;
constexpr std::size_t kDatatype = 70;
constexpr std::size_t kPixdim = 76;
constexpr std::size_t kVoxOffset = 108;
constexpr std::size_t kSclSlope = 112;
constexpr std::size_t kSclInter = 116;
constexpr std::size_t kQformCode = 252;
constexpr std::size_t kSformCode = 254;
constexpr std::size_t kQuatern = 256;
constexpr std::size_t kSrow = 280;
constexpr std::size_t kMagicOffset = 344;

constexpr std::int16_t kUint8 = 2;
constexpr std::int16_t kInt16 = 4;
constexpr std::int16_t kFloat32 = 16;

bool is_signed_permutation(const std::array<std::array<double, 3>, 3>& m, double tol) {
  for (const auto& row : m) {
    int nonzero = 0;
    for (double v : row)
      if (std::abs(v) > tol) ++nonzero;
    if (nonzero != 1) return false;
  }
  for (int c = 0; c < 3; ++c) {
    int nonzero = 0;
    for (int r = 0; r < 3; ++r)
      if (std::abs(m[r][c]) > tol) ++nonzero;
    if (nonzero != 1) return false;
  }
  return true;
}

void check_orientation(std::span<const std::byte> bytes, bool big) {
  const auto qform = load_scalar<std::int16_t>(bytes, kQformCode, big);
  const auto sform = load_scalar<std::int16_t>(bytes, kSformCode, big);
  if (sform > 0) {
    std::array<std::array<double, 3>, 3> m{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        m[r][c] = load_scalar<float>(bytes, kSrow + 16 * r + 4 * c, big);
    double scale = 0;
    for (const auto& row : m)
      for (double v : row) scale = std::max(scale, std::abs(v));
    if (scale == 0 || !is_signed_permutation(m, 1e-4 * scale))
      throw FormatError("oblique or sheared sform is not supported");
  }
  if (qform > 0) {
    const double b = load_scalar<float>(bytes, kQuatern, big);
    const double c = load_scalar<float>(bytes, kQuatern + 4, big);
    const double d = load_scalar<float>(bytes, kQuatern + 8, big);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const std::array<std::array<double, 3>, 3> r{{
        {a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
        {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
        {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b},
    }};
    if (!is_signed_permutation(r, 1e-4))
      throw FormatError("oblique qform is not supported");
  }
}

}  // namespace

bool looks_like_nifti(std::span<const std::byte> bytes) {
  if (bytes.size() < kMagicOffset + 4) return false;
  return std::memcmp(bytes.data() + kMagicOffset, "n+1\0", 4) == 0 ||
         std::memcmp(bytes.data() + kMagicOffset, "ni1\0", 4) == 0;
}

Decoded read(std::span<const std::byte> bytes) {
  if (bytes.size() < kHeaderSize) throw FormatError("NIfTI header truncated");
  bool big = std::endian::native == std::endian::big;
  if (load_scalar<std::int32_t>(bytes, 0, big) != kHeaderSize) {
    big = !big;
    if (load_scalar<std::int32_t>(bytes, 0, big) != kHeaderSize)
      throw FormatError("NIfTI sizeof_hdr is not 348");
  }
  if (std::memcmp(bytes.data() + kMagicOffset, "n+1\0", 4) != 0)
    throw FormatError("only single-file NIfTI-1 (magic n+1) is supported");

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = load_scalar<std::int16_t>(bytes, kDim + 2 * i, big);
  const bool three_d = dim[0] == 3 || (dim[0] == 4 && dim[4] == 1);
  if (!three_d) throw FormatError("NIfTI volume must be 3D, dim[0]=" + std::to_string(dim[0]));
  if (dim[1] < 1 || dim[2] < 1 || dim[3] < 1) throw FormatError("NIfTI dims must be positive");

  const auto datatype = load_scalar<std::int16_t>(bytes, kDatatype, big);
  std::size_t width = 0;
  switch (datatype) {
    case kUint8: width = 1; break;
    case kInt16: width = 2; break;
    case kFloat32: width = 4; break;
    default:
      throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype) +
                        " (uint8, int16, float32 only)");
  }

  const float slope = load_scalar<float>(bytes, kSclSlope, big);
  const float inter = load_scalar<float>(bytes, kSclInter, big);
  if (!(slope == 0.0f || slope == 1.0f) || inter != 0.0f)
    throw FormatError("scaled NIfTI data (scl_slope/scl_inter) is not supported");
  check_orientation(bytes, big);

  Spacing spacing{std::abs(load_scalar<float>(bytes, kPixdim + 4, big)),
                  std::abs(load_scalar<float>(bytes, kPixdim + 8, big)),
                  std::abs(load_scalar<float>(bytes, kPixdim + 12, big))};
  if (!(spacing.sx > 0 && spacing.sy > 0 && spacing.sz > 0))
    throw FormatError("NIfTI pixdim must be positive");

  const float vox_offset = load_scalar<float>(bytes, kVoxOffset, big);
  if (!(vox_offset >= 352.0f) || vox_offset != std::floor(vox_offset))
    throw FormatError("invalid NIfTI vox_offset");
  const auto offset = static_cast<std::size_t>(vox_offset);

  const Dims dims{static_cast<std::uint32_t>(dim[1]), static_cast<std::uint32_t>(dim[2]),
                  static_cast<std::uint32_t>(dim[3])};
  const std::size_t count = dims.count();
  if (bytes.size() < offset || bytes.size() - offset != count * width)
    throw DimsMismatch("NIfTI payload size does not match dims " + to_string(dims));

  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t off = offset + i * width;
    switch (datatype) {
      case kUint8: data[i] = load_scalar<std::uint8_t>(bytes, off, big); break;
      case kInt16: data[i] = load_scalar<std::int16_t>(bytes, off, big); break;
      default: data[i] = load_scalar<float>(bytes, off, big); break;
    }
  }
  return {IntensityVolume(dims, spacing, std::move(data)), datatype != kFloat32};
}

}  // namespace patchseg::nifti
