#include "patchseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "bytes.hpp"

namespace patchseg {

using detail::ByteWriter;
using detail::load_scalar;

const char* to_string(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::invalid_argument: return "invalid_argument";
    case ErrorCategory::io: return "io";
    case ErrorCategory::format: return "format";
    case ErrorCategory::dims_mismatch: return "dims_mismatch";
    case ErrorCategory::divergence: return "divergence";
  }
  return "unknown";
}

std::string to_string(const Dims& dims) {
  return std::to_string(dims.nx) + "x" + std::to_string(dims.ny) + "x" +
         std::to_string(dims.nz);
}

void require_congruent(const Dims& a, const Dims& b, const std::string& what) {
  if (!(a == b))
    throw DimsMismatch(what + ": " + to_string(a) + " vs " + to_string(b));
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  std::vector<std::byte> bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

namespace rawgrid {
namespace {

std::size_t scalar_bytes(ScalarCode code) {
  switch (code) {
    case ScalarCode::f32: return 4;
    case ScalarCode::u16: return 2;
    case ScalarCode::u8: return 1;
    case ScalarCode::i16: return 2;
  }
  return 0;
}

template <typename Out>
std::vector<Out> decode_payload(std::span<const std::byte> bytes, ScalarCode code,
                                std::size_t count) {
  std::vector<Out> out(count);
  const std::size_t base = kHeaderBytes;
  const std::size_t width = scalar_bytes(code);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t off = base + i * width;
    switch (code) {
      case ScalarCode::f32: out[i] = static_cast<Out>(load_scalar<float>(bytes, off)); break;
      case ScalarCode::u16: out[i] = static_cast<Out>(load_scalar<std::uint16_t>(bytes, off)); break;
      case ScalarCode::u8: out[i] = static_cast<Out>(load_scalar<std::uint8_t>(bytes, off)); break;
      case ScalarCode::i16: {
        const auto v = load_scalar<std::int16_t>(bytes, off);
        if constexpr (std::is_unsigned_v<Out>) {
          if (v < 0) throw FormatError("negative label value " + std::to_string(v));
        }
        out[i] = static_cast<Out>(v);
        break;
      }
    }
  }
  return out;
}

void put_header(ByteWriter& w, VolumeKind kind, ScalarCode code, const Dims& dims,
                const Spacing& spacing, std::uint32_t classes) {
  w.put_bytes(std::as_bytes(std::span(kMagic)));
  w.put(static_cast<std::uint8_t>(kind));
  w.put(static_cast<std::uint8_t>(code));
  w.put(std::uint16_t{0});
  w.put(dims.nx);
  w.put(dims.ny);
  w.put(dims.nz);
  w.put(spacing.sx);
  w.put(spacing.sy);
  w.put(spacing.sz);
  w.put(classes);
  w.pad_to(kHeaderBytes);
}

}  // namespace

AnyVolume read(std::span<const std::byte> bytes) {
  if (bytes.size() < kHeaderBytes) throw FormatError("raw-grid header truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError("bad raw-grid magic");
  const auto kind_byte = load_scalar<std::uint8_t>(bytes, 8);
  const auto code_byte = load_scalar<std::uint8_t>(bytes, 9);
  if (kind_byte > 1) throw FormatError("unknown volume kind " + std::to_string(kind_byte));
  if (code_byte > 3) throw FormatError("unsupported scalar code " + std::to_string(code_byte));
  if (load_scalar<std::uint16_t>(bytes, 10) != 0)
    throw FormatError("reserved header bytes must be zero");
  const auto kind = static_cast<VolumeKind>(kind_byte);
  const auto code = static_cast<ScalarCode>(code_byte);
  const Dims dims{load_scalar<std::uint32_t>(bytes, 12), load_scalar<std::uint32_t>(bytes, 16),
                  load_scalar<std::uint32_t>(bytes, 20)};
  const Spacing spacing{load_scalar<float>(bytes, 24), load_scalar<float>(bytes, 28),
                        load_scalar<float>(bytes, 32)};
  const auto classes = load_scalar<std::uint32_t>(bytes, 36);
  if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0)
    throw FormatError("raw-grid dims must be positive, got " + to_string(dims));
  if (!(spacing.sx > 0 && spacing.sy > 0 && spacing.sz > 0) ||
      !std::isfinite(spacing.sx) || !std::isfinite(spacing.sy) || !std::isfinite(spacing.sz))
    throw FormatError("raw-grid spacing must be positive and finite");

  const std::size_t payload = bytes.size() - kHeaderBytes;
  const std::size_t width = scalar_bytes(code);
  if (payload != dims.count() * width)
    throw DimsMismatch("header declares " + to_string(dims) + " (" +
                       std::to_string(dims.count()) + " scalars) but payload carries " +
                       std::to_string(payload / width) +
                       (payload % width ? " and a partial scalar" : ""));

  if (kind == VolumeKind::intensity) {
    if (classes != 0) throw FormatError("intensity volume must declare class count 0");
    return IntensityVolume(dims, spacing, decode_payload<float>(bytes, code, dims.count()));
  }
  if (code == ScalarCode::f32) throw FormatError("label volume cannot use float32 scalars");
  if (classes == 0 || classes > 65535)
    throw FormatError("label volume class count out of range: " + std::to_string(classes));
  return LabelVolume(dims, spacing, decode_payload<std::uint16_t>(bytes, code, dims.count()),
                     static_cast<std::uint16_t>(classes));
}

std::vector<std::byte> encode(const IntensityVolume& vol) {
  ByteWriter w;
  put_header(w, VolumeKind::intensity, ScalarCode::f32, vol.dims(), vol.spacing(), 0);
  for (float v : vol.data()) w.put(v);
  return std::move(w.bytes());
}

std::vector<std::byte> encode(const LabelVolume& vol) {
  if (vol.classes() == 0) throw InvalidArgument("label volume needs a class count >= 1");
  vol.check_labels();
  ByteWriter w;
  put_header(w, VolumeKind::label, ScalarCode::u16, vol.dims(), vol.spacing(), vol.classes());
  for (std::uint16_t v : vol.data()) w.put(v);
  return std::move(w.bytes());
}

}  // namespace rawgrid

AnyVolume load_volume(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (nifti::looks_like_nifti(bytes)) return nifti::read(bytes).volume;
  return rawgrid::read(bytes);
}

IntensityVolume load_intensity(const std::filesystem::path& path) {
  auto vol = load_volume(path);
  if (auto* img = std::get_if<IntensityVolume>(&vol)) return std::move(*img);
  throw FormatError(path.string() + " holds a label volume, expected intensities");
}

LabelVolume load_labels(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (nifti::looks_like_nifti(bytes)) {
    auto decoded = nifti::read(bytes);
    if (!decoded.integral)
      throw FormatError(path.string() + ": float NIfTI data cannot be read as labels");
    const auto src = decoded.volume.data();
    std::vector<std::uint16_t> labels(src.size());
    std::uint16_t max_label = 0;
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i] < 0 || src[i] > 65534)
        throw FormatError(path.string() + ": label value out of range");
      labels[i] = static_cast<std::uint16_t>(src[i]);
      max_label = std::max(max_label, labels[i]);
    }
    return LabelVolume(decoded.volume.dims(), decoded.volume.spacing(), std::move(labels),
                       static_cast<std::uint16_t>(max_label + 1));
  }
  auto vol = rawgrid::read(bytes);
  if (auto* lbl = std::get_if<LabelVolume>(&vol)) return std::move(*lbl);
  throw FormatError(path.string() + " holds an intensity volume, expected labels");
}

void save_volume(const IntensityVolume& vol, const std::filesystem::path& path) {
  write_file(path, rawgrid::encode(vol));
}

void save_volume(const LabelVolume& vol, const std::filesystem::path& path) {
  write_file(path, rawgrid::encode(vol));
}

}  // namespace patchseg
