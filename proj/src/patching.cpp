#include "patchseg/patching.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

namespace patchseg {

std::size_t RoiMask::count() const noexcept {
  std::size_t n = 0;
  for (auto v : voxels.data()) n += v != 0;
  return n;
}

LabelVolume RoiMask::to_labels() const {
  std::vector<std::uint16_t> data(voxels.size());
  std::ranges::transform(voxels.data(), data.begin(),
                         [](std::uint8_t v) { return static_cast<std::uint16_t>(v != 0); });
  return LabelVolume(voxels.dims(), voxels.spacing(), std::move(data), 2);
}

RoiMask RoiMask::from_labels(const LabelVolume& labels, std::uint32_t radius) {
  std::vector<std::uint8_t> data(labels.size());
  std::ranges::transform(labels.data(), data.begin(),
                         [](std::uint16_t v) { return static_cast<std::uint8_t>(v != 0); });
  return {Volume<std::uint8_t>(labels.dims(), labels.spacing(), std::move(data)), radius};
}

namespace {

// Running max over [i - r, i + r] along one axis, clipped at the borders.
void dilate_axis(Volume<std::uint8_t>& vol, int axis, std::uint32_t r) {
  const Dims d = vol.dims();
  const std::uint32_t len = axis == 0 ? d.nx : axis == 1 ? d.ny : d.nz;
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d.nx : std::size_t{d.nx} * d.ny;
  const std::uint32_t n1 = axis == 0 ? d.ny : d.nx;
  const std::uint32_t n2 = axis == 2 ? d.ny : d.nz;
  auto data = vol.data();
  std::vector<std::uint8_t> line(len);
  std::vector<std::uint32_t> prefix(len + 1);
  for (std::uint32_t b = 0; b < n2; ++b) {
    for (std::uint32_t a = 0; a < n1; ++a) {
      std::size_t base;
      if (axis == 0) base = vol.linear(0, a, b);
      else if (axis == 1) base = vol.linear(a, 0, b);
      else base = vol.linear(a, b, 0);
      for (std::uint32_t i = 0; i < len; ++i) {
        line[i] = data[base + i * stride];
        prefix[i + 1] = prefix[i] + (line[i] != 0);
      }
      for (std::uint32_t i = 0; i < len; ++i) {
        const std::uint32_t lo = i >= r ? i - r : 0;
        const std::uint32_t hi = std::min<std::uint64_t>(std::uint64_t{i} + r + 1, len);
        data[base + i * stride] = prefix[hi] > prefix[lo] ? 1 : 0;
      }
    }
  }
}

}  // namespace

RoiMask build_roi_mask(std::span<const LabelVolume> atlas_labels, std::uint32_t radius) {
  if (atlas_labels.empty()) throw InvalidArgument("build_roi_mask: empty atlas list");
  const auto& first = atlas_labels.front();
  Volume<std::uint8_t> mask(first.dims(), first.spacing());
  auto out = mask.data();
  for (const auto& atlas : atlas_labels) {
    require_congruent(first.dims(), atlas.dims(), "build_roi_mask");
    const auto in = atlas.data();
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in[i] > 0) out[i] = 1;
  }
  if (radius > 0)
    for (int axis = 0; axis < 3; ++axis) dilate_axis(mask, axis, radius);
  return {std::move(mask), radius};
}

void check_patch_size(std::uint32_t p) {
  if (p < 3 || p % 2 == 0)
    throw InvalidArgument("patch size must be odd and >= 3, got " + std::to_string(p));
}

void extract_triplanar_into(const IntensityVolume& vol, VoxelIndex v, std::uint32_t p,
                            float* axial, float* coronal, float* sagittal) {
  const auto h = static_cast<std::int64_t>(p / 2);
  const std::int64_t cx = v.x, cy = v.y, cz = v.z;
  const auto value = [&](std::int64_t x, std::int64_t y, std::int64_t z) -> float {
    return vol.contains(x, y, z)
               ? vol(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y),
                     static_cast<std::uint32_t>(z))
               : 0.0f;
  };
  std::size_t k = 0;
  for (std::int64_t r = -h; r <= h; ++r)
    for (std::int64_t c = -h; c <= h; ++c, ++k) {
      axial[k] = value(cx + c, cy + r, cz);
      coronal[k] = value(cx + c, cy, cz + r);
      sagittal[k] = value(cx, cy + c, cz + r);
    }
}

TriPlanarSample extract_triplanar(const IntensityVolume& vol, VoxelIndex v, std::uint32_t p) {
  check_patch_size(p);
  TriPlanarSample s;
  s.patch_size = p;
  s.center = v;
  s.axial.resize(std::size_t{p} * p);
  s.coronal.resize(std::size_t{p} * p);
  s.sagittal.resize(std::size_t{p} * p);
  extract_triplanar_into(vol, v, p, s.axial.data(), s.coronal.data(), s.sagittal.data());
  return s;
}

const char* to_string(Normalization mode) {
  return mode == Normalization::roi_zscore ? "roi_zscore" : "none";
}

Normalization normalization_from_string(const std::string& name) {
  if (name == "roi_zscore") return Normalization::roi_zscore;
  if (name == "none") return Normalization::none;
  throw InvalidArgument("unknown normalization mode: " + name);
}

ZScore roi_statistics(const IntensityVolume& image, const RoiMask& mask) {
  require_congruent(image.dims(), mask.dims(), "roi_statistics");
  const auto img = image.data();
  const auto m = mask.voxels.data();
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < img.size(); ++i)
    if (m[i]) {
      sum += img[i];
      ++n;
    }
  if (n == 0) return {};
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i)
    if (m[i]) ss += (img[i] - mean) * (img[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  return {mean, sd > 0 ? sd : 1.0};
}

IntensityVolume normalize(const IntensityVolume& image, const RoiMask& mask, Normalization mode) {
  if (mode == Normalization::none) return image;
  const ZScore z = roi_statistics(image, mask);
  std::vector<float> out(image.size());
  const auto in = image.data();
  for (std::size_t i = 0; i < in.size(); ++i)
    out[i] = static_cast<float>((in[i] - z.mean) / z.sd);
  return IntensityVolume(image.dims(), image.spacing(), std::move(out));
}

std::uint16_t training_class(std::uint16_t label, std::uint16_t classes) {
  if (classes == 2) return label > 0 ? 1 : 0;
  if (label >= classes)
    throw InvalidArgument("label " + std::to_string(label) + " does not fit " +
                          std::to_string(classes) + " classes");
  return label;
}

TrainingPool::TrainingPool(std::vector<IntensityVolume> images, std::vector<PoolEntry> foreground,
                           std::vector<PoolEntry> background, PoolOptions options)
    : images_(std::move(images)),
      foreground_(std::move(foreground)),
      background_(std::move(background)),
      options_(options) {
  check_patch_size(options_.patch_size);
}

const PoolEntry& TrainingPool::entry(std::size_t i) const {
  if (i < foreground_.size()) return foreground_[i];
  if (i < size()) return background_[i - foreground_.size()];
  throw InvalidArgument("pool index out of range");
}

TriPlanarSample TrainingPool::materialize(const PoolEntry& e) const {
  auto s = extract_triplanar(images_.at(e.image), e.voxel, options_.patch_size);
  s.label = e.label;
  return s;
}

void TrainingPool::write_manifest(std::ostream& out) const {
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& e = entry(i);
    nlohmann::json rec = {{"image_id", e.image}, {"x", e.voxel.x}, {"y", e.voxel.y},
                          {"z", e.voxel.z},      {"label", e.label}};
    out << rec.dump() << '\n';
  }
}

TrainingPool build_training_pool(std::span<const IntensityVolume> images,
                                 std::span<const LabelVolume> labels, const RoiMask& mask,
                                 PoolOptions options) {
  check_patch_size(options.patch_size);
  if (images.size() != labels.size())
    throw InvalidArgument("build_training_pool: image/label count mismatch");
  std::vector<IntensityVolume> normalized;
  std::vector<PoolEntry> fg, bg;
  const auto m = mask.voxels.data();
  for (std::size_t a = 0; a < images.size(); ++a) {
    require_congruent(images[a].dims(), mask.dims(), "build_training_pool image");
    require_congruent(labels[a].dims(), mask.dims(), "build_training_pool labels");
    normalized.push_back(normalize(images[a], mask, options.normalization));
    const auto lbl = labels[a].data();
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (!m[i]) continue;
      const PoolEntry e{static_cast<std::uint32_t>(a), labels[a].index_of(i),
                        training_class(lbl[i], options.classes)};
      (e.label > 0 ? fg : bg).push_back(e);
    }
  }
  return TrainingPool(std::move(normalized), std::move(fg), std::move(bg), options);
}

std::size_t MiniBatch::foreground_count() const noexcept {
  return static_cast<std::size_t>(
      std::ranges::count_if(samples, [](const auto& s) { return s.label > 0; }));
}

std::vector<const PoolEntry*> draw_balanced(const TrainingPool& pool, std::size_t batch_size,
                                            Rng& rng) {
  if (batch_size < 2) throw InvalidArgument("batch size must be >= 2");
  const auto fg = pool.foreground();
  const auto bg = pool.background();
  if (fg.empty()) throw InvalidArgument("training pool has no foreground entries");
  if (bg.empty()) throw InvalidArgument("training pool has no background entries");
  const std::size_t n_fg = (batch_size + 1) / 2;
  std::vector<const PoolEntry*> out;
  out.reserve(batch_size);
  for (std::size_t i = 0; i < n_fg; ++i) out.push_back(&fg[rng.uniform_index(fg.size())]);
  for (std::size_t i = n_fg; i < batch_size; ++i)
    out.push_back(&bg[rng.uniform_index(bg.size())]);
  return out;
}

MiniBatch next_batch(const TrainingPool& pool, std::size_t batch_size, Rng& rng) {
  MiniBatch batch;
  batch.seed = rng.seed();
  batch.draw_offset = rng.draws();
  for (const PoolEntry* e : draw_balanced(pool, batch_size, rng))
    batch.samples.push_back(pool.materialize(*e));
  return batch;
}

}  // namespace patchseg
