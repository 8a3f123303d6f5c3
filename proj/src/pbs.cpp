#include "patchseg/pbs.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <utility>

#include "patchseg/parallel.hpp"

namespace patchseg {

void PbsConfig::validate() const {
  if (patch_side % 2 == 0 || patch_side < 1) throw InvalidArgument("PBS patch side must be odd");
  if (window_side % 2 == 0) throw InvalidArgument("PBS window side must be odd");
  if (patch_side > window_side)
    throw InvalidArgument("PBS patch side must not exceed the window side");
  if (atlas_count < 1) throw InvalidArgument("PBS needs at least one atlas");
  if (bandwidth_policy == Bandwidth::fixed && !(bandwidth > 0.0))
    throw InvalidArgument("PBS bandwidth h must be > 0");
  if (!(bandwidth_floor > 0.0)) throw InvalidArgument("PBS bandwidth floor must be > 0");
}

void merge_json(PbsConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidArgument("PBS config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (key != "patch" && key != "window" && key != "k" && key != "h" && key != "h_floor")
      throw InvalidArgument("unknown PBS config key: " + key);
  try {
    c.patch_side = j.value("patch", c.patch_side);
    c.window_side = j.value("window", c.window_side);
    c.atlas_count = j.value("k", c.atlas_count);
    if (j.contains("h")) {
      const auto& h = j.at("h");
      if (h.is_string()) {
        if (h.get<std::string>() != "adaptive") throw InvalidArgument("h must be a number or \"adaptive\"");
        c.bandwidth_policy = PbsConfig::Bandwidth::adaptive;
      } else {
        c.bandwidth_policy = PbsConfig::Bandwidth::fixed;
        c.bandwidth = h.get<double>();
      }
    }
    c.bandwidth_floor = j.value("h_floor", c.bandwidth_floor);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("PBS config: ") + e.what());
  }
}

nlohmann::json to_json(const PbsConfig& c) {
  nlohmann::json j = {{"patch", c.patch_side},
                      {"window", c.window_side},
                      {"k", c.atlas_count},
                      {"h_floor", c.bandwidth_floor}};
  if (c.bandwidth_policy == PbsConfig::Bandwidth::adaptive)
    j["h"] = "adaptive";
  else
    j["h"] = c.bandwidth;
  return j;
}

double ssd(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw InvalidArgument("ssd: patch shapes differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += d * d;
  }
  return sum;
}

std::vector<float> extract_cube(const IntensityVolume& vol, VoxelIndex v, std::uint32_t side) {
  const auto h = static_cast<std::int64_t>(side / 2);
  std::vector<float> out;
  out.reserve(std::size_t{side} * side * side);
  for (std::int64_t dz = -h; dz <= h; ++dz)
    for (std::int64_t dy = -h; dy <= h; ++dy)
      for (std::int64_t dx = -h; dx <= h; ++dx) {
        const std::int64_t x = v.x + dx, y = v.y + dy, z = v.z + dz;
        out.push_back(vol.contains(x, y, z)
                          ? vol(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y),
                                static_cast<std::uint32_t>(z))
                          : 0.0f);
      }
  return out;
}

std::vector<AtlasScore> rank_atlases(const IntensityVolume& target,
                                     std::span<const IntensityVolume> atlases, const RoiMask& mask) {
  require_congruent(target.dims(), mask.dims(), "rank_atlases: target vs mask");
  std::vector<AtlasScore> scores;
  const auto t = target.data();
  const auto m = mask.voxels.data();
  for (std::size_t a = 0; a < atlases.size(); ++a) {
    require_congruent(target.dims(), atlases[a].dims(), "rank_atlases: target vs atlas");
    const auto img = atlases[a].data();
    double sum = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (m[i]) {
        const double d = static_cast<double>(t[i]) - static_cast<double>(img[i]);
        sum += d * d;
      }
    scores.push_back({a, sum});
  }
  std::ranges::sort(scores, [](const AtlasScore& l, const AtlasScore& r) {
    return l.ssd != r.ssd ? l.ssd < r.ssd : l.atlas < r.atlas;
  });
  return scores;
}

std::vector<std::size_t> select_atlases(const IntensityVolume& target,
                                        std::span<const IntensityVolume> atlases,
                                        const RoiMask& mask, std::size_t k) {
  if (k < 1 || k > atlases.size())
    throw InvalidArgument("select_atlases: K must lie in [1, atlas count]");
  const auto ranked = rank_atlases(target, atlases, mask);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < k; ++i) ids.push_back(ranked[i].atlas);
  return ids;
}

namespace {

// Zero-padded copy so every patch read is in bounds.
struct Padded {
  std::vector<float> data;
  std::int64_t pad = 0;
  std::int64_t nx = 0, ny = 0, nz = 0;

  Padded(const IntensityVolume& vol, std::int64_t margin) : pad(margin) {
    const Dims d = vol.dims();
    nx = d.nx + 2 * pad;
    ny = d.ny + 2 * pad;
    nz = d.nz + 2 * pad;
    data.assign(static_cast<std::size_t>(nx * ny * nz), 0.0f);
    for (std::uint32_t z = 0; z < d.nz; ++z)
      for (std::uint32_t y = 0; y < d.ny; ++y)
        for (std::uint32_t x = 0; x < d.nx; ++x) data[index(x, y, z)] = vol(x, y, z);
  }

  std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((x + pad) + nx * ((y + pad) + ny * (z + pad)));
  }
};

struct Candidate {
  double ssd;
  std::uint16_t label;
};

class Fuser {
 public:
  Fuser(const IntensityVolume& target, std::span<const IntensityVolume> images,
        std::span<const LabelVolume> labels, const PbsConfig& config)
      : config_(config), labels_(labels), dims_(target.dims()) {
    config.validate();
    if (images.empty()) throw InvalidArgument("pbs: no atlases");
    if (images.size() != labels.size()) throw InvalidArgument("pbs: image/label count mismatch");
    const std::int64_t margin = config.patch_side / 2 + config.window_side / 2;
    target_ = std::make_unique<Padded>(target, margin);
    for (std::size_t a = 0; a < images.size(); ++a) {
      require_congruent(target.dims(), images[a].dims(), "pbs: target vs atlas image");
      require_congruent(target.dims(), labels[a].dims(), "pbs: target vs atlas labels");
      atlases_.emplace_back(images[a], margin);
      classes_ = std::max<std::uint16_t>(classes_, labels[a].classes());
    }
  }

  std::uint16_t classes() const noexcept { return classes_; }

  std::vector<double> votes(VoxelIndex v, std::vector<Candidate>& cands,
                            std::vector<float>& cube) const {
    const std::int64_t pr = config_.patch_side / 2;
    const std::int64_t wr = config_.window_side / 2;
    const std::int64_t side = config_.patch_side;
    cube.resize(static_cast<std::size_t>(side * side * side));
    std::size_t k = 0;
    for (std::int64_t dz = -pr; dz <= pr; ++dz)
      for (std::int64_t dy = -pr; dy <= pr; ++dy) {
        const float* row = &target_->data[target_->index(v.x - pr, v.y + dy, v.z + dz)];
        for (std::int64_t dx = 0; dx < side; ++dx) cube[k++] = row[dx];
      }

    cands.clear();
    for (std::size_t a = 0; a < atlases_.size(); ++a) {
      const Padded& atlas = atlases_[a];
      const LabelVolume& lbl = labels_[a];
      for (std::int64_t oz = -wr; oz <= wr; ++oz)
        for (std::int64_t oy = -wr; oy <= wr; ++oy)
          for (std::int64_t ox = -wr; ox <= wr; ++ox) {
            const std::int64_t cx = v.x + ox, cy = v.y + oy, cz = v.z + oz;
            if (!lbl.contains(cx, cy, cz)) continue;
            double sum = 0.0;
            std::size_t c = 0;
            for (std::int64_t dz = -pr; dz <= pr; ++dz)
              for (std::int64_t dy = -pr; dy <= pr; ++dy) {
                const float* row = &atlas.data[atlas.index(cx - pr, cy + dy, cz + dz)];
                for (std::int64_t dx = 0; dx < side; ++dx, ++c) {
                  const double d = static_cast<double>(cube[c]) - static_cast<double>(row[dx]);
                  sum += d * d;
                }
              }
            cands.push_back({sum, lbl(static_cast<std::uint32_t>(cx), static_cast<std::uint32_t>(cy),
                                      static_cast<std::uint32_t>(cz))});
          }
    }
    std::ranges::sort(cands, [](const Candidate& l, const Candidate& r) {
      return l.ssd != r.ssd ? l.ssd < r.ssd : l.label < r.label;
    });

    std::vector<double> votes(classes_, 0.0);
    if (cands.empty()) {
      votes[0] = 1.0;
      return votes;
    }
    const double h = config_.bandwidth_policy == PbsConfig::Bandwidth::adaptive
                         ? cands.front().ssd + config_.bandwidth_floor
                         : config_.bandwidth;
    double total = 0.0;
    for (const auto& c : cands) {
      const double w = std::exp(-c.ssd / h);
      votes[c.label] += w;
      total += w;
    }
    if (total == 0.0) {
      // Every weight underflowed: rescale relative to the best candidate.
      for (const auto& c : cands) {
        const double w = std::exp(-(c.ssd - cands.front().ssd) / h);
        votes[c.label] += w;
        total += w;
      }
    }
    for (double& v : votes) v /= total;
    return votes;
  }

 private:
  PbsConfig config_;
  std::span<const LabelVolume> labels_;
  Dims dims_;
  std::unique_ptr<Padded> target_;
  std::vector<Padded> atlases_;
  std::uint16_t classes_ = 1;
};

}  // namespace

std::vector<double> pbs_votes(const IntensityVolume& target, std::span<const IntensityVolume> images,
                              std::span<const LabelVolume> labels, VoxelIndex v,
                              const PbsConfig& config) {
  const Fuser fuser(target, images, labels, config);
  std::vector<Candidate> cands;
  std::vector<float> cube;
  target.at(v);
  return fuser.votes(v, cands, cube);
}

SegmentationResult pbs_segment(const IntensityVolume& target, std::span<const IntensityVolume> images,
                               std::span<const LabelVolume> labels, const RoiMask& mask,
                               const PbsConfig& config) {
  require_congruent(target.dims(), mask.dims(), "pbs_segment: target vs mask");
  const auto start = std::chrono::steady_clock::now();
  const Fuser fuser(target, images, labels, config);
  SegmentationResult result{
      LabelVolume(target.dims(), target.spacing(), std::max<std::uint16_t>(fuser.classes(), 2)), 0,
      0.0};
  std::vector<std::size_t> voxels;
  const auto m = mask.voxels.data();
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) voxels.push_back(i);

  auto out = result.labels.data();
  constexpr std::size_t kChunk = 64;
  parallel_for((voxels.size() + kChunk - 1) / kChunk, [&](std::size_t chunk) {
    std::vector<Candidate> cands;
    std::vector<float> cube;
    const std::size_t last = std::min(voxels.size(), (chunk + 1) * kChunk);
    for (std::size_t i = chunk * kChunk; i < last; ++i) {
      const auto votes = fuser.votes(target.index_of(voxels[i]), cands, cube);
      out[voxels[i]] = argmax_class(Eigen::Map<const Eigen::VectorXd>(
          votes.data(), static_cast<Eigen::Index>(votes.size())));
    }
  });
  result.voxels_classified = voxels.size();
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace patchseg
