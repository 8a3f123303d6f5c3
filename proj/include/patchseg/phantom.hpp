#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "patchseg/evaluation.hpp"
#include "patchseg/volume.hpp"

namespace patchseg {

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  double intensity_offset = 0.0;
  std::uint16_t label = 1;

  /// Voxel-centre test: sum(((p - c) / r)^2) <= 1.
  bool contains(double x, double y, double z) const noexcept;
};

/// Synthetic subject generator: smooth background ramp, ellipsoidal
/// structures with their own intensity offset, jittered per subject, plus
/// additive Gaussian noise. Labels are the exact ellipsoid interiors.
struct PhantomSpec {
  Dims dims{64, 64, 64};
  Spacing spacing{1.0f, 1.0f, 1.0f};
  std::vector<Ellipsoid> structures;
  /// Per-axis centre jitter, uniform in [-jitter, +jitter] voxels.
  double jitter = 2.0;
  /// Standard deviation of the additive noise.
  double noise = 10.0;
  double base_intensity = 100.0;
  /// Peak-to-peak size of the background ramp.
  double ramp = 20.0;
  std::uint64_t seed = 1;

  /// 64^3, two (6,4,5)-radius structures labelled 1 and 2 with offset 3*noise.
  static PhantomSpec standard(std::uint64_t seed = 1);

  std::uint16_t classes() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomSpec& spec);
void from_json(const nlohmann::json& j, PhantomSpec& spec);

Subject generate_subject(const PhantomSpec& spec, std::size_t index);
std::vector<Subject> generate_corpus(const PhantomSpec& spec, std::size_t subjects);

/// Writes subNNN_img.pseg / subNNN_lbl.pseg pairs and corpus.json.
void write_corpus(const std::filesystem::path& dir, const std::vector<Subject>& subjects,
                  const nlohmann::json& provenance = nlohmann::json::object());
/// Reads the subjects listed in dir/corpus.json.
std::vector<Subject> read_corpus(const std::filesystem::path& dir);

}  // namespace patchseg
