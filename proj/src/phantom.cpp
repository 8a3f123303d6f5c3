#include "patchseg/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace patchseg {

bool Ellipsoid::contains(double x, double y, double z) const noexcept {
  const double u = (x - center[0]) / radii[0];
  const double v = (y - center[1]) / radii[1];
  const double w = (z - center[2]) / radii[2];
  return u * u + v * v + w * w <= 1.0;
}

PhantomSpec PhantomSpec::standard(std::uint64_t seed) {
  PhantomSpec spec;
  spec.seed = seed;
  const double offset = 3.0 * spec.noise;
  spec.structures = {
      {{22.0, 32.0, 32.0}, {6.0, 4.0, 5.0}, offset, 1},
      {{42.0, 32.0, 32.0}, {6.0, 4.0, 5.0}, offset, 2},
  };
  return spec;
}

std::uint16_t PhantomSpec::classes() const {
  std::uint16_t c = 1;
  for (const auto& s : structures) c = std::max<std::uint16_t>(c, s.label + 1);
  return std::max<std::uint16_t>(c, 2);
}

void PhantomSpec::validate() const {
  if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) throw InvalidArgument("phantom dims must be >= 1");
  if (jitter < 0 || noise < 0) throw InvalidArgument("phantom jitter and noise must be >= 0");
  const std::array<double, 3> extent{double(dims.nx), double(dims.ny), double(dims.nz)};
  for (const auto& s : structures) {
    if (s.label == 0) throw InvalidArgument("phantom structure label must be > 0");
    for (int a = 0; a < 3; ++a) {
      if (!(s.radii[a] > 0)) throw InvalidArgument("phantom radii must be positive");
      if (s.center[a] - s.radii[a] - jitter < 0.0 ||
          s.center[a] + s.radii[a] + jitter > extent[a] - 1.0)
        throw InvalidArgument("phantom structure leaves the volume after maximal jitter");
    }
  }
}

void to_json(nlohmann::json& j, const PhantomSpec& spec) {
  nlohmann::json structures = nlohmann::json::array();
  for (const auto& s : spec.structures)
    structures.push_back({{"center", s.center},
                          {"radii", s.radii},
                          {"intensity_offset", s.intensity_offset},
                          {"label", s.label}});
  j = {{"dims", {spec.dims.nx, spec.dims.ny, spec.dims.nz}},
       {"spacing", {spec.spacing.sx, spec.spacing.sy, spec.spacing.sz}},
       {"structures", structures},
       {"jitter", spec.jitter},
       {"noise", spec.noise},
       {"base_intensity", spec.base_intensity},
       {"ramp", spec.ramp},
       {"seed", spec.seed}};
}

void from_json(const nlohmann::json& j, PhantomSpec& spec) {
  const auto d = j.at("dims").get<std::array<std::uint32_t, 3>>();
  spec.dims = {d[0], d[1], d[2]};
  const auto sp = j.at("spacing").get<std::array<float, 3>>();
  spec.spacing = {sp[0], sp[1], sp[2]};
  spec.structures.clear();
  for (const auto& s : j.at("structures"))
    spec.structures.push_back({s.at("center").get<std::array<double, 3>>(),
                               s.at("radii").get<std::array<double, 3>>(),
                               s.at("intensity_offset").get<double>(),
                               s.at("label").get<std::uint16_t>()});
  spec.jitter = j.at("jitter").get<double>();
  spec.noise = j.at("noise").get<double>();
  spec.base_intensity = j.at("base_intensity").get<double>();
  spec.ramp = j.at("ramp").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
}

Subject generate_subject(const PhantomSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng = Rng(spec.seed).derive(index);
  std::vector<Ellipsoid> placed = spec.structures;
  for (auto& s : placed)
    for (auto& c : s.center) c += rng.uniform(-spec.jitter, spec.jitter);

  const Dims d = spec.dims;
  IntensityVolume image(d, spec.spacing);
  LabelVolume labels(d, spec.spacing, spec.classes());
  const auto norm = [](std::uint32_t i, std::uint32_t n) {
    return n > 1 ? static_cast<double>(i) / (n - 1) : 0.0;
  };
  for (std::uint32_t z = 0; z < d.nz; ++z)
    for (std::uint32_t y = 0; y < d.ny; ++y)
      for (std::uint32_t x = 0; x < d.nx; ++x) {
        double value = spec.base_intensity +
                       spec.ramp * (0.5 * norm(x, d.nx) + 0.3 * norm(y, d.ny) + 0.2 * norm(z, d.nz));
        std::uint16_t label = 0;
        for (const auto& s : placed)
          if (s.contains(x, y, z)) {
            value += s.intensity_offset;
            label = s.label;
          }
        if (spec.noise > 0) value += spec.noise * rng.normal();
        image(x, y, z) = static_cast<float>(value);
        labels(x, y, z) = label;
      }
  char id[32];
  std::snprintf(id, sizeof id, "sub%03zu", index);
  return {id, std::move(image), std::move(labels)};
}

std::vector<Subject> generate_corpus(const PhantomSpec& spec, std::size_t subjects) {
  std::vector<Subject> out;
  out.reserve(subjects);
  for (std::size_t i = 0; i < subjects; ++i) out.push_back(generate_subject(spec, i));
  return out;
}

void write_corpus(const std::filesystem::path& dir, const std::vector<Subject>& subjects,
                  const nlohmann::json& provenance) {
  std::filesystem::create_directories(dir);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : subjects) {
    const std::string img = s.id + "_img.pseg";
    const std::string lbl = s.id + "_lbl.pseg";
    save_volume(s.image, dir / img);
    save_volume(s.labels, dir / lbl);
    list.push_back({{"id", s.id}, {"image", img}, {"labels", lbl}});
  }
  nlohmann::json manifest = {{"subjects", list}, {"provenance", provenance}};
  std::ofstream out(dir / "corpus.json");
  if (!out) throw IoError("cannot write " + (dir / "corpus.json").string());
  out << manifest.dump(2) << '\n';
}

std::vector<Subject> read_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "corpus.json");
  if (!in) throw IoError("cannot open " + (dir / "corpus.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus.json: ") + e.what());
  }
  std::vector<Subject> subjects;
  for (const auto& entry : manifest.at("subjects"))
    subjects.push_back({entry.at("id").get<std::string>(),
                        load_intensity(dir / entry.at("image").get<std::string>()),
                        load_labels(dir / entry.at("labels").get<std::string>())});
  if (subjects.empty()) throw InvalidArgument("corpus " + dir.string() + " lists no subjects");
  for (const auto& s : subjects) {
    require_congruent(subjects.front().image.dims(), s.image.dims(), "corpus image " + s.id);
    require_congruent(s.image.dims(), s.labels.dims(), "corpus labels " + s.id);
  }
  return subjects;
}

}  // namespace patchseg
