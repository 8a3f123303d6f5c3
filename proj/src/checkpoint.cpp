#include <cstring>

#include <json.hpp>

#include "bytes.hpp"
#include "patchseg/network.hpp"

namespace patchseg {
namespace {

using detail::ByteWriter;
using detail::load_scalar;
using nlohmann::json;

json metadata(const PatchDnn& net) {
  const auto& t = net.topology;
  return {
      {"patch_size", t.patch_size},
      {"classes", t.classes},
      {"pathway_widths", t.pathway_widths},
      {"trunk_widths", t.trunk_widths},
      {"dropout", t.dropout},
      {"normalization", to_string(t.normalization)},
      {"step", net.step},
      {"parameter_count", net.parameter_count()},
      {"scalar", "f32le"},
      {"layer_order",
       {"axial.fe1", "axial.fe2", "coronal.fe1", "coronal.fe2", "sagittal.fe1", "sagittal.fe2",
        "fe3", "fe4", "fe6", "fe8"}},
      {"tensor_layout", "per layer: weights out x in column-major, then bias"},
  };
}

}  // namespace

std::vector<std::byte> encode_checkpoint(const PatchDnn& net) {
  net.topology.validate();
  ByteWriter w;
  w.put_bytes(std::as_bytes(std::span(kCheckpointMagic)));
  w.put(kCheckpointVersion);
  const std::string meta = metadata(net).dump();
  w.put(static_cast<std::uint32_t>(meta.size()));
  w.put_bytes(std::as_bytes(std::span(meta.data(), meta.size())));
  net.params.for_each_layer([&](const DenseLayer<float>& l) {
    for (Eigen::Index i = 0; i < l.weights.size(); ++i) w.put(l.weights.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) w.put(l.bias.data()[i]);
  });
  return std::move(w.bytes());
}

PatchDnn decode_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 16) throw FormatError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw FormatError("bad checkpoint magic");
  const auto version = load_scalar<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = load_scalar<std::uint32_t>(bytes, 12);
  if (16 + std::size_t{meta_len} > bytes.size()) throw FormatError("checkpoint metadata truncated");

  json meta;
  try {
    meta = json::parse(reinterpret_cast<const char*>(bytes.data()) + 16,
                       reinterpret_cast<const char*>(bytes.data()) + 16 + meta_len);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }

  Topology topo;
  try {
    topo.patch_size = meta.at("patch_size").get<std::uint32_t>();
    topo.classes = meta.at("classes").get<std::uint16_t>();
    topo.pathway_widths = meta.at("pathway_widths").get<std::vector<std::uint32_t>>();
    topo.trunk_widths = meta.at("trunk_widths").get<std::vector<std::uint32_t>>();
    topo.dropout = meta.at("dropout").get<double>();
    topo.normalization = normalization_from_string(meta.at("normalization").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  topo.validate();

  Rng unused;
  PatchDnn net = init_network<float>(topo, unused, InitScheme::zeros);
  net.step = meta.value("step", std::uint64_t{0});

  const std::size_t payload = bytes.size() - 16 - meta_len;
  if (payload != net.parameter_count() * sizeof(float))
    throw FormatError("checkpoint payload holds " + std::to_string(payload) + " bytes, topology needs " +
                      std::to_string(net.parameter_count() * sizeof(float)));
  std::size_t offset = 16 + meta_len;
  net.params.for_each_layer([&](DenseLayer<float>& l) {
    for (Eigen::Index i = 0; i < l.weights.size(); ++i, offset += 4)
      l.weights.data()[i] = load_scalar<float>(bytes, offset);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i, offset += 4)
      l.bias.data()[i] = load_scalar<float>(bytes, offset);
  });
  return net;
}

void save_checkpoint(const PatchDnn& net, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(net));
}

PatchDnn load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace patchseg
