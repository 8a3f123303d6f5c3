#include "patchseg/inference.hpp"

#include <chrono>

#include "patchseg/parallel.hpp"

namespace patchseg {
namespace {

using Clock = std::chrono::steady_clock;

void check_inputs(const PatchDnn& net, const IntensityVolume& target, const RoiMask& mask) {
  require_congruent(target.dims(), mask.dims(), "segment: target vs mask");
  net.topology.validate();
}

std::vector<std::size_t> masked_voxels(const RoiMask& mask) {
  std::vector<std::size_t> out;
  const auto m = mask.voxels.data();
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) out.push_back(i);
  return out;
}

}  // namespace

SegmentationResult segment(const PatchDnn& net, const IntensityVolume& target, const RoiMask& mask) {
  check_inputs(net, target, mask);
  const auto start = Clock::now();
  const IntensityVolume image = normalize(target, mask, net.topology.normalization);
  SegmentationResult result{LabelVolume(target.dims(), target.spacing(), net.topology.classes), 0, 0.0};
  auto out = result.labels.data();
  for (std::size_t i : masked_voxels(mask)) {
    const auto sample = extract_triplanar(image, image.index_of(i), net.topology.patch_size);
    out[i] = classify(net, sample);
    ++result.voxels_classified;
  }
  result.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return result;
}

SegmentationResult segment_batched(const PatchDnn& net, const IntensityVolume& target,
                                   const RoiMask& mask, std::size_t block_width) {
  check_inputs(net, target, mask);
  if (block_width == 0) throw InvalidArgument("block width must be >= 1");
  const auto start = Clock::now();
  const IntensityVolume image = normalize(target, mask, net.topology.normalization);
  SegmentationResult result{LabelVolume(target.dims(), target.spacing(), net.topology.classes), 0, 0.0};
  const auto voxels = masked_voxels(mask);
  auto out = result.labels.data();
  const std::uint32_t p = net.topology.patch_size;
  const Eigen::Index p2 = Eigen::Index{p} * p;
  const std::size_t blocks = (voxels.size() + block_width - 1) / block_width;

  parallel_for(blocks, [&](std::size_t b) {
    const std::size_t first = b * block_width;
    const std::size_t last = std::min(voxels.size(), first + block_width);
    const auto n = static_cast<Eigen::Index>(last - first);
    InputBatch<float> inputs;
    for (auto& plane : inputs.planes) plane.resize(p2, n);
    for (Eigen::Index s = 0; s < n; ++s)
      extract_triplanar_into(image, image.index_of(voxels[first + s]), p,
                             inputs.planes[0].col(s).data(), inputs.planes[1].col(s).data(),
                             inputs.planes[2].col(s).data());
    const auto tape = forward_batch(net, std::move(inputs));
    for (Eigen::Index s = 0; s < n; ++s)
      out[voxels[first + s]] = argmax_class(tape.probabilities.col(s));
  });
  result.voxels_classified = voxels.size();
  result.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return result;
}

nlohmann::json sidecar_json(const SegmentationResult& result, const std::string& checkpoint_id,
                            double io_seconds) {
  return {{"voxels_classified", result.voxels_classified},
          {"wall_seconds", result.seconds},
          {"io_seconds", io_seconds},
          {"checkpoint", checkpoint_id}};
}

}  // namespace patchseg
