#include <algorithm>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "patchseg/inference.hpp"
#include "patchseg/training.hpp"
#include "support.hpp"

using namespace patchseg;

namespace {

struct Scene {
  Subject subject = generate_subject(PhantomSpec::standard(8), 0);
  RoiMask mask = build_roi_mask(std::span(&subject.labels, 1), 2);
};

}  // namespace

TEST(Segment, EmptyMaskIsAllBackground) {
  const Scene s;
  Rng rng(1);
  const auto net = init_network<float>(Topology{}, rng);
  const RoiMask empty = RoiMask::from_labels(LabelVolume(s.subject.image.dims(), {}, 2));
  for (const auto& r : {segment(net, s.subject.image, empty), segment_batched(net, s.subject.image, empty)}) {
    EXPECT_EQ(r.voxels_classified, 0u);
    EXPECT_EQ(r.labels.dims(), s.subject.image.dims());
    EXPECT_TRUE(std::ranges::all_of(r.labels.data(), [](auto v) { return v == 0; }));
  }
}

TEST(Segment, ZeroNetLabelsEverythingBackground) {
  const Scene s;
  Rng rng(1);
  const auto net = init_network<float>(Topology{}, rng, InitScheme::zeros);
  const auto r = segment_batched(net, s.subject.image, s.mask);
  EXPECT_EQ(r.voxels_classified, s.mask.count());
  EXPECT_TRUE(std::ranges::all_of(r.labels.data(), [](auto v) { return v == 0; }));
}

TEST(Segment, BatchedMatchesUnbatchedBitForBit) {
  const Scene s;
  Rng rng(2);
  Topology t;
  t.patch_size = 9;
  t.classes = 3;
  auto net = init_network<float>(t, rng);
  // Nudge biases so all classes appear.
  net.params.trunk[3].bias << 0.0f, 0.3f, -0.2f;
  const auto single = segment(net, s.subject.image, s.mask);
  for (std::size_t width : {1u, 7u, 512u, 100000u}) {
    const auto batched = segment_batched(net, s.subject.image, s.mask, width);
    EXPECT_TRUE(std::ranges::equal(batched.labels.data(), single.labels.data())) << "width " << width;
    EXPECT_EQ(batched.voxels_classified, single.voxels_classified);
  }
  std::size_t kinds[3] = {0, 0, 0};
  for (auto v : single.labels.data()) ++kinds[v];
  EXPECT_GT(kinds[1] + kinds[2], 0u);
}

TEST(Segment, BatchedProbabilitiesMatchSingleSampleForward) {
  const Scene s;
  Rng rng(3);
  const auto net = init_network<float>(Topology{}, rng);
  const auto image = normalize(s.subject.image, s.mask, Normalization::roi_zscore);
  std::vector<TriPlanarSample> samples;
  for (std::size_t i = 0; i < image.size() && samples.size() < 37; i += 997)
    samples.push_back(extract_triplanar(image, image.index_of(i), 13));
  const auto tape = forward_batch(net, pack_samples<float>(samples, 13));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto one = forward(net, samples[i], Mode::test).distribution;
    ASSERT_TRUE(one == tape.probabilities.col(static_cast<Eigen::Index>(i))) << i;
  }
}

TEST(Segment, MaskConfinementAndCongruence) {
  const Scene s;
  Rng rng(4);
  auto net = init_network<float>(Topology{}, rng);
  net.params.trunk[3].bias << -5.0f, 5.0f;  // everything foreground
  const auto r = segment_batched(net, s.subject.image, s.mask);
  for (std::size_t i = 0; i < r.labels.size(); ++i)
    ASSERT_EQ(r.labels.data()[i] != 0, s.mask.voxels.data()[i] != 0);
  IntensityVolume other(Dims{64, 64, 63}, {});
  EXPECT_THROW(segment(net, other, s.mask), DimsMismatch);
  EXPECT_THROW(segment_batched(net, other, s.mask), DimsMismatch);
}

TEST(Segment, OverfitNetReproducesTrainingLabels) {
  const fixture::OverfitData data;
  TrainConfig config;
  config.learning_rate = 1e-2;
  config.steps = 2000;
  config.seed = 5;
  const auto result = train(*data.pool, config);
  const auto seg = segment_batched(result.net, data.subject.image, data.mask);
  for (std::size_t i = 0; i < data.pool->size(); ++i) {
    const auto& e = data.pool->entry(i);
    EXPECT_EQ(seg.labels(e.voxel.x, e.voxel.y, e.voxel.z), e.label) << "entry " << i;
  }
}

TEST(Segment, Sidecar) {
  SegmentationResult r{LabelVolume(Dims{2, 2, 2}, {}, 2), 5, 0.25};
  const auto j = sidecar_json(r, "m.pdnn@step3", 0.5);
  EXPECT_EQ(j.at("voxels_classified"), 5);
  EXPECT_EQ(j.at("checkpoint"), "m.pdnn@step3");
  EXPECT_DOUBLE_EQ(j.at("wall_seconds").get<double>(), 0.25);
  EXPECT_DOUBLE_EQ(j.at("io_seconds").get<double>(), 0.5);
}
