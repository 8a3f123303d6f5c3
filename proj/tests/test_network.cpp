#include <cmath>

#include "oracles.hpp"
#include "patchseg/network.hpp"
#include "support.hpp"

using namespace patchseg;
using patchseg::oracle::random_sample;

namespace {

Topology small_topology(std::uint32_t p = 5, double dropout = 0.5) {
  Topology t;
  t.patch_size = p;
  t.pathway_widths = {6, 4};
  t.trunk_widths = {8, 6, 5};
  t.dropout = dropout;
  return t;
}

}  // namespace

TEST(Topology, DefaultParameterCount) {
  const Topology t;
  // Independent count: per-plane 169->96->48, trunk 144->128->64->32->2.
  const std::size_t pathway = 3 * ((169 * 96 + 96) + (96 * 48 + 48));
  const std::size_t trunk = (144 * 128 + 128) + (128 * 64 + 64) + (64 * 32 + 32) + (32 * 2 + 2);
  EXPECT_EQ(t.parameter_count(), pathway + trunk);
  EXPECT_EQ(t.parameter_count(), 91890u);
  EXPECT_GE(t.parameter_count(), 50000u);
  EXPECT_LE(t.parameter_count(), 500000u);
  Rng rng(1);
  const auto net = init_network<float>(t, rng);
  EXPECT_EQ(net.params.scalar_count(), t.parameter_count());
  std::size_t walked = 0;
  net.params.for_each_layer([&](const DenseLayer<float>& l) { walked += l.weights.size() + l.bias.size(); });
  EXPECT_EQ(walked, t.parameter_count());
}

TEST(Topology, LayerShapes) {
  Rng rng(2);
  const auto net = init_network<float>(small_topology(), rng);
  for (const auto& plane : net.params.pathways) {
    EXPECT_EQ(plane[0].in_width(), 25);
    EXPECT_EQ(plane[1].in_width(), plane[0].out_width());
  }
  EXPECT_EQ(net.params.trunk[0].in_width(), 3 * 4);
  EXPECT_EQ(net.params.trunk[3].out_width(), 2);
  EXPECT_EQ(net.params.trunk[3].activation, Activation::linear);
}

TEST(Topology, Validation) {
  Topology t;
  t.pathway_widths = {96};
  EXPECT_THROW(t.validate(), InvalidArgument);
  t = Topology{};
  t.trunk_widths = {128, 0, 32};
  EXPECT_THROW(t.validate(), InvalidArgument);
  t = Topology{};
  t.dropout = 1.0;
  EXPECT_THROW(t.validate(), InvalidArgument);
  t = Topology{};
  t.patch_size = 12;
  EXPECT_THROW(t.validate(), InvalidArgument);
}

TEST(Init, HeScaleAndDeterminism) {
  Rng a(7), b(7);
  const auto x = init_network<float>(Topology{}, a);
  const auto y = init_network<float>(Topology{}, b);
  EXPECT_TRUE(x.params.pathways[0][0].weights == y.params.pathways[0][0].weights);
  EXPECT_TRUE(x.params.trunk[3].weights == y.params.trunk[3].weights);
  const auto& w = x.params.pathways[1][0].weights;
  const double sd = std::sqrt(w.template cast<double>().array().square().mean());
  EXPECT_NEAR(sd, std::sqrt(2.0 / 169.0), 0.01);
  EXPECT_TRUE(x.params.trunk[0].bias.isZero());
}

TEST(Forward, ZeroNetIsUniformAndPicksClassZero) {
  Rng rng(1);
  Topology t = small_topology();
  t.classes = 3;
  const auto net = init_network<float>(t, rng, InitScheme::zeros);
  for (int i = 0; i < 5; ++i) {
    const auto s = random_sample(5, rng);
    const auto out = forward(net, s, Mode::test).distribution;
    for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(out[c], 1.0f / 3.0f);
    EXPECT_EQ(classify(net, s), 0);
  }
}

TEST(Forward, SoftmaxIsNormalised) {
  Rng rng(3);
  const auto net = init_network<float>(Topology{}, rng);
  for (int i = 0; i < 50; ++i) {
    auto s = random_sample(13, rng);
    for (auto& v : s.axial) v *= 50.0f;  // large logits
    const auto train = forward(net, s, Mode::train, &rng).distribution;
    const auto test = forward(net, s, Mode::test).distribution;
    for (const auto* d : {&train, &test}) {
      EXPECT_NEAR(d->sum(), 1.0, 1e-6);
      EXPECT_GE(d->minCoeff(), 0.0f);
      EXPECT_LE(d->maxCoeff(), 1.0f);
    }
  }
}

TEST(Forward, DropoutOffMatchesTestMode) {
  Rng rng(4);
  const auto net = init_network<float>(small_topology(5, 0.0), rng);
  for (int i = 0; i < 20; ++i) {
    const auto s = random_sample(5, rng);
    const auto draws_before = rng.draws();
    const auto train = forward(net, s, Mode::train, &rng).distribution;
    EXPECT_EQ(rng.draws(), draws_before);
    const auto test = forward(net, s, Mode::test).distribution;
    EXPECT_TRUE(train == test);
  }
}

TEST(Forward, MicroNetworkMatchesHandComputation) {
  Topology t;
  t.patch_size = 3;
  t.pathway_widths = {1, 1};
  t.trunk_widths = {1, 1, 1};
  t.dropout = 0.0;
  Rng rng(0);
  auto net = init_network<double>(t, rng, InitScheme::zeros);
  // Pathway k: FE1 weights all (0.1 * (k + 1)), bias -0.2; FE2 weight 1.5, bias 0.05.
  for (int k = 0; k < 3; ++k) {
    net.params.pathways[k][0].weights.setConstant(0.1 * (k + 1));
    net.params.pathways[k][0].bias.setConstant(-0.2);
    net.params.pathways[k][1].weights.setConstant(1.5);
    net.params.pathways[k][1].bias.setConstant(0.05);
  }
  net.params.trunk[0].weights << 0.7, -0.4, 0.3;
  net.params.trunk[0].bias << 0.1;
  net.params.trunk[1].weights << 2.0;
  net.params.trunk[1].bias << -0.3;
  net.params.trunk[2].weights << 0.9;
  net.params.trunk[2].bias << 0.2;
  net.params.trunk[3].weights << 1.2, -0.8;
  net.params.trunk[3].bias << 0.0, 0.25;

  TriPlanarSample s;
  s.patch_size = 3;
  s.axial.assign(9, 1.0f);
  s.coronal.assign(9, 2.0f);
  s.sagittal.assign(9, 0.5f);

  const auto relu = [](double v) { return v > 0 ? v : 0.0; };
  // Plane sums: 9, 18, 4.5.
  const double g0 = relu(1.5 * relu(0.1 * 9 - 0.2) + 0.05);
  const double g1 = relu(1.5 * relu(0.2 * 18 - 0.2) + 0.05);
  const double g2 = relu(1.5 * relu(0.3 * 4.5 - 0.2) + 0.05);
  const double g3 = relu(0.7 * g0 - 0.4 * g1 + 0.3 * g2 + 0.1);
  const double g4 = relu(2.0 * g3 - 0.3);
  const double g6 = relu(0.9 * g4 + 0.2);
  const double f0 = 1.2 * g6, f1 = -0.8 * g6 + 0.25;
  const double p1 = std::exp(f1) / (std::exp(f0) + std::exp(f1));

  const auto out = forward(net, s, Mode::test).distribution;
  EXPECT_NEAR(out[1], p1, 1e-12);
  EXPECT_NEAR(out[0], 1.0 - p1, 1e-12);

  // A strongly negative FE3 bias silences FE3 and FE4; only FE6's bias reaches the logits.
  net.params.trunk[0].bias << -100.0;
  const auto off = forward(net, s, Mode::test).distribution;
  const double h0 = 1.2 * 0.2, h1 = -0.8 * 0.2 + 0.25;
  EXPECT_NEAR(off[1], std::exp(h1) / (std::exp(h0) + std::exp(h1)), 1e-12);
}

TEST(Forward, ShiftInvariantArgmax) {
  Rng rng(5);
  Topology t = small_topology();
  t.classes = 3;
  auto net = init_network<float>(t, rng);
  for (int i = 0; i < 30; ++i) {
    const auto s = random_sample(5, rng);
    const auto before = forward(net, s, Mode::test).distribution;
    const auto cls = classify(net, s);
    auto shifted = net;
    shifted.params.trunk[3].bias.array() += 3.75f;
    EXPECT_EQ(classify(shifted, s), cls);
    const auto after = forward(shifted, s, Mode::test).distribution;
    EXPECT_TRUE(after.isApprox(before, 1e-5f));
  }
  Eigen::Vector2d d(0.3, 0.7);
  EXPECT_EQ(argmax_class(d), 1);
  Eigen::Vector3d tie(0.4, 0.4, 0.2);
  EXPECT_EQ(argmax_class(tie), 0);
}

TEST(Forward, PatchSizeMismatch) {
  Rng rng(6);
  const auto net = init_network<float>(Topology{}, rng);
  const auto s = random_sample(11, rng);
  EXPECT_THROW(forward(net, s, Mode::test), InvalidArgument);
  EXPECT_THROW(classify(net, s), InvalidArgument);
  EXPECT_THROW(forward(net, random_sample(13, rng), Mode::train), InvalidArgument);
}

TEST(Dropout, ExpectationMatchesDeterministicPass) {
  Rng rng(8);
  const Topology t = small_topology(5, 0.5);
  const auto net = init_network<double>(t, rng);
  const auto s = random_sample(5, rng);
  const std::vector<TriPlanarSample> one{s};
  const auto inputs = pack_samples<double>(one, 5);
  const auto reference = forward_batch(net, inputs).trunk_out[1];
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(reference.rows());
  double mask7 = 0.0;
  const int draws = 20000;
  for (int k = 0; k < draws; ++k) {
    const auto masks = draw_dropout_masks<double>(t, 1, rng);
    for (Eigen::Index i = 0; i < masks.layer5.size(); ++i) {
      const double m = masks.layer5(i);
      ASSERT_TRUE(m == 0.0 || m == 2.0);
    }
    const auto tape = forward_batch(net, inputs, &masks);
    sum += tape.trunk_out[1].col(0);
    mask7 += masks.layer7.mean();
  }
  const Eigen::VectorXd mean = sum / draws;
  ASSERT_GT(reference.norm(), 0.0);
  EXPECT_LT((mean - reference.col(0)).norm() / reference.norm(), 0.02);
  EXPECT_NEAR(mask7 / draws, 1.0, 0.02);
}

TEST(Dropout, MasksConsumeGeneratorPerSample) {
  const Topology t = small_topology();
  Rng batch_rng(3), single_rng(3);
  const auto batch = draw_dropout_masks<float>(t, 4, batch_rng);
  for (Eigen::Index i = 0; i < 4; ++i) {
    const auto one = draw_dropout_masks<float>(t, 1, single_rng);
    EXPECT_TRUE(one.layer5.col(0) == batch.layer5.col(i));
    EXPECT_TRUE(one.layer7.col(0) == batch.layer7.col(i));
  }
}

TEST(Backward, GradientCheckRandomNets) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = oracle::check_gradients(seed);
    EXPECT_LT(r.max_relative_error, 1e-4) << "seed " << seed << " over " << r.parameters << " parameters";
  }
}

TEST(Backward, SingleSampleMatchesBatchOfOne) {
  Rng rng(9);
  const auto net = init_network<double>(small_topology(), rng);
  const auto s = random_sample(5, rng, 1);
  const auto fwd = forward(net, s, Mode::train, &rng);
  const auto g = backward(net, fwd.tape, 1);
  const std::uint16_t target = 1;
  const auto gb = backward_batch(net, fwd.tape, std::span(&target, 1)).gradients;
  EXPECT_TRUE(g.trunk[0].weights.isApprox(gb.trunk[0].weights));
  EXPECT_TRUE(g.pathways[2][0].weights.isApprox(gb.pathways[2][0].weights));
}

TEST(Backward, ReluAndDropoutBlockGradient) {
  Rng rng(10);
  auto net = init_network<double>(small_topology(), rng);
  net.params.trunk[0].bias[2] = -1e6;  // FE3 unit 2 never fires
  const auto s = random_sample(5, rng, 1);
  const std::vector<TriPlanarSample> one{s};
  auto masks = draw_dropout_masks<double>(net.topology, 1, rng);
  masks.layer5.setConstant(2.0);
  masks.layer5(3, 0) = 0.0;  // FE4 unit 3 dropped
  masks.layer7.setConstant(2.0);
  const auto tape = forward_batch(net, pack_samples<double>(one, 5), &masks);
  const auto g = backward(net, tape, 1);
  EXPECT_TRUE(g.trunk[0].weights.row(2).isZero(0.0));
  EXPECT_EQ(g.trunk[0].bias[2], 0.0);
  EXPECT_TRUE(g.trunk[1].weights.row(3).isZero(0.0));
  EXPECT_EQ(g.trunk[1].bias[3], 0.0);
  EXPECT_TRUE(g.trunk[2].weights.col(3).isZero(0.0));
  EXPECT_FALSE(g.trunk[3].weights.isZero(0.0));
}

TEST(Backward, TapeMismatchIsRejected) {
  Rng rng(11);
  const auto net = init_network<double>(small_topology(), rng);
  Topology other = small_topology();
  other.trunk_widths = {7, 6, 5};
  const auto net2 = init_network<double>(other, rng);
  const auto fwd = forward(net, random_sample(5, rng), Mode::test);
  EXPECT_THROW(backward(net2, fwd.tape, 0), InvalidArgument);
  EXPECT_THROW(backward(net, fwd.tape, 5), InvalidArgument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  patchseg::testing::TempDir dir;
  Rng rng(12);
  Topology t;
  t.classes = 3;
  t.dropout = 0.3;
  auto net = init_network<float>(t, rng);
  net.step = 1234;
  save_checkpoint(net, dir / "m.pdnn");
  const auto back = load_checkpoint(dir / "m.pdnn");
  EXPECT_EQ(back.topology, net.topology);
  EXPECT_EQ(back.step, 1234u);
  const auto a = oracle::scalars(net.params);
  auto copy = back;
  const auto b = oracle::scalars(copy.params);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(*a[i], *b[i]);
  for (int i = 0; i < 100; ++i) {
    const auto s = random_sample(13, rng);
    ASSERT_TRUE(forward(net, s, Mode::test).distribution == forward(back, s, Mode::test).distribution);
  }
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(net));
}

TEST(Checkpoint, CorruptionIsRejected) {
  Rng rng(13);
  const auto net = init_network<float>(small_topology(), rng);
  auto bytes = encode_checkpoint(net);
  auto bad = bytes;
  bad[0] = std::byte{'X'};
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  auto version = bytes;
  version[8] = std::byte{9};
  EXPECT_THROW(decode_checkpoint(version), FormatError);
  EXPECT_THROW(decode_checkpoint(std::span(bytes).first(bytes.size() - 4)), FormatError);
  EXPECT_THROW(decode_checkpoint(std::span(bytes).first(10)), FormatError);
  EXPECT_NO_THROW(decode_checkpoint(bytes));
  EXPECT_THROW(load_checkpoint("/nonexistent/m.pdnn"), IoError);
}

TEST(Checkpoint, PatchSizeMismatchAtForward) {
  Rng rng(14);
  const auto net = decode_checkpoint(encode_checkpoint(init_network<float>(Topology{}, rng)));
  EXPECT_THROW(forward(net, random_sample(11, rng), Mode::test), InvalidArgument);
}
