#include "patchseg/network.hpp"

#include <algorithm>
#include <cmath>

namespace patchseg {

using Eigen::Index;

void Topology::validate() const {
  check_patch_size(patch_size);
  if (classes < 2) throw InvalidArgument("network needs at least 2 classes");
  if (pathway_widths.size() != kPathwayDepth)
    throw InvalidArgument("pathway needs exactly 2 layer widths (FE1, FE2)");
  if (trunk_widths.size() != 3)
    throw InvalidArgument("trunk needs exactly 3 hidden widths (FE3, FE4, FE6)");
  for (auto w : pathway_widths)
    if (w == 0) throw InvalidArgument("layer widths must be positive");
  for (auto w : trunk_widths)
    if (w == 0) throw InvalidArgument("layer widths must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw InvalidArgument("dropout rate must lie in [0, 1)");
}

std::size_t Topology::parameter_count() const {
  const auto dense = [](std::size_t in, std::size_t out) { return out * in + out; };
  const std::size_t p2 = std::size_t{patch_size} * patch_size;
  std::size_t total = 3 * (dense(p2, pathway_widths[0]) +
                           dense(pathway_widths[0], pathway_widths[1]));
  std::size_t in = 3 * std::size_t{pathway_widths[1]};
  for (auto w : trunk_widths) {
    total += dense(in, w);
    in = w;
  }
  return total + dense(in, classes);
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for_each_layer([&](const DenseLayer<T>& l) {
    n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  });
  return n;
}

template <typename T>
bool ParameterSet<T>::all_finite() const {
  bool ok = true;
  for_each_layer([&](const DenseLayer<T>& l) {
    ok = ok && l.weights.allFinite() && l.bias.allFinite();
  });
  return ok;
}

template <typename T>
ParameterSet<T> ParameterSet<T>::zeros_like() const {
  ParameterSet<T> out = *this;
  out.for_each_layer([](DenseLayer<T>& l) {
    l.weights.setZero();
    l.bias.setZero();
  });
  return out;
}

namespace {

template <typename T>
DenseLayer<T> make_layer(Index in, Index out, Activation act) {
  DenseLayer<T> l;
  l.weights = Matrix<T>::Zero(out, in);
  l.bias = DenseLayer<T>::Vector::Zero(out);
  l.activation = act;
  return l;
}

// y = W x + b, one column per sample. Each output element accumulates
// b + w_0 x_0 + w_1 x_1 + ... strictly in input order, so a column's result
// does not depend on how many columns are processed together.
template <typename T>
void affine(const DenseLayer<T>& layer, const Matrix<T>& x, Matrix<T>& y) {
  const Index in = layer.in_width();
  const Index out = layer.out_width();
  const Index n = x.cols();
  if (x.rows() != in)
    throw InvalidArgument("layer expects " + std::to_string(in) + " inputs, got " +
                          std::to_string(x.rows()));
  y.resize(out, n);
  const T* w = layer.weights.data();
  const T* b = layer.bias.data();
  constexpr Index kBlock = 4;
  Index s = 0;
  for (; s + kBlock <= n; s += kBlock) {
    T* ys[kBlock];
    const T* xs[kBlock];
    for (Index r = 0; r < kBlock; ++r) {
      ys[r] = y.data() + (s + r) * out;
      xs[r] = x.data() + (s + r) * in;
      std::copy(b, b + out, ys[r]);
    }
    for (Index i = 0; i < in; ++i) {
      const T* wi = w + i * out;
      for (Index r = 0; r < kBlock; ++r) {
        const T xi = xs[r][i];
        T* __restrict yr = ys[r];
        for (Index o = 0; o < out; ++o) yr[o] += xi * wi[o];
      }
    }
  }
  for (; s < n; ++s) {
    T* __restrict ys = y.data() + s * out;
    const T* xs = x.data() + s * in;
    std::copy(b, b + out, ys);
    for (Index i = 0; i < in; ++i) {
      const T xi = xs[i];
      const T* wi = w + i * out;
      for (Index o = 0; o < out; ++o) ys[o] += xi * wi[o];
    }
  }
}

template <typename T>
void activate(Activation act, const Matrix<T>& pre, Matrix<T>& out) {
  if (act == Activation::relu)
    out = pre.cwiseMax(T(0));
  else
    out = pre;
}

template <typename T>
void softmax_columns(const Matrix<T>& logits, Matrix<T>& probs) {
  probs.resize(logits.rows(), logits.cols());
  for (Index s = 0; s < logits.cols(); ++s) {
    const T m = logits.col(s).maxCoeff();
    T sum = 0;
    for (Index c = 0; c < logits.rows(); ++c) {
      probs(c, s) = std::exp(logits(c, s) - m);
      sum += probs(c, s);
    }
    for (Index c = 0; c < logits.rows(); ++c) probs(c, s) /= sum;
  }
}

template <typename T>
void check_tape(const BasicPatchDnn<T>& net, const Tape<T>& tape) {
  const auto& topo = net.topology;
  const Index n = tape.size();
  const Index p2 = Index{topo.patch_size} * topo.patch_size;
  bool ok = tape.probabilities.rows() == topo.classes && n > 0;
  for (int k = 0; k < kPlanes && ok; ++k) {
    ok = tape.inputs.planes[k].rows() == p2 && tape.inputs.planes[k].cols() == n;
    for (int l = 0; l < kPathwayDepth && ok; ++l)
      ok = tape.pathway_pre[k][l].rows() == net.params.pathways[k][l].out_width() &&
           tape.pathway_pre[k][l].cols() == n;
  }
  for (int l = 0; l < kTrunkDepth && ok; ++l)
    ok = tape.trunk_pre[l].rows() == net.params.trunk[l].out_width() &&
         tape.trunk_pre[l].cols() == n;
  if (ok && tape.train)
    ok = tape.masks.layer5.rows() == net.params.trunk[1].out_width() &&
         tape.masks.layer7.rows() == net.params.trunk[2].out_width() &&
         tape.masks.layer5.cols() == n && tape.masks.layer7.cols() == n;
  if (!ok) throw InvalidArgument("activation tape does not match the network");
}

// Gradients of one dense layer given dL/d(pre-activation); returns dL/d(input).
template <typename T>
Matrix<T> dense_backward(const DenseLayer<T>& layer, const Matrix<T>& input,
                         const Matrix<T>& d_pre, DenseLayer<T>& grad) {
  grad.weights.noalias() = d_pre * input.transpose();
  grad.bias = d_pre.rowwise().sum();
  Matrix<T> d_in;
  d_in.noalias() = layer.weights.transpose() * d_pre;
  return d_in;
}

template <typename T>
Matrix<T> relu_mask(const Matrix<T>& d_out, const Matrix<T>& pre) {
  return d_out.cwiseProduct((pre.array() > T(0)).template cast<T>().matrix());
}

}  // namespace

template <typename T>
BasicPatchDnn<T> init_network(const Topology& topology, Rng& rng, InitScheme scheme) {
  topology.validate();
  BasicPatchDnn<T> net;
  net.topology = topology;
  const Index p2 = Index{topology.patch_size} * topology.patch_size;
  const auto& pw = topology.pathway_widths;
  const auto& tw = topology.trunk_widths;
  for (auto& plane : net.params.pathways) {
    plane[0] = make_layer<T>(p2, pw[0], Activation::relu);
    plane[1] = make_layer<T>(pw[0], pw[1], Activation::relu);
  }
  net.params.trunk[0] = make_layer<T>(3 * Index{pw[1]}, tw[0], Activation::relu);
  net.params.trunk[1] = make_layer<T>(tw[0], tw[1], Activation::relu);
  net.params.trunk[2] = make_layer<T>(tw[1], tw[2], Activation::relu);
  net.params.trunk[3] = make_layer<T>(tw[2], topology.classes, Activation::linear);
  if (scheme == InitScheme::he_normal) {
    net.params.for_each_layer([&](DenseLayer<T>& l) {
      const double sd = std::sqrt(2.0 / static_cast<double>(l.in_width()));
      for (Index i = 0; i < l.weights.size(); ++i)
        l.weights.data()[i] = static_cast<T>(sd * rng.normal());
    });
  }
  return net;
}

template <typename U, typename T>
BasicPatchDnn<U> cast_network(const BasicPatchDnn<T>& net) {
  BasicPatchDnn<U> out;
  out.topology = net.topology;
  out.step = net.step;
  for (int k = 0; k < kPlanes; ++k)
    for (int l = 0; l < kPathwayDepth; ++l) {
      const auto& src = net.params.pathways[k][l];
      auto& dst = out.params.pathways[k][l];
      dst.weights = src.weights.template cast<U>();
      dst.bias = src.bias.template cast<U>();
      dst.activation = src.activation;
    }
  for (int l = 0; l < kTrunkDepth; ++l) {
    const auto& src = net.params.trunk[l];
    auto& dst = out.params.trunk[l];
    dst.weights = src.weights.template cast<U>();
    dst.bias = src.bias.template cast<U>();
    dst.activation = src.activation;
  }
  return out;
}

template <typename T>
InputBatch<T> pack_samples(std::span<const TriPlanarSample> samples, std::uint32_t patch_size) {
  const Index p2 = Index{patch_size} * patch_size;
  const auto n = static_cast<Index>(samples.size());
  InputBatch<T> batch;
  for (auto& plane : batch.planes) plane.resize(p2, n);
  for (Index s = 0; s < n; ++s) {
    const auto& sample = samples[static_cast<std::size_t>(s)];
    if (sample.patch_size != patch_size)
      throw InvalidArgument("patch size mismatch: network expects " + std::to_string(patch_size) +
                            ", sample has " + std::to_string(sample.patch_size));
    for (int k = 0; k < kPlanes; ++k) {
      const auto src = sample.plane(k);
      for (Index i = 0; i < p2; ++i) batch.planes[k](i, s) = static_cast<T>(src[i]);
    }
  }
  return batch;
}

template <typename T>
DropoutMasks<T> draw_dropout_masks(const Topology& topology, Index samples, Rng& rng) {
  const Index w5 = topology.trunk_widths.at(1);
  const Index w7 = topology.trunk_widths.at(2);
  DropoutMasks<T> m;
  m.layer5 = Matrix<T>::Ones(w5, samples);
  m.layer7 = Matrix<T>::Ones(w7, samples);
  const double eps = topology.dropout;
  if (eps == 0.0) return m;
  const T scale = static_cast<T>(1.0 / (1.0 - eps));
  for (Index s = 0; s < samples; ++s) {
    for (Index u = 0; u < w5; ++u) m.layer5(u, s) = rng.bernoulli(eps) ? T(0) : scale;
    for (Index u = 0; u < w7; ++u) m.layer7(u, s) = rng.bernoulli(eps) ? T(0) : scale;
  }
  return m;
}

template <typename T>
Tape<T> forward_batch(const BasicPatchDnn<T>& net, InputBatch<T> inputs,
                      const DropoutMasks<T>* masks) {
  const auto& topo = net.topology;
  const Index p2 = Index{topo.patch_size} * topo.patch_size;
  const Index n = inputs.size();
  for (const auto& plane : inputs.planes)
    if (plane.rows() != p2 || plane.cols() != n)
      throw InvalidArgument("patch size mismatch: network expects " +
                            std::to_string(topo.patch_size) + "x" +
                            std::to_string(topo.patch_size) + " patches");
  Tape<T> tape;
  tape.inputs = std::move(inputs);
  tape.train = masks != nullptr;
  const auto& P = net.params;

  const Index w2 = P.pathways[0][1].out_width();
  tape.merged.resize(3 * w2, n);
  for (int k = 0; k < kPlanes; ++k) {
    const Matrix<T>* x = &tape.inputs.planes[k];
    for (int l = 0; l < kPathwayDepth; ++l) {
      affine(P.pathways[k][l], *x, tape.pathway_pre[k][l]);
      activate(P.pathways[k][l].activation, tape.pathway_pre[k][l], tape.pathway_out[k][l]);
      x = &tape.pathway_out[k][l];
    }
    tape.merged.middleRows(k * w2, w2) = *x;
  }

  const Matrix<T>* x = &tape.merged;
  for (int l = 0; l < kTrunkDepth; ++l) {
    affine(P.trunk[l], *x, tape.trunk_pre[l]);
    activate(P.trunk[l].activation, tape.trunk_pre[l], tape.trunk_out[l]);
    if (masks && l == 1) tape.trunk_out[l] = tape.trunk_out[l].cwiseProduct(masks->layer5);
    if (masks && l == 2) tape.trunk_out[l] = tape.trunk_out[l].cwiseProduct(masks->layer7);
    x = &tape.trunk_out[l];
  }
  if (masks) {
    if (masks->layer5.rows() != P.trunk[1].out_width() || masks->layer5.cols() != n ||
        masks->layer7.rows() != P.trunk[2].out_width() || masks->layer7.cols() != n)
      throw InvalidArgument("dropout masks do not match the batch");
    tape.masks = *masks;
  }
  softmax_columns(tape.trunk_pre[kTrunkDepth - 1], tape.probabilities);
  return tape;
}

template <typename T>
ForwardResult<T> forward(const BasicPatchDnn<T>& net, const TriPlanarSample& sample, Mode mode,
                         Rng* rng) {
  auto inputs = pack_samples<T>(std::span(&sample, 1), net.topology.patch_size);
  ForwardResult<T> result;
  if (mode == Mode::train) {
    if (!rng) throw InvalidArgument("train-mode forward needs a generator for dropout");
    const auto masks = draw_dropout_masks<T>(net.topology, 1, *rng);
    result.tape = forward_batch(net, std::move(inputs), &masks);
  } else {
    result.tape = forward_batch(net, std::move(inputs));
  }
  result.distribution = result.tape.probabilities.col(0);
  return result;
}

template <typename T>
std::uint16_t classify(const BasicPatchDnn<T>& net, const TriPlanarSample& sample) {
  return argmax_class(forward(net, sample, Mode::test).distribution);
}

template <typename T>
double cross_entropy(const Tape<T>& tape, Index column, std::uint16_t target) {
  const auto logits = tape.trunk_pre[kTrunkDepth - 1].col(column);
  double m = -INFINITY;
  for (Index c = 0; c < logits.size(); ++c) m = std::max(m, static_cast<double>(logits[c]));
  double sum = 0.0;
  for (Index c = 0; c < logits.size(); ++c) sum += std::exp(static_cast<double>(logits[c]) - m);
  return m + std::log(sum) - static_cast<double>(logits[target]);
}

template <typename T>
BackwardResult<T> backward_batch(const BasicPatchDnn<T>& net, const Tape<T>& tape,
                                 std::span<const std::uint16_t> targets) {
  check_tape(net, tape);
  const Index n = tape.size();
  if (static_cast<Index>(targets.size()) != n)
    throw InvalidArgument("backward: one target per sample required");
  for (auto t : targets)
    if (t >= net.topology.classes) throw InvalidArgument("backward: target class out of range");

  BackwardResult<T> result;
  auto& G = result.gradients;
  G = net.params.zeros_like();
  const auto& P = net.params;

  double loss = 0.0;
  Matrix<T> d_pre = tape.probabilities;
  for (Index s = 0; s < n; ++s) {
    loss += cross_entropy(tape, s, targets[static_cast<std::size_t>(s)]);
    d_pre(targets[static_cast<std::size_t>(s)], s) -= T(1);
  }
  result.mean_loss = loss / static_cast<double>(n);
  d_pre /= static_cast<T>(n);

  // FE8 (linear) down to FE3.
  Matrix<T> d_in = dense_backward(P.trunk[3], tape.trunk_out[2], d_pre, G.trunk[3]);
  for (int l = 2; l >= 0; --l) {
    if (tape.train && l == 2) d_in = d_in.cwiseProduct(tape.masks.layer7);
    if (tape.train && l == 1) d_in = d_in.cwiseProduct(tape.masks.layer5);
    d_pre = relu_mask(d_in, tape.trunk_pre[l]);
    const Matrix<T>& input = l == 0 ? tape.merged : tape.trunk_out[l - 1];
    d_in = dense_backward(P.trunk[l], input, d_pre, G.trunk[l]);
  }

  const Index w2 = P.pathways[0][1].out_width();
  for (int k = 0; k < kPlanes; ++k) {
    Matrix<T> d_path = d_in.middleRows(k * w2, w2);
    for (int l = kPathwayDepth - 1; l >= 0; --l) {
      d_pre = relu_mask(d_path, tape.pathway_pre[k][l]);
      const Matrix<T>& input = l == 0 ? tape.inputs.planes[k] : tape.pathway_out[k][l - 1];
      if (l == 0) {
        G.pathways[k][l].weights.noalias() = d_pre * input.transpose();
        G.pathways[k][l].bias = d_pre.rowwise().sum();
      } else {
        d_path = dense_backward(P.pathways[k][l], input, d_pre, G.pathways[k][l]);
      }
    }
  }
  return result;
}

template <typename T>
ParameterSet<T> backward(const BasicPatchDnn<T>& net, const Tape<T>& tape, std::uint16_t target) {
  if (tape.size() != 1) throw InvalidArgument("backward: tape holds more than one sample");
  return backward_batch(net, tape, std::span(&target, 1)).gradients;
}

#define PATCHSEG_INSTANTIATE(T)                                                              \
  template struct ParameterSet<T>;                                                            \
  template BasicPatchDnn<T> init_network<T>(const Topology&, Rng&, InitScheme);               \
  template InputBatch<T> pack_samples<T>(std::span<const TriPlanarSample>, std::uint32_t);    \
  template DropoutMasks<T> draw_dropout_masks<T>(const Topology&, Index, Rng&);               \
  template Tape<T> forward_batch<T>(const BasicPatchDnn<T>&, InputBatch<T>,                  \
                                    const DropoutMasks<T>*);                                  \
  template ForwardResult<T> forward<T>(const BasicPatchDnn<T>&, const TriPlanarSample&, Mode, \
                                       Rng*);                                                 \
  template std::uint16_t classify<T>(const BasicPatchDnn<T>&, const TriPlanarSample&);        \
  template double cross_entropy<T>(const Tape<T>&, Index, std::uint16_t);                    \
  template BackwardResult<T> backward_batch<T>(const BasicPatchDnn<T>&, const Tape<T>&,       \
                                               std::span<const std::uint16_t>);               \
  template ParameterSet<T> backward<T>(const BasicPatchDnn<T>&, const Tape<T>&, std::uint16_t);

PATCHSEG_INSTANTIATE(float)
PATCHSEG_INSTANTIATE(double)
#undef PATCHSEG_INSTANTIATE

template BasicPatchDnn<double> cast_network<double, float>(const BasicPatchDnn<float>&);
template BasicPatchDnn<float> cast_network<float, double>(const BasicPatchDnn<double>&);
template BasicPatchDnn<float> cast_network<float, float>(const BasicPatchDnn<float>&);
template BasicPatchDnn<double> cast_network<double, double>(const BasicPatchDnn<double>&);

}  // namespace patchseg
