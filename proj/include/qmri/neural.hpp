#pragma once

// MRFResnet encoder (compressed aligned fingerprint -> T1/T2), shallow decoder
// (T1/T2 -> compressed clean fingerprint), backprop, Adam training, training-set
// generation and network inference over TSMIs.

#include "qmri/core.hpp"
#include "qmri/epg.hpp"
#include "qmri/inference.hpp"
#include "qmri/io.hpp"
#include "qmri/subspace.hpp"

#include <algorithm>
#include <numbers>
#include <numeric>
#include <random>

namespace qmri {

inline RMatrix relu(const RMatrix& a) { return a.cwiseMax(0.0); }
inline RMatrix relu_mask(const RMatrix& a) { return (a.array() > 0.0).cast<double>().matrix(); }

struct ResBlock {
  RMatrix w1, w2;
  RVector b1, b2;
};

struct MrfResnet {
  Index input_dim = 0;
  Index width = 0;
  RMatrix lift;  // fixed width x input_dim map, empty when width == input_dim
  std::vector<ResBlock> blocks;
  RMatrix w_out;
  RVector b_out;
  RVector output_scale;  // outputs are scale * phi(w_out h + b_out), in ms
  bool trained = false;

  Index outputs() const { return w_out.rows(); }
  Index depth() const { return static_cast<Index>(blocks.size()); }

  Index parameter_count() const {
    Index n = w_out.size() + b_out.size();
    for (const auto& b : blocks) n += b.w1.size() + b.w2.size() + b.b1.size() + b.b2.size();
    return n;
  }

  static MrfResnet zeros(Index s, Index w, Index n_blocks, Index p) {
    MrfResnet net;
    net.input_dim = s;
    net.width = w;
    if (w != s) {
      net.lift = RMatrix::Zero(w, s);
      for (Index i = 0; i < std::min(w, s); ++i) net.lift(i, i) = 1.0;
    }
    net.blocks.resize(static_cast<std::size_t>(n_blocks));
    for (auto& b : net.blocks) {
      b.w1 = RMatrix::Zero(w, w);
      b.w2 = RMatrix::Zero(w, w);
      b.b1 = RVector::Zero(w);
      b.b2 = RVector::Zero(w);
    }
    net.w_out = RMatrix::Zero(p, w);
    net.b_out = RVector::Zero(p);
    net.output_scale = RVector::Ones(p);
    return net;
  }
};

struct DecoderNet {
  RMatrix w1, w2;
  RVector b1, b2;
  RVector input_scale;  // theta is divided by this before the first layer
  double target_phase = 0.0;  // phase removed from the compressed fingerprints it was trained on
  bool trained = false;

  Index inputs() const { return w1.cols(); }
  Index hidden() const { return w1.rows(); }
  Index outputs() const { return w2.rows(); }
  Index parameter_count() const { return w1.size() + w2.size() + b1.size() + b2.size(); }

  static DecoderNet zeros(Index p, Index hidden, Index s) {
    DecoderNet net;
    net.w1 = RMatrix::Zero(hidden, p);
    net.b1 = RVector::Zero(hidden);
    net.w2 = RMatrix::Zero(s, hidden);
    net.b2 = RVector::Zero(s);
    net.input_scale = RVector::Ones(p);
    return net;
  }
};

// Ordered views of the trainable parameters.
using ParamRefs = std::vector<std::pair<double*, Index>>;

inline ParamRefs param_refs(MrfResnet& n) {
  ParamRefs r;
  for (auto& b : n.blocks) {
    r.emplace_back(b.w1.data(), b.w1.size());
    r.emplace_back(b.b1.data(), b.b1.size());
    r.emplace_back(b.w2.data(), b.w2.size());
    r.emplace_back(b.b2.data(), b.b2.size());
  }
  r.emplace_back(n.w_out.data(), n.w_out.size());
  r.emplace_back(n.b_out.data(), n.b_out.size());
  return r;
}

inline ParamRefs param_refs(DecoderNet& n) {
  return {{n.w1.data(), n.w1.size()}, {n.b1.data(), n.b1.size()}, {n.w2.data(), n.w2.size()},
          {n.b2.data(), n.b2.size()}};
}

template <class Net>
RVector flatten_params(const Net& net) {
  auto refs = param_refs(const_cast<Net&>(net));
  Index n = 0;
  for (auto& [p, k] : refs) n += k;
  RVector out(n);
  Index o = 0;
  for (auto& [p, k] : refs) {
    std::copy(p, p + k, out.data() + o);
    o += k;
  }
  return out;
}

template <class Net>
void assign_params(Net& net, const RVector& flat) {
  auto refs = param_refs(net);
  Index o = 0;
  for (auto& [p, k] : refs) {
    require(o + k <= flat.size(), ErrorCode::shape_mismatch, "parameter vector too short");
    std::copy(flat.data() + o, flat.data() + o + k, p);
    o += k;
  }
  require(o == flat.size(), ErrorCode::shape_mismatch, "parameter vector too long");
}

inline void check_finite(const MrfResnet& n) {
  bool ok = n.w_out.allFinite() && n.b_out.allFinite() && n.output_scale.allFinite();
  for (const auto& b : n.blocks) ok = ok && b.w1.allFinite() && b.w2.allFinite() && b.b1.allFinite() && b.b2.allFinite();
  require(ok, ErrorCode::numerical, "encoder has non-finite weights");
}

// ---- encoder ---------------------------------------------------------------

struct EncoderTrace {
  std::vector<RMatrix> h;   // h[0] .. h[N], width x B
  std::vector<RMatrix> a1;  // inner pre-activations per block
  std::vector<RMatrix> u;   // outer pre-activations per block (h + g)
  RMatrix z;                // scale * (w_out h_N + b_out), before the final ReLU
  RMatrix theta;            // phi(z)
};

inline EncoderTrace encoder_trace(const MrfResnet& net, const RMatrix& x) {
  require(x.rows() == net.input_dim, ErrorCode::shape_mismatch,
          "encoder input has " + std::to_string(x.rows()) + " rows, expected " + std::to_string(net.input_dim));
  EncoderTrace t;
  t.h.reserve(net.blocks.size() + 1);
  t.h.push_back(net.lift.size() ? RMatrix(net.lift * x) : x);
  for (const auto& b : net.blocks) {
    RMatrix a1 = (b.w1 * t.h.back()).colwise() + b.b1;
    RMatrix g = (b.w2 * relu(a1)).colwise() + b.b2;
    RMatrix u = t.h.back() + g;
    t.h.push_back(relu(u));
    t.a1.push_back(std::move(a1));
    t.u.push_back(std::move(u));
  }
  t.z = net.output_scale.asDiagonal() * RMatrix((net.w_out * t.h.back()).colwise() + net.b_out);
  t.theta = relu(t.z);
  return t;
}

// Columns of x are inputs; returns p x B outputs in ms.
inline RMatrix encoder_forward(const MrfResnet& net, const RMatrix& x) { return encoder_trace(net, x).theta; }

inline RVector encoder_forward(const MrfResnet& net, const RVector& x) {
  return encoder_trace(net, RMatrix(x)).theta.col(0);
}

// Sum over the batch of ||(theta - target) / scale||^2 and its gradient (written into grad).
inline double encoder_backward(const MrfResnet& net, const RMatrix& x, const RMatrix& targets, MrfResnet& grad) {
  require(targets.rows() == net.outputs() && targets.cols() == x.cols(), ErrorCode::shape_mismatch,
          "encoder targets shape mismatch");
  const EncoderTrace t = encoder_trace(net, x);
  const RVector inv = net.output_scale.cwiseInverse();
  const RMatrix resid = inv.asDiagonal() * RMatrix(t.theta - targets);
  const double loss = resid.squaredNorm();
  require(std::isfinite(loss), ErrorCode::numerical, "encoder loss is not finite");

  grad = MrfResnet::zeros(net.input_dim, net.width, net.depth(), net.outputs());
  grad.lift = net.lift;
  grad.output_scale = net.output_scale;
  // d loss / d (w_out h + b_out): theta_j = scale_j relu(a_j), resid_j = relu(a_j) - t_j / scale_j
  const RMatrix delta = (2.0 * resid).cwiseProduct(relu_mask(t.z));
  grad.w_out = delta * t.h.back().transpose();
  grad.b_out = delta.rowwise().sum();
  RMatrix dh = net.w_out.transpose() * delta;
  for (Index i = net.depth() - 1; i >= 0; --i) {
    const auto& b = net.blocks[static_cast<std::size_t>(i)];
    auto& gb = grad.blocks[static_cast<std::size_t>(i)];
    const RMatrix du = dh.cwiseProduct(relu_mask(t.u[static_cast<std::size_t>(i)]));
    const RMatrix& a1 = t.a1[static_cast<std::size_t>(i)];
    gb.w2 = du * relu(a1).transpose();
    gb.b2 = du.rowwise().sum();
    const RMatrix da1 = (b.w2.transpose() * du).cwiseProduct(relu_mask(a1));
    gb.w1 = da1 * t.h[static_cast<std::size_t>(i)].transpose();
    gb.b1 = da1.rowwise().sum();
    dh = du + b.w1.transpose() * da1;
  }
  return loss;
}

// ---- decoder ---------------------------------------------------------------

inline RMatrix decoder_forward(const DecoderNet& net, const RMatrix& theta) {
  require(theta.rows() == net.inputs(), ErrorCode::shape_mismatch, "decoder input shape mismatch");
  const RMatrix a = (net.w1 * (net.input_scale.cwiseInverse().asDiagonal() * theta)).colwise() + net.b1;
  return (net.w2 * relu(a)).colwise() + net.b2;
}

inline RVector decoder_forward(const DecoderNet& net, const RVector& theta) {
  return decoder_forward(net, RMatrix(theta)).col(0);
}

// Sum over the batch of ||G(theta) - target||^2 and its gradient.
inline double decoder_backward(const DecoderNet& net, const RMatrix& theta, const RMatrix& targets, DecoderNet& grad) {
  require(targets.rows() == net.outputs() && targets.cols() == theta.cols(), ErrorCode::shape_mismatch,
          "decoder targets shape mismatch");
  const RMatrix xin = net.input_scale.cwiseInverse().asDiagonal() * theta;
  const RMatrix a = (net.w1 * xin).colwise() + net.b1;
  const RMatrix r = relu(a);
  const RMatrix out = (net.w2 * r).colwise() + net.b2;
  const RMatrix resid = out - targets;
  const double loss = resid.squaredNorm();
  require(std::isfinite(loss), ErrorCode::numerical, "decoder loss is not finite");
  grad = DecoderNet::zeros(net.inputs(), net.hidden(), net.outputs());
  grad.input_scale = net.input_scale;
  const RMatrix d_out = 2.0 * resid;
  grad.w2 = d_out * r.transpose();
  grad.b2 = d_out.rowwise().sum();
  const RMatrix da = (net.w2.transpose() * d_out).cwiseProduct(relu_mask(a));
  grad.w1 = da * xin.transpose();
  grad.b1 = da.rowwise().sum();
  return loss;
}

inline double backward(const MrfResnet& n, const RMatrix& x, const RMatrix& t, MrfResnet& g) {
  return encoder_backward(n, x, t, g);
}
inline double backward(const DecoderNet& n, const RMatrix& x, const RMatrix& t, DecoderNet& g) {
  return decoder_backward(n, x, t, g);
}

// ---- initialisation --------------------------------------------------------

// He-normal weights; the output bias starts at the mean target (in scaled units).
inline MrfResnet init_encoder(Index s, Index w, Index n_blocks, const RVector& output_scale,
                              const RVector& mean_target, std::uint64_t seed) {
  MrfResnet net = MrfResnet::zeros(s, w, n_blocks, output_scale.size());
  net.output_scale = output_scale;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  auto fill = [&](RMatrix& m, double std) {
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = std * g(rng);
  };
  const double he = std::sqrt(2.0 / static_cast<double>(w));
  for (auto& b : net.blocks) {
    fill(b.w1, he);
    fill(b.w2, he);
  }
  fill(net.w_out, he);
  net.b_out = mean_target.cwiseQuotient(output_scale);
  return net;
}

inline DecoderNet init_decoder(Index p, Index hidden, Index s, const RVector& input_scale, std::uint64_t seed) {
  DecoderNet net = DecoderNet::zeros(p, hidden, s);
  net.input_scale = input_scale;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Index i = 0; i < net.w1.size(); ++i) net.w1.data()[i] = std::sqrt(2.0 / static_cast<double>(p)) * g(rng);
  // spread the hinges over the normalised input range
  for (Index i = 0; i < net.b1.size(); ++i) net.b1[i] = u(rng);
  for (Index i = 0; i < net.w2.size(); ++i) net.w2.data()[i] = std::sqrt(1.0 / static_cast<double>(hidden)) * g(rng);
  return net;
}

// ---- training --------------------------------------------------------------

struct TrainConfig {
  int epochs = 20;
  int decoder_epochs = 0;  // 0 uses epochs
  double lr_init = 0.01;
  double lr_decay_encoder = 0.8;
  double lr_decay_decoder = 0.95;
  Index batch_encoder = 500;
  Index batch_decoder = 20;
  double noise_sigma = 0.1;
  Index augmentations_per_atom = 50;
  std::uint64_t seed = 0;
  Index width = 10;
  Index blocks = 6;
  Index decoder_hidden = 300;
  std::vector<double> target_scale_ms{1.0, 1.0};
  std::vector<double> decoder_input_scale_ms{1.0, 1.0};

  void validate() const {
    require(epochs >= 1, ErrorCode::invalid_argument, "epochs must be >= 1");
    require(decoder_epochs >= 0, ErrorCode::invalid_argument, "decoder_epochs must be >= 0");
    require(lr_init >= 0.0, ErrorCode::invalid_argument, "lr_init must be >= 0");
    for (double d : {lr_decay_encoder, lr_decay_decoder})
      require(d > 0.0 && d <= 1.0, ErrorCode::invalid_argument, "lr decay must lie in (0, 1]");
    require(batch_encoder >= 1 && batch_decoder >= 1, ErrorCode::invalid_argument, "batch size must be >= 1");
    require(noise_sigma >= 0.0, ErrorCode::invalid_argument, "noise_sigma must be >= 0");
    require(augmentations_per_atom >= 1, ErrorCode::invalid_argument, "augmentations_per_atom must be >= 1");
    require(width >= 1 && blocks >= 1 && decoder_hidden >= 1, ErrorCode::invalid_argument,
            "network sizes must be >= 1");
    for (const auto* v : {&target_scale_ms, &decoder_input_scale_ms}) {
      require(v->size() == 2, ErrorCode::invalid_argument, "scale lists need two entries (T1, T2)");
      for (double x : *v) require(x > 0.0, ErrorCode::invalid_argument, "scales must be > 0");
    }
  }
};

inline RVector to_rvector(const std::vector<double>& v) {
  return Eigen::Map<const RVector>(v.data(), static_cast<Index>(v.size()));
}

struct TrainResult {
  std::vector<double> epoch_mse;  // mean over minibatches of the per-sample loss
};

// Adam with per-epoch learning-rate decay and seeded shuffling.
template <class Net>
TrainResult train(Net& net, const RMatrix& inputs, const RMatrix& targets, int epochs, double lr_init,
                  double lr_decay, Index batch, std::uint64_t seed) {
  require(inputs.cols() > 0, ErrorCode::invalid_argument, "empty training set");
  require(inputs.cols() == targets.cols(), ErrorCode::shape_mismatch, "inputs/targets count mismatch");
  constexpr double kB1 = 0.9, kB2 = 0.999, kEps = 1e-8;
  const Index m = inputs.cols();
  RVector theta = flatten_params(net);
  RVector mom = RVector::Zero(theta.size()), vel = RVector::Zero(theta.size());
  std::vector<Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  TrainResult res;
  double lr = lr_init;
  long step = 0;
  Net grad;
  RMatrix xb, tb;
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (Index b0 = 0; b0 < m; b0 += batch) {
      const Index nb = std::min(batch, m - b0);
      xb.resize(inputs.rows(), nb);
      tb.resize(targets.rows(), nb);
      for (Index c = 0; c < nb; ++c) {
        xb.col(c) = inputs.col(order[static_cast<std::size_t>(b0 + c)]);
        tb.col(c) = targets.col(order[static_cast<std::size_t>(b0 + c)]);
      }
      const double loss = backward(net, xb, tb, grad);
      total += loss;
      const RVector g = flatten_params(grad) / static_cast<double>(nb);
      ++step;
      mom = kB1 * mom + (1.0 - kB1) * g;
      vel = kB2 * vel + (1.0 - kB2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(kB1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kB2, static_cast<double>(step));
      theta.array() -= lr * (mom.array() / c1) / ((vel.array() / c2).sqrt() + kEps);
      assign_params(net, theta);
    }
    const double mse = total / static_cast<double>(m * targets.rows());
    require(std::isfinite(mse), ErrorCode::numerical, "training diverged: non-finite loss");
    res.epoch_mse.push_back(mse);
    lr *= lr_decay;
  }
  net.trained = true;
  return res;
}

inline TrainResult train(MrfResnet& net, const RMatrix& x, const RMatrix& t, const TrainConfig& cfg) {
  cfg.validate();
  return train(net, x, t, cfg.epochs, cfg.lr_init, cfg.lr_decay_encoder, cfg.batch_encoder,
               derive_seed(cfg.seed, 101));
}

inline TrainResult train(DecoderNet& net, const RMatrix& x, const RMatrix& t, const TrainConfig& cfg) {
  cfg.validate();
  const int epochs = cfg.decoder_epochs > 0 ? cfg.decoder_epochs : cfg.epochs;
  return train(net, x, t, epochs, cfg.lr_init, cfg.lr_decay_decoder, cfg.batch_decoder, derive_seed(cfg.seed, 102));
}

// ---- training data ---------------------------------------------------------

// Unit-normalise, phase-align and keep real parts: the network input convention.
inline RMatrix network_inputs(const CMatrix& x, RVector* norms = nullptr, RVector* imag_residual = nullptr) {
  CMatrix xn = x;
  RVector nr = x.colwise().norm().transpose();
  for (Index c = 0; c < x.cols(); ++c)
    if (nr[c] > 0.0) xn.col(c) /= nr[c];
  const auto al = phase_align(xn);
  if (norms) *norms = nr;
  if (imag_residual) *imag_residual = al.signals.imag().colwise().norm().transpose();
  return al.signals.real();
}

struct NoisySet {
  RMatrix inputs;  // s x M
  RMatrix labels;  // 2 x M, DM labels in ms
  std::vector<Index> label_atom, source_atom;

  double mismatch_fraction() const {
    if (label_atom.empty()) return 0.0;
    Index k = 0;
    for (std::size_t i = 0; i < label_atom.size(); ++i) k += label_atom[i] != source_atom[i];
    return static_cast<double>(k) / static_cast<double>(label_atom.size());
  }
};

// `clean` holds V^H D columns; each gets `copies` noisy draws labelled by DM.
inline NoisySet make_noisy_set(const CMatrix& clean, const CompressedDictionary& cd, Index copies, double sigma,
                               std::uint64_t seed) {
  require(clean.cols() > 0, ErrorCode::invalid_argument, "empty dictionary");
  const Index s = clean.rows(), d = clean.cols(), m = d * copies;
  CMatrix noisy(s, m);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (Index j = 0; j < d; ++j)
    for (Index a = 0; a < copies; ++a) {
      const Index c = j * copies + a;
      for (Index i = 0; i < s; ++i) {
        const double re = g(rng);
        const double im = g(rng);
        noisy(i, c) = clean(i, j) + sigma * cdouble(re, im);
      }
    }
  NoisySet out;
  out.inputs = network_inputs(noisy);
  const auto aligned = phase_align(noisy);
  const auto match = match_columns(cd, aligned.signals);
  out.labels.resize(2, m);
  out.label_atom = match.index;
  out.source_atom.resize(static_cast<std::size_t>(m));
  for (Index c = 0; c < m; ++c) {
    const auto& p = cd.grid[static_cast<std::size_t>(match.index[static_cast<std::size_t>(c)])];
    out.labels(0, c) = p.t1_ms;
    out.labels(1, c) = p.t2_ms;
    out.source_atom[static_cast<std::size_t>(c)] = c / copies;
  }
  return out;
}

struct TrainingSet {
  NoisySet encoder;
  RMatrix decoder_inputs;   // 2 x d grid parameters in ms
  RMatrix decoder_targets;  // s x d clean compressed fingerprints, real parts after removing decoder_phase
  double decoder_phase = 0.0;
};

inline RMatrix grid_matrix(const std::vector<NmrParams>& grid) {
  RMatrix out(2, static_cast<Index>(grid.size()));
  for (std::size_t j = 0; j < grid.size(); ++j) {
    out(0, static_cast<Index>(j)) = grid[j].t1_ms;
    out(1, static_cast<Index>(j)) = grid[j].t2_ms;
  }
  return out;
}

// Phase shared by the columns up to sign, arg(sum_j c_j^T c_j) / 2. The sign keeps the
// summed first coefficient nonnegative.
inline double common_phase(const CMatrix& c) {
  const cdouble q = (c.array() * c.array()).sum();
  double phi = 0.5 * std::arg(q);
  if ((c.row(0) * std::polar(1.0, -phi)).real().sum() < 0.0) phi += std::numbers::pi;
  return phi;
}

// Real parts after removing one fixed phase. Unlike phase_align this stays continuous along
// the manifold when the first coefficient changes sign.
inline RMatrix decoder_targets(const SubspaceModel& v, const CMatrix& atoms, double phase) {
  return (compress(v, atoms) * std::polar(1.0, -phase)).real();
}

inline TrainingSet make_training_set(const Dictionary& dict, const SubspaceModel& v, const TrainConfig& cfg) {
  cfg.validate();
  require(dict.size() > 0, ErrorCode::invalid_argument, "empty dictionary");
  const CMatrix clean = compress(v, dict.atoms);
  const auto cd = compress_dictionary(dict, v);
  TrainingSet ts;
  ts.encoder = make_noisy_set(clean, cd, cfg.augmentations_per_atom, cfg.noise_sigma, derive_seed(cfg.seed, 103));
  ts.decoder_inputs = grid_matrix(dict.grid);
  ts.decoder_phase = common_phase(clean);
  ts.decoder_targets = (clean * std::polar(1.0, -ts.decoder_phase)).real();
  return ts;
}

// ---- inference -------------------------------------------------------------

// Flips decoded columns so their first coefficient matches the voxel alignment.
inline RMatrix align_real(RMatrix g) {
  for (Index c = 0; c < g.cols(); ++c)
    if (g(0, c) < 0.0) g.col(c) = -g.col(c);
  return g;
}

// PD is the least-squares scale of the decoded fingerprint against the aligned voxel.
inline QuantMaps net_infer(const MrfResnet& enc, const DecoderNet& dec, const Tsmi& x) {
  require(enc.trained && dec.trained, ErrorCode::invalid_argument, "net_infer needs trained networks");
  require(x.rank() == enc.input_dim && x.rank() == dec.outputs(), ErrorCode::shape_mismatch,
          "TSMI rank does not match networks");
  check_finite(enc);
  QuantMaps out = QuantMaps::zeros(x.height, x.width);
  const Index n = x.voxels();
  constexpr Index kBlock = 512;
  parallel_for((n + kBlock - 1) / kBlock, [&](Index b0, Index b1) {
    for (Index b = b0; b < b1; ++b) {
      const Index c0 = b * kBlock, nc = std::min(kBlock, n - c0);
      const CMatrix blk = x.coeffs.middleCols(c0, nc);
      RVector norms;
      const RMatrix in = network_inputs(blk, &norms);
      const auto al = phase_align(blk);
      const RMatrix theta = encoder_forward(enc, in);
      const RMatrix g = align_real(decoder_forward(dec, theta));
      for (Index c = 0; c < nc; ++c) {
        const Index v = c0 + c;
        out.t1_ms[v] = theta(0, c);
        out.t2_ms[v] = theta(1, c);
        const double gg = g.col(c).squaredNorm();
        if (norms[c] == 0.0 || gg == 0.0) continue;
        const cdouble ip = g.col(c).cast<cdouble>().dot(al.signals.col(c));
        out.pd[v] = ip.real() / gg;
        out.pd_imag[v] = ip.imag() / gg;
      }
    }
  });
  const double pmax = n ? out.pd.maxCoeff() : 0.0;
  out.mask.resize(static_cast<std::size_t>(n));
  for (Index v = 0; v < n; ++v) out.mask[static_cast<std::size_t>(v)] = pmax > 0.0 && out.pd[v] >= 1e-6 * pmax;
  return out;
}

// ---- persistence -----------------------------------------------------------

namespace detail {

inline std::filesystem::path layer_path(const std::filesystem::path& manifest, const std::string& name) {
  auto p = manifest;
  p.replace_extension("");
  return p.string() + "." + name + ".tnsr";
}

inline json shape_of(const RMatrix& m) { return json::array({m.rows(), m.cols()}); }

inline void save_layers(const std::filesystem::path& manifest, json& j,
                        const std::vector<std::pair<std::string, RMatrix>>& layers) {
  json arr = json::array();
  for (const auto& [name, m] : layers) {
    const auto file = layer_path(manifest, name);
    write_tensor(file, tensor_from(m));
    arr.push_back({{"name", name}, {"file", file.filename().string()}, {"shape", shape_of(m)}});
  }
  j["layers"] = arr;
}

inline std::map<std::string, RMatrix> load_layers(const std::filesystem::path& manifest, const json& layers) {
  std::map<std::string, RMatrix> out;
  require(layers.is_array(), ErrorCode::config, "manifest: layers must be an array");
  for (const auto& l : layers) {
    StrictObject o(l, "layers[]");
    const auto name = o.get<std::string>("name");
    const auto file = o.get<std::string>("file");
    const auto shape = o.get<std::vector<Index>>("shape");
    o.finish();
    RMatrix m = to_rmatrix(read_tensor(manifest.parent_path() / file));
    require(shape.size() == 2 && m.rows() == shape[0] && m.cols() == shape[1], ErrorCode::shape_mismatch,
            "layer " + name + " does not match its manifest shape");
    out[name] = std::move(m);
  }
  return out;
}

inline RMatrix col(const RVector& v) { return RMatrix(v); }

inline const RMatrix& need(const std::map<std::string, RMatrix>& m, const std::string& k) {
  auto it = m.find(k);
  require(it != m.end(), ErrorCode::config, "manifest is missing layer " + k);
  return it->second;
}

inline std::vector<double> vec(const RVector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace detail

inline void save_encoder(const std::filesystem::path& manifest, const MrfResnet& net) {
  json j{{"kind", "mrf_resnet"},     {"input_dim", net.input_dim}, {"width", net.width},
         {"blocks", net.depth()},    {"outputs", net.outputs()},   {"activation", "relu"},
         {"output_scale_ms", detail::vec(net.output_scale)},       {"trained", net.trained}};
  std::vector<std::pair<std::string, RMatrix>> layers;
  for (Index i = 0; i < net.depth(); ++i) {
    const auto& b = net.blocks[static_cast<std::size_t>(i)];
    const std::string p = "block" + std::to_string(i + 1);
    layers.emplace_back(p + ".w1", b.w1);
    layers.emplace_back(p + ".b1", detail::col(b.b1));
    layers.emplace_back(p + ".w2", b.w2);
    layers.emplace_back(p + ".b2", detail::col(b.b2));
  }
  layers.emplace_back("out.w", net.w_out);
  layers.emplace_back("out.b", detail::col(net.b_out));
  if (net.lift.size()) layers.emplace_back("lift", net.lift);
  detail::save_layers(manifest, j, layers);
  write_json(manifest, j);
}

inline MrfResnet load_encoder(const std::filesystem::path& manifest) {
  const json j = read_json(manifest);
  StrictObject o(j, "encoder");
  require(o.get<std::string>("kind") == "mrf_resnet", ErrorCode::config, "manifest is not an MRFResnet");
  const auto s = o.get<Index>("input_dim"), w = o.get<Index>("width"), n = o.get<Index>("blocks"),
             p = o.get<Index>("outputs");
  require(o.get<std::string>("activation") == "relu", ErrorCode::config, "unsupported activation");
  const auto scale = o.get<std::vector<double>>("output_scale_ms");
  const bool trained = o.get<bool>("trained");
  const auto layers = detail::load_layers(manifest, o.raw("layers"));
  o.finish();
  MrfResnet net = MrfResnet::zeros(s, w, n, p);
  require(static_cast<Index>(scale.size()) == p, ErrorCode::shape_mismatch, "output scale length mismatch");
  net.output_scale = to_rvector(scale);
  net.trained = trained;
  auto take = [&](const std::string& k, RMatrix& dst) {
    const RMatrix& m = detail::need(layers, k);
    require(m.rows() == dst.rows() && m.cols() == dst.cols(), ErrorCode::shape_mismatch, "layer " + k + " has wrong shape");
    dst = m;
  };
  auto take_v = [&](const std::string& k, RVector& dst) {
    RMatrix tmp(dst.size(), 1);
    take(k, tmp);
    dst = tmp.col(0);
  };
  for (Index i = 0; i < n; ++i) {
    auto& b = net.blocks[static_cast<std::size_t>(i)];
    const std::string pre = "block" + std::to_string(i + 1);
    take(pre + ".w1", b.w1);
    take_v(pre + ".b1", b.b1);
    take(pre + ".w2", b.w2);
    take_v(pre + ".b2", b.b2);
  }
  take("out.w", net.w_out);
  take_v("out.b", net.b_out);
  if (net.lift.size()) take("lift", net.lift);
  check_finite(net);
  return net;
}

inline void save_decoder(const std::filesystem::path& manifest, const DecoderNet& net) {
  json j{{"kind", "decoder"},          {"inputs", net.inputs()},
         {"hidden", net.hidden()},      {"outputs", net.outputs()},
         {"activation", "relu"},        {"input_scale_ms", detail::vec(net.input_scale)},
         {"target_phase_rad", net.target_phase}, {"trained", net.trained}};
  detail::save_layers(manifest, j,
                      {{"w1", net.w1}, {"b1", detail::col(net.b1)}, {"w2", net.w2}, {"b2", detail::col(net.b2)}});
  write_json(manifest, j);
}

inline DecoderNet load_decoder(const std::filesystem::path& manifest) {
  const json j = read_json(manifest);
  StrictObject o(j, "decoder");
  require(o.get<std::string>("kind") == "decoder", ErrorCode::config, "manifest is not a decoder");
  const auto p = o.get<Index>("inputs"), h = o.get<Index>("hidden"), s = o.get<Index>("outputs");
  require(o.get<std::string>("activation") == "relu", ErrorCode::config, "unsupported activation");
  const auto scale = o.get<std::vector<double>>("input_scale_ms");
  const auto phase = o.get<double>("target_phase_rad");
  const bool trained = o.get<bool>("trained");
  const auto layers = detail::load_layers(manifest, o.raw("layers"));
  o.finish();
  DecoderNet net = DecoderNet::zeros(p, h, s);
  require(static_cast<Index>(scale.size()) == p, ErrorCode::shape_mismatch, "input scale length mismatch");
  net.input_scale = to_rvector(scale);
  net.target_phase = phase;
  net.trained = trained;
  auto check = [&](const std::string& k, Index r, Index c) {
    const RMatrix& m = detail::need(layers, k);
    require(m.rows() == r && m.cols() == c, ErrorCode::shape_mismatch, "layer " + k + " has wrong shape");
    return m;
  };
  net.w1 = check("w1", h, p);
  net.b1 = check("b1", h, 1).col(0);
  net.w2 = check("w2", s, h);
  net.b2 = check("b2", s, 1).col(0);
  return net;
}

}  // namespace qmri
