#pragma once

// Kernel-machine baseline: Gaussian-kernel ridge regression approximated with
// random Fourier features, one independent feature map per output.

#include "qmri/core.hpp"
#include "qmri/io.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <random>

namespace qmri {

struct RffOutput {
  RMatrix omega;  // m x in
  RVector phase;  // m
  RVector weights;
  double intercept = 0.0;
  double kernel_scale = 1.0;
};

struct KernelMachine {
  std::vector<RffOutput> outputs;
  Index input_dim = 0;

  Index features() const { return outputs.empty() ? 0 : outputs.front().omega.rows(); }
  Index parameter_count() const {
    Index n = 0;
    for (const auto& o : outputs) n += o.weights.size() + 1;
    return n;
  }
};

struct KmConfig {
  Index features = 1000;
  double kernel_scale = 0.0;  // <= 0 selects the median pairwise distance
  double ridge = 1e-6;        // relative to the mean diagonal of the feature Gram matrix
  std::uint64_t seed = 0;
};

// sqrt(2/m) cos(Omega x + b), column per sample.
inline RMatrix rff_features(const RffOutput& o, const RMatrix& x) {
  const double c = std::sqrt(2.0 / static_cast<double>(o.omega.rows()));
  RMatrix z = (o.omega * x).colwise() + o.phase;
  return c * z.array().cos().matrix();
}

inline double median_distance(const RMatrix& x, std::uint64_t seed, Index pairs = 2000) {
  const Index n = x.cols();
  if (n < 2) return 1.0;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> pick(0, n - 1);
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(pairs));
  for (Index k = 0; k < pairs; ++k) {
    const Index a = pick(rng), b = pick(rng);
    if (a != b) d.push_back((x.col(a) - x.col(b)).norm());
  }
  if (d.empty()) return 1.0;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  const double m = d[d.size() / 2];
  return m > 0.0 ? m : 1.0;
}

inline KernelMachine km_fit(const RMatrix& x, const RMatrix& targets, const KmConfig& cfg) {
  require(cfg.features >= 1, ErrorCode::invalid_argument, "KM needs at least one feature");
  require(x.cols() > 0 && x.cols() == targets.cols(), ErrorCode::shape_mismatch, "KM data shape mismatch");
  require(cfg.ridge > 0.0, ErrorCode::invalid_argument, "KM ridge must be > 0");
  KernelMachine km;
  km.input_dim = x.rows();
  const Index m = cfg.features, n = x.cols();
  const double scale = cfg.kernel_scale > 0.0 ? cfg.kernel_scale : median_distance(x, derive_seed(cfg.seed, 201));
  std::mt19937_64 rng(derive_seed(cfg.seed, 202));
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  km.outputs.resize(static_cast<std::size_t>(targets.rows()));
  for (auto& o : km.outputs) {
    o.kernel_scale = scale;
    o.omega.resize(m, x.rows());
    for (Index i = 0; i < o.omega.size(); ++i) o.omega.data()[i] = g(rng) / scale;
    o.phase.resize(m);
    for (Index i = 0; i < m; ++i) o.phase[i] = u(rng);
  }
  parallel_for(targets.rows(), [&](Index b, Index e) {
    for (Index k = b; k < e; ++k) {
      auto& o = km.outputs[static_cast<std::size_t>(k)];
      // centred normal equations accumulated over row chunks
      RMatrix gram = RMatrix::Zero(m, m);
      RVector zt = RVector::Zero(m), zsum = RVector::Zero(m);
      const double tmean = targets.row(k).mean();
      constexpr Index kChunk = 4096;
      for (Index c0 = 0; c0 < n; c0 += kChunk) {
        const Index nc = std::min(kChunk, n - c0);
        const RMatrix z = rff_features(o, x.middleCols(c0, nc));
        gram.selfadjointView<Eigen::Lower>().rankUpdate(z);
        zsum += z.rowwise().sum();
        zt += z * (targets.row(k).segment(c0, nc).transpose().array() - tmean).matrix();
      }
      const RVector zmean = zsum / static_cast<double>(n);
      RMatrix full = gram.selfadjointView<Eigen::Lower>();
      full -= static_cast<double>(n) * zmean * zmean.transpose();
      const double lam = cfg.ridge * std::max(full.diagonal().mean(), 1e-300);
      full.diagonal().array() += lam;
      Eigen::LLT<RMatrix> llt(full);
      require(llt.info() == Eigen::Success, ErrorCode::numerical, "KM normal equations are singular");
      o.weights = llt.solve(zt);
      o.intercept = tmean - zmean.dot(o.weights);
    }
  });
  return km;
}

inline RMatrix km_infer(const KernelMachine& km, const RMatrix& x) {
  require(x.rows() == km.input_dim, ErrorCode::shape_mismatch, "KM input dimension mismatch");
  RMatrix out(static_cast<Index>(km.outputs.size()), x.cols());
  constexpr Index kChunk = 4096;
  for (std::size_t k = 0; k < km.outputs.size(); ++k) {
    const auto& o = km.outputs[k];
    for (Index c0 = 0; c0 < x.cols(); c0 += kChunk) {
      const Index nc = std::min(kChunk, x.cols() - c0);
      out.row(static_cast<Index>(k)).segment(c0, nc) =
          (o.weights.transpose() * rff_features(o, x.middleCols(c0, nc))).array() + o.intercept;
    }
  }
  return out;
}

inline void save_km(const std::filesystem::path& manifest, const KernelMachine& km) {
  json outs = json::array();
  auto base = manifest;
  base.replace_extension("");
  for (std::size_t k = 0; k < km.outputs.size(); ++k) {
    const auto& o = km.outputs[k];
    RMatrix packed(o.omega.rows(), o.omega.cols() + 2);
    packed << o.omega, o.phase, o.weights;
    const std::string file = base.filename().string() + ".out" + std::to_string(k) + ".tnsr";
    write_tensor(manifest.parent_path() / file, tensor_from(packed));
    outs.push_back({{"file", file}, {"intercept", o.intercept}, {"kernel_scale", o.kernel_scale}});
  }
  write_json(manifest, json{{"kind", "random_features_km"},
                            {"input_dim", km.input_dim},
                            {"features", km.features()},
                            {"layout", "omega|phase|weights"},
                            {"outputs", outs}});
}

inline KernelMachine load_km(const std::filesystem::path& manifest) {
  const json j = read_json(manifest);
  StrictObject o(j, "km");
  require(o.get<std::string>("kind") == "random_features_km", ErrorCode::config, "manifest is not a KM");
  KernelMachine km;
  km.input_dim = o.get<Index>("input_dim");
  const auto m = o.get<Index>("features");
  o.get<std::string>("layout");
  const json& outs = o.raw("outputs");
  o.finish();
  require(outs.is_array(), ErrorCode::config, "km.outputs must be an array");
  for (const auto& e : outs) {
    StrictObject eo(e, "km.outputs[]");
    RffOutput r;
    const auto file = eo.get<std::string>("file");
    r.intercept = eo.get<double>("intercept");
    r.kernel_scale = eo.get<double>("kernel_scale");
    eo.finish();
    const RMatrix packed = to_rmatrix(read_tensor(manifest.parent_path() / file));
    require(packed.rows() == m && packed.cols() == km.input_dim + 2, ErrorCode::shape_mismatch,
            "KM tensor has wrong shape");
    r.omega = packed.leftCols(km.input_dim);
    r.phase = packed.col(km.input_dim);
    r.weights = packed.col(km.input_dim + 1);
    km.outputs.push_back(std::move(r));
  }
  return km;
}

}  // namespace qmri
