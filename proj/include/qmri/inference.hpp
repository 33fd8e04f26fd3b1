#pragma once

// Dictionary matching, proton density estimation, phase alignment and the
// evaluation metrics used for maps and TSMIs.

#include "qmri/core.hpp"
#include "qmri/epg.hpp"
#include "qmri/forward.hpp"
#include "qmri/subspace.hpp"

#include <cmath>
#include <numbers>

namespace qmri {

struct QuantMaps {
  Index height = 0;
  Index width = 0;
  RVector t1_ms, t2_ms, pd;
  RVector pd_imag;                 // imaginary residual of the PD estimate, diagnostic only
  std::vector<std::uint8_t> mask;  // foreground; empty means every voxel

  Index voxels() const { return height * width; }

  bool foreground(Index v) const { return mask.empty() || mask[static_cast<std::size_t>(v)] != 0; }

  static QuantMaps zeros(Index h, Index w) {
    QuantMaps m;
    m.height = h;
    m.width = w;
    m.t1_ms = RVector::Zero(h * w);
    m.t2_ms = RVector::Zero(h * w);
    m.pd = RVector::Zero(h * w);
    m.pd_imag = RVector::Zero(h * w);
    return m;
  }
};

struct CompressedDictionary {
  CMatrix atoms;  // s x d, unit-norm columns
  std::vector<NmrParams> grid;
  RVector renorm;  // ||V^H D_j|| removed from each column

  Index size() const { return atoms.cols(); }
};

struct PhaseAligned {
  CMatrix signals;
  RVector phases;                       // removed phase per column
  std::vector<std::uint8_t> degenerate; // first coefficient exactly zero
};

// Rotates each column so its first coefficient is real and nonnegative.
inline PhaseAligned phase_align(const CMatrix& signals) {
  PhaseAligned out;
  out.signals = signals;
  out.phases = RVector::Zero(signals.cols());
  out.degenerate.assign(static_cast<std::size_t>(signals.cols()), 0);
  if (signals.rows() == 0) return out;
  for (Index c = 0; c < signals.cols(); ++c) {
    const cdouble first = signals(0, c);
    if (first == cdouble(0.0)) {
      out.degenerate[static_cast<std::size_t>(c)] = 1;
      continue;
    }
    const double phi = std::arg(first);
    out.phases[c] = phi;
    if (phi == 0.0) continue;
    out.signals.col(c) *= std::polar(1.0, -phi);
    out.signals(0, c) = cdouble(std::abs(first), 0.0);
  }
  return out;
}

inline CompressedDictionary compress_dictionary(const Dictionary& dict, const SubspaceModel& v) {
  CompressedDictionary out;
  out.atoms = compress(v, dict.atoms);
  out.grid = dict.grid;
  out.renorm = out.atoms.colwise().norm().transpose();
  for (Index j = 0; j < out.atoms.cols(); ++j)
    if (out.renorm[j] > 0.0) out.atoms.col(j) /= out.renorm[j];
  out.atoms = phase_align(out.atoms).signals;
  return out;
}

struct MatchResult {
  std::vector<Index> index;  // best atom per column
  CVector correlation;       // <x, atom> at the best atom
};

// Exhaustive correlation search; ties go to the lowest atom index.
inline MatchResult match_columns(const CompressedDictionary& dict, const CMatrix& x) {
  require(dict.size() > 0, ErrorCode::invalid_argument, "empty dictionary");
  require(x.rows() == dict.atoms.rows(), ErrorCode::shape_mismatch, "signal length does not match dictionary");
  MatchResult res;
  const Index n = x.cols();
  res.index.assign(static_cast<std::size_t>(n), 0);
  res.correlation = CVector::Zero(n);
  constexpr Index kBlock = 256;
  const Index blocks = (n + kBlock - 1) / kBlock;
  parallel_for(blocks, [&](Index b0, Index b1) {
    for (Index b = b0; b < b1; ++b) {
      const Index c0 = b * kBlock;
      const Index nc = std::min(kBlock, n - c0);
      const CMatrix corr = dict.atoms.adjoint() * x.middleCols(c0, nc);  // d x nc
      for (Index c = 0; c < nc; ++c) {
        Index best = 0;
        double bestv = -1.0;
        for (Index j = 0; j < corr.rows(); ++j) {
          const double v = std::norm(corr(j, c));
          if (v > bestv) {
            bestv = v;
            best = j;
          }
        }
        res.index[static_cast<std::size_t>(c0 + c)] = best;
        // <x, atom> = sum x * conj(atom)
        res.correlation[c0 + c] = std::conj(corr(best, c));
      }
    }
  });
  return res;
}

inline QuantMaps dict_match(const CompressedDictionary& dict, const Tsmi& x) {
  require(x.rank() == dict.atoms.rows(), ErrorCode::shape_mismatch, "TSMI rank does not match dictionary");
  const auto aligned = phase_align(x.coeffs);
  const auto m = match_columns(dict, aligned.signals);
  QuantMaps out = QuantMaps::zeros(x.height, x.width);
  for (Index v = 0; v < x.voxels(); ++v) {
    const Index j = m.index[static_cast<std::size_t>(v)];
    const auto& g = dict.grid[static_cast<std::size_t>(j)];
    out.t1_ms[v] = g.t1_ms;
    out.t2_ms[v] = g.t2_ms;
    const double r = dict.renorm[j] > 0.0 ? dict.renorm[j] : 1.0;
    out.pd[v] = m.correlation[v].real() / r;
    out.pd_imag[v] = m.correlation[v].imag() / r;
  }
  const double pmax = out.pd.size() ? out.pd.maxCoeff() : 0.0;
  out.mask.resize(static_cast<std::size_t>(x.voxels()));
  for (Index v = 0; v < x.voxels(); ++v)
    out.mask[static_cast<std::size_t>(v)] = pmax > 0.0 && out.pd[v] >= 1e-6 * pmax ? 1 : 0;
  return out;
}

// ---- metrics ---------------------------------------------------------------

namespace metrics {

inline constexpr double kSnrClampDb = 300.0;

inline std::vector<Index> masked_indices(const QuantMaps& truth) {
  std::vector<Index> idx;
  for (Index v = 0; v < truth.voxels(); ++v)
    if (truth.foreground(v)) idx.push_back(v);
  require(!idx.empty(), ErrorCode::invalid_argument, "empty foreground mask");
  return idx;
}

inline double mae(const RVector& pred, const RVector& truth, const std::vector<Index>& idx) {
  double s = 0.0;
  for (Index v : idx) s += std::abs(pred[v] - truth[v]);
  return s / static_cast<double>(idx.size());
}

// Percent; voxels with truth <= 0 are skipped.
inline double mape(const RVector& pred, const RVector& truth, const std::vector<Index>& idx) {
  double s = 0.0;
  Index n = 0;
  for (Index v : idx)
    if (truth[v] > 0.0) {
      s += std::abs(pred[v] - truth[v]) / truth[v];
      ++n;
    }
  require(n > 0, ErrorCode::invalid_argument, "MAPE: no voxel with positive truth");
  return 100.0 * s / static_cast<double>(n);
}

inline double nrmse(const RVector& pred, const RVector& truth, const std::vector<Index>& idx) {
  double num = 0.0, den = 0.0;
  for (Index v : idx) {
    num += (pred[v] - truth[v]) * (pred[v] - truth[v]);
    den += truth[v] * truth[v];
  }
  return den > 0.0 ? std::sqrt(num / den) : (num > 0.0 ? INFINITY : 0.0);
}

template <class A, class B>
double snr_db(const A& truth, const B& pred) {
  const double err = (truth - pred).norm();
  const double sig = truth.norm();
  if (err == 0.0) return kSnrClampDb;
  if (sig == 0.0) return -kSnrClampDb;
  return std::min(kSnrClampDb, 20.0 * std::log10(sig / err));
}

// Mean SSIM over all fully contained 8x8 windows with Gaussian weights
// (sigma 1.5), K1 = 0.01, K2 = 0.03 and L = dynamic range of the truth image.
inline double ssim(const RVector& pred, const RVector& truth, Index h, Index w) {
  require(pred.size() == h * w && truth.size() == h * w, ErrorCode::shape_mismatch, "SSIM: size mismatch");
  constexpr int kWin = 8;
  constexpr double kSigma = 1.5;
  double range = truth.maxCoeff() - truth.minCoeff();
  if (!(range > 0.0)) range = std::max(1.0, std::abs(truth.maxCoeff()));
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  double wts[kWin][kWin];
  double wsum = 0.0;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const double di = i - (kWin - 1) / 2.0, dj = j - (kWin - 1) / 2.0;
      wts[i][j] = std::exp(-(di * di + dj * dj) / (2 * kSigma * kSigma));
      wsum += wts[i][j];
    }
  for (auto& row : wts)
    for (double& v : row) v /= wsum;
  const Index hh = std::max<Index>(1, h - kWin + 1), ww = std::max<Index>(1, w - kWin + 1);
  const int wy = static_cast<int>(std::min<Index>(kWin, h)), wx = static_cast<int>(std::min<Index>(kWin, w));
  double total = 0.0;
  for (Index y0 = 0; y0 < hh; ++y0)
    for (Index x0 = 0; x0 < ww; ++x0) {
      double mx = 0, my = 0, norm = 0;
      for (int i = 0; i < wy; ++i)
        for (int j = 0; j < wx; ++j) {
          const Index k = (y0 + i) * w + x0 + j;
          mx += wts[i][j] * pred[k];
          my += wts[i][j] * truth[k];
          norm += wts[i][j];
        }
      mx /= norm;
      my /= norm;
      double sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < wy; ++i)
        for (int j = 0; j < wx; ++j) {
          const Index k = (y0 + i) * w + x0 + j;
          const double dx = pred[k] - mx, dy = truth[k] - my;
          sxx += wts[i][j] * dx * dx;
          syy += wts[i][j] * dy * dy;
          sxy += wts[i][j] * dx * dy;
        }
      sxx /= norm;
      syy /= norm;
      sxy /= norm;
      total += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
  return total / static_cast<double>(hh * ww);
}

}  // namespace metrics

struct MapMetrics {
  double t1_mae_ms = 0, t1_mape = 0, t1_nrmse = 0, t1_ssim = 0;
  double t2_mae_ms = 0, t2_mape = 0, t2_nrmse = 0, t2_ssim = 0;
  double pd_mae = 0, pd_mape = 0, pd_nrmse = 0, pd_snr_db = 0, pd_ssim = 0;

  json to_json() const {
    return json{{"t1_mae_ms", t1_mae_ms}, {"t1_mape_pct", t1_mape}, {"t1_nrmse", t1_nrmse}, {"t1_ssim", t1_ssim},
                {"t2_mae_ms", t2_mae_ms}, {"t2_mape_pct", t2_mape}, {"t2_nrmse", t2_nrmse}, {"t2_ssim", t2_ssim},
                {"pd_mae", pd_mae},       {"pd_mape_pct", pd_mape}, {"pd_nrmse", pd_nrmse}, {"pd_snr_db", pd_snr_db},
                {"pd_ssim", pd_ssim}};
  }
};

// Foreground comes from the truth mask; SSIM is taken over the whole image.
inline MapMetrics map_metrics(const QuantMaps& pred, const QuantMaps& truth) {
  require(pred.height == truth.height && pred.width == truth.width, ErrorCode::shape_mismatch,
          "metrics: map grids differ");
  const auto idx = metrics::masked_indices(truth);
  auto masked = [&](const QuantMaps& m, const RVector& src) {
    RVector out = src;
    for (Index v = 0; v < m.voxels(); ++v)
      if (!truth.foreground(v)) out[v] = 0.0;
    return out;
  };
  MapMetrics r;
  r.t1_mae_ms = metrics::mae(pred.t1_ms, truth.t1_ms, idx);
  r.t1_mape = metrics::mape(pred.t1_ms, truth.t1_ms, idx);
  r.t1_nrmse = metrics::nrmse(pred.t1_ms, truth.t1_ms, idx);
  r.t1_ssim = metrics::ssim(masked(pred, pred.t1_ms), masked(truth, truth.t1_ms), truth.height, truth.width);
  r.t2_mae_ms = metrics::mae(pred.t2_ms, truth.t2_ms, idx);
  r.t2_mape = metrics::mape(pred.t2_ms, truth.t2_ms, idx);
  r.t2_nrmse = metrics::nrmse(pred.t2_ms, truth.t2_ms, idx);
  r.t2_ssim = metrics::ssim(masked(pred, pred.t2_ms), masked(truth, truth.t2_ms), truth.height, truth.width);
  r.pd_mae = metrics::mae(pred.pd, truth.pd, idx);
  r.pd_mape = metrics::mape(pred.pd, truth.pd, idx);
  r.pd_nrmse = metrics::nrmse(pred.pd, truth.pd, idx);
  r.pd_snr_db = metrics::snr_db(masked(truth, truth.pd), masked(pred, pred.pd));
  r.pd_ssim = metrics::ssim(masked(pred, pred.pd), masked(truth, truth.pd), truth.height, truth.width);
  return r;
}

inline double tsmi_snr_db(const Tsmi& truth, const Tsmi& pred) {
  require(truth.coeffs.rows() == pred.coeffs.rows() && truth.coeffs.cols() == pred.coeffs.cols(),
          ErrorCode::shape_mismatch, "metrics: TSMI shapes differ");
  return metrics::snr_db(truth.coeffs, pred.coeffs);
}

// ---- persistence -----------------------------------------------------------

inline void save_maps(const std::filesystem::path& dir, const QuantMaps& m) {
  std::filesystem::create_directories(dir);
  auto img = [&](const RVector& v) {
    RMatrix r(m.height, m.width);
    for (Index y = 0; y < m.height; ++y)
      for (Index x = 0; x < m.width; ++x) r(y, x) = v[y * m.width + x];
    return tensor_from(r);
  };
  write_tensor(dir / "t1.tnsr", img(m.t1_ms));
  write_tensor(dir / "t2.tnsr", img(m.t2_ms));
  write_tensor(dir / "pd.tnsr", img(m.pd));
  RVector mask(m.voxels());
  for (Index v = 0; v < m.voxels(); ++v) mask[v] = m.foreground(v) ? 1.0 : 0.0;
  write_tensor(dir / "mask.tnsr", img(mask));
}

inline QuantMaps load_maps(const std::filesystem::path& dir) {
  auto img = [&](const char* name) { return to_rmatrix(read_tensor(dir / name)); };
  const RMatrix t1 = img("t1.tnsr"), t2 = img("t2.tnsr"), pd = img("pd.tnsr");
  require(t2.rows() == t1.rows() && t2.cols() == t1.cols() && pd.rows() == t1.rows() && pd.cols() == t1.cols(),
          ErrorCode::shape_mismatch, "map sizes differ in " + dir.string());
  QuantMaps m = QuantMaps::zeros(t1.rows(), t1.cols());
  for (Index y = 0; y < m.height; ++y)
    for (Index x = 0; x < m.width; ++x) {
      const Index v = y * m.width + x;
      m.t1_ms[v] = t1(y, x);
      m.t2_ms[v] = t2(y, x);
      m.pd[v] = pd(y, x);
    }
  if (std::filesystem::exists(dir / "mask.tnsr")) {
    const RMatrix mk = img("mask.tnsr");
    m.mask.resize(static_cast<std::size_t>(m.voxels()));
    for (Index y = 0; y < m.height; ++y)
      for (Index x = 0; x < m.width; ++x) m.mask[static_cast<std::size_t>(y * m.width + x)] = mk(y, x) != 0.0;
  }
  return m;
}

}  // namespace qmri
