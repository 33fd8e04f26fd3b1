#include "oracles.hpp"
#include "qmri/inference.hpp"

#include <gtest/gtest.h>

using namespace qmri;

namespace {

struct Setup {
  Dictionary dict;
  SubspaceModel v;
  CompressedDictionary cd;
};

const Setup& setup() {
  static const Setup s = [] {
    Setup r;
    r.dict = build_dictionary(ramp_flip_schedule(60), log_axis(100, 3000, 25), log_axis(20, 500, 20));
    r.v = fit_subspace(r.dict, 6);
    r.cd = compress_dictionary(r.dict, r.v);
    return r;
  }();
  return s;
}

Tsmi columns_as_tsmi(const CMatrix& x) { return Tsmi{x, 1, x.cols()}; }

}  // namespace

TEST(PhaseAlign, PostConditions) {
  std::mt19937_64 rng(1);
  const CMatrix x = oracle::random_cmatrix(5, 40, rng);
  const auto a = phase_align(x);
  for (Index c = 0; c < x.cols(); ++c) {
    EXPECT_LE(std::abs(a.signals(0, c).imag()), 1e-12);
    EXPECT_GE(a.signals(0, c).real(), 0.0);
    EXPECT_NEAR(a.signals.col(c).norm(), x.col(c).norm(), 1e-12);
    EXPECT_LE((a.signals.col(c) * std::polar(1.0, a.phases[c]) - x.col(c)).norm(), 1e-12);
  }
  // already aligned input is untouched
  CMatrix r = x;
  for (Index c = 0; c < r.cols(); ++c) r(0, c) = std::abs(r(0, c));
  const auto b = phase_align(r);
  EXPECT_EQ(b.signals, r);
  EXPECT_EQ(b.phases.cwiseAbs().maxCoeff(), 0.0);
}

TEST(PhaseAlign, RotationRecordedAndZerosFlagged) {
  CMatrix x(3, 2);
  x << cdouble(2, 0), cdouble(0, 0), cdouble(1, 1), cdouble(3, 1), cdouble(-1, 0.5), cdouble(0, 2);
  CMatrix rot = x;
  rot.col(0) *= std::polar(1.0, std::numbers::pi / 3);
  const auto a = phase_align(rot);
  EXPECT_NEAR(a.phases[0], std::numbers::pi / 3, 1e-15);
  EXPECT_LE((a.signals.col(0) - x.col(0)).norm(), 1e-15);
  EXPECT_EQ(a.degenerate[1], 1);
  EXPECT_EQ(a.signals.col(1), x.col(1));
}

TEST(CompressedDict, UnitColumns) {
  const auto& s = setup();
  ASSERT_EQ(s.cd.size(), 500);
  for (Index j = 0; j < s.cd.size(); ++j) {
    EXPECT_NEAR(s.cd.atoms.col(j).norm(), 1.0, 1e-12);
    EXPECT_LE(s.cd.renorm[j], 1.0 + 1e-12);
  }
}

TEST(DictMatch, ExactAndScaledAtoms) {
  const auto& s = setup();
  const std::vector<Index> picks{0, 17, 123, 250, 499};
  CMatrix x(s.v.rank(), 2 * static_cast<Index>(picks.size()));
  for (std::size_t i = 0; i < picks.size(); ++i) {
    x.col(2 * i) = s.cd.atoms.col(picks[i]);
    x.col(2 * i + 1) = 2.5 * s.cd.atoms.col(picks[i]);
  }
  const auto m = dict_match(s.cd, columns_as_tsmi(x));
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const auto& g = s.cd.grid[picks[i]];
    for (int k = 0; k < 2; ++k) {
      const Index v = 2 * static_cast<Index>(i) + k;
      EXPECT_EQ(m.t1_ms[v], g.t1_ms);
      EXPECT_EQ(m.t2_ms[v], g.t2_ms);
      EXPECT_NEAR(m.pd[v], (k ? 2.5 : 1.0) / s.cd.renorm[picks[i]], 1e-12);
      EXPECT_NEAR(m.pd_imag[v], 0.0, 1e-12);
    }
  }
}

TEST(DictMatch, CompressedFingerprintGivesUnitPd) {
  const auto& s = setup();
  // X = V^H D_j for a unit-norm T-dimensional atom, so pd refers back to 1
  const CMatrix x = compress(s.v, s.dict.atoms.middleCols(40, 10));
  const auto m = dict_match(s.cd, columns_as_tsmi(x));
  for (Index v = 0; v < 10; ++v) {
    EXPECT_NEAR(m.pd[v], 1.0, 1e-12);
    EXPECT_EQ(m.t1_ms[v], s.dict.grid[40 + v].t1_ms);
  }
}

TEST(DictMatch, MatchesBruteForceOracle) {
  const auto& s = setup();
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<Index> pick(0, s.cd.size() - 1);
  CMatrix x(s.v.rank(), 1000);
  const CMatrix noise = oracle::random_cmatrix(s.v.rank(), 1000, rng);
  for (Index c = 0; c < 1000; ++c) {
    const cdouble gain = std::polar(0.5 + (c % 7) * 0.3, 0.1 * c);
    x.col(c) = gain * s.cd.atoms.col(pick(rng)) + 0.05 * noise.col(c);
  }
  const auto m = dict_match(s.cd, columns_as_tsmi(x));
  const auto aligned = phase_align(x).signals;
  for (Index c = 0; c < 1000; ++c) {
    const auto [j, corr] = oracle::brute_force_match(s.cd.atoms, aligned.col(c));
    ASSERT_EQ(m.t1_ms[c], s.cd.grid[j].t1_ms) << c;
    ASSERT_EQ(m.t2_ms[c], s.cd.grid[j].t2_ms) << c;
    EXPECT_NEAR(m.pd[c], corr.real() / s.cd.renorm[j], 1e-12);
  }
}

TEST(DictMatch, TieGoesToLowestIndex) {
  auto cd = setup().cd;
  cd.atoms.col(5) = cd.atoms.col(3);
  const auto r = match_columns(cd, cd.atoms.col(3));
  EXPECT_EQ(r.index[0], 3);
}

TEST(DictMatch, PhaseInvariance) {
  const auto& s = setup();
  std::mt19937_64 rng(9);
  CMatrix x = compress(s.v, s.dict.atoms.leftCols(200)) + 0.02 * oracle::random_cmatrix(s.v.rank(), 200, rng);
  CMatrix rot = x;
  std::uniform_real_distribution<double> ph(-std::numbers::pi, std::numbers::pi);
  for (Index c = 0; c < rot.cols(); ++c) rot.col(c) *= std::polar(1.0, ph(rng));
  const auto a = dict_match(s.cd, columns_as_tsmi(x));
  const auto b = dict_match(s.cd, columns_as_tsmi(rot));
  EXPECT_EQ(a.t1_ms, b.t1_ms);
  EXPECT_EQ(a.t2_ms, b.t2_ms);
  EXPECT_LE((a.pd - b.pd).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DictMatch, ErrorsAndBackground) {
  const auto& s = setup();
  CompressedDictionary empty;
  empty.atoms.resize(s.v.rank(), 0);
  EXPECT_THROW(dict_match(empty, columns_as_tsmi(CMatrix::Zero(s.v.rank(), 2))), Error);
  EXPECT_THROW(dict_match(s.cd, columns_as_tsmi(CMatrix::Zero(s.v.rank() + 1, 2))), Error);
  CMatrix x = CMatrix::Zero(s.v.rank(), 3);
  x.col(1) = s.cd.atoms.col(10);
  const auto m = dict_match(s.cd, columns_as_tsmi(x));
  EXPECT_EQ(m.mask, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_EQ(m.pd[0], 0.0);
}

TEST(Metrics, IdentityAndOffset) {
  std::mt19937_64 rng(3);
  QuantMaps t = QuantMaps::zeros(16, 16);
  std::uniform_real_distribution<double> u(100, 2000);
  for (Index v = 0; v < t.voxels(); ++v) {
    t.t1_ms[v] = u(rng);
    t.t2_ms[v] = u(rng) / 10;
    t.pd[v] = u(rng) / 2000;
  }
  const auto same = map_metrics(t, t);
  EXPECT_EQ(same.t1_mae_ms, 0.0);
  EXPECT_EQ(same.t1_mape, 0.0);
  EXPECT_EQ(same.t2_nrmse, 0.0);
  EXPECT_NEAR(same.t1_ssim, 1.0, 1e-12);
  EXPECT_NEAR(same.pd_ssim, 1.0, 1e-12);
  EXPECT_EQ(same.pd_snr_db, metrics::kSnrClampDb);

  QuantMaps p = t;
  p.t1_ms.array() += 10.0;
  const auto off = map_metrics(p, t);
  EXPECT_NEAR(off.t1_mae_ms, 10.0, 1e-12);
  double mape = 0;
  for (Index v = 0; v < t.voxels(); ++v) mape += 10.0 / t.t1_ms[v];
  EXPECT_NEAR(off.t1_mape, 100.0 * mape / t.voxels(), 1e-10);
  EXPECT_NEAR(off.t1_nrmse, 10.0 * std::sqrt(t.voxels()) / t.t1_ms.norm(), 1e-12);
  EXPECT_LT(off.t1_ssim, 1.0);
  EXPECT_EQ(off.t2_mae_ms, 0.0);
}

TEST(Metrics, MaskAndSnr) {
  QuantMaps t = QuantMaps::zeros(4, 4);
  t.t1_ms.setConstant(1000);
  t.t2_ms.setConstant(100);
  t.pd.setConstant(1);
  t.t1_ms[0] = 0;  // excluded from MAPE
  t.mask.assign(16, 1);
  t.mask[1] = 0;
  QuantMaps p = t;
  p.t1_ms[1] = 50000;  // masked out
  p.t1_ms[0] = 7;
  const auto m = map_metrics(p, t);
  EXPECT_NEAR(m.t1_mae_ms, 7.0 / 15.0, 1e-12);
  EXPECT_EQ(m.t1_mape, 0.0);
  RVector a = RVector::Constant(4, 2.0), b = a;
  b[0] += 0.2;
  EXPECT_NEAR(metrics::snr_db(a, b), 20 * std::log10(4.0 / 0.2), 1e-12);
}

TEST(Metrics, SsimMatchesWindowedOracle) {
  // two-box images, compared with a direct single-window reference on an 8x8 grid
  std::mt19937_64 rng(5);
  RVector a = oracle::random_rmatrix(64, 1, rng).col(0), b = a + 0.3 * oracle::random_rmatrix(64, 1, rng).col(0);
  double w[64], ws = 0;
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) ws += w[i * 8 + j] = std::exp(-((i - 3.5) * (i - 3.5) + (j - 3.5) * (j - 3.5)) / 4.5);
  double ma = 0, mb = 0;
  for (int k = 0; k < 64; ++k) {
    ma += w[k] / ws * b[k];
    mb += w[k] / ws * a[k];
  }
  double sa = 0, sb = 0, sab = 0;
  for (int k = 0; k < 64; ++k) {
    sa += w[k] / ws * (b[k] - ma) * (b[k] - ma);
    sb += w[k] / ws * (a[k] - mb) * (a[k] - mb);
    sab += w[k] / ws * (b[k] - ma) * (a[k] - mb);
  }
  const double l = a.maxCoeff() - a.minCoeff(), c1 = std::pow(0.01 * l, 2), c2 = std::pow(0.03 * l, 2);
  const double ref = (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
  EXPECT_NEAR(metrics::ssim(b, a, 8, 8), ref, 1e-12);
}

TEST(Metrics, ShapeMismatch) {
  EXPECT_THROW(map_metrics(QuantMaps::zeros(4, 4), QuantMaps::zeros(4, 5)), Error);
}

TEST(Maps, SaveLoadRoundTrip) {
  const auto dir = oracle::scratch_dir("maps");
  QuantMaps m = QuantMaps::zeros(3, 5);
  for (Index v = 0; v < 15; ++v) {
    m.t1_ms[v] = 100.0 * v;
    m.t2_ms[v] = 3.0 * v;
    m.pd[v] = 0.1 * v;
  }
  m.mask.assign(15, 1);
  m.mask[0] = 0;
  save_maps(dir, m);
  const auto r = load_maps(dir);
  EXPECT_EQ(r.height, 3);
  EXPECT_EQ(r.width, 5);
  EXPECT_EQ(r.t1_ms, m.t1_ms);
  EXPECT_EQ(r.t2_ms, m.t2_ms);
  EXPECT_EQ(r.pd, m.pd);
  EXPECT_EQ(r.mask, m.mask);
}
