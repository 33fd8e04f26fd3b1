#include "oracles.hpp"
#include "qmri/forward.hpp"

#include <gtest/gtest.h>

using namespace qmri;

namespace {

SubspaceModel random_subspace(Index T, Index s, std::mt19937_64& rng) {
  return fit_subspace(oracle::random_cmatrix(T, 4 * T, rng), s);
}

}  // namespace

TEST(Pattern, FullSampling) {
  const auto p = make_pattern(8, 6, 5, 1.0, SamplingScheme::uniform_random, 1);
  EXPECT_DOUBLE_EQ(p.undersampling, 1.0);
  for (Index t = 0; t < 5; ++t) {
    const auto m = p.mask(t);
    EXPECT_EQ(std::count(m.begin(), m.end(), 1), 48);
  }
}

TEST(Pattern, ExactCountDcAndDeterminism) {
  for (auto scheme : {SamplingScheme::uniform_random, SamplingScheme::variable_density}) {
    const auto p = make_pattern(64, 64, 20, 0.125, scheme, 42);
    for (const auto& f : p.frames) {
      EXPECT_EQ(f.size(), 512u);
      EXPECT_EQ(f.front(), 0);  // DC
      EXPECT_TRUE(std::is_sorted(f.begin(), f.end()));
      EXPECT_EQ(std::adjacent_find(f.begin(), f.end()), f.end());
    }
    EXPECT_DOUBLE_EQ(p.undersampling, 0.125);
    EXPECT_TRUE(p == make_pattern(64, 64, 20, 0.125, scheme, 42));
    EXPECT_FALSE(p == make_pattern(64, 64, 20, 0.125, scheme, 43));
    EXPECT_NE(p.frames[0], p.frames[1]);
  }
}

TEST(Pattern, VariableDensityFavoursCentre) {
  const auto p = make_pattern(64, 64, 30, 0.125, SamplingScheme::variable_density, 5);
  const auto u = make_pattern(64, 64, 30, 0.125, SamplingScheme::uniform_random, 5);
  auto radius = [](const SamplingPattern& q) {
    double s = 0;
    Index n = 0;
    for (const auto& f : q.frames)
      for (Index k : f) {
        const double fy = signed_frequency(k / q.width, q.height), fx = signed_frequency(k % q.width, q.width);
        s += std::sqrt(fx * fx + fy * fy);
        ++n;
      }
    return s / static_cast<double>(n);
  };
  EXPECT_LT(radius(p), 0.6 * radius(u));
}

TEST(Pattern, Errors) {
  EXPECT_THROW(make_pattern(4, 4, 2, 0.0, SamplingScheme::uniform_random, 1), Error);
  EXPECT_THROW(make_pattern(4, 4, 2, 1.5, SamplingScheme::uniform_random, 1), Error);
  EXPECT_THROW(make_pattern(4, 4, 2, 0.01, SamplingScheme::uniform_random, 1), Error);
  EXPECT_THROW(parse_scheme("spiral"), Error);
}

TEST(Pattern, SaveLoadBitPacked) {
  const auto dir = std::filesystem::temp_directory_path() / "qmri_test_forward";
  std::filesystem::create_directories(dir);
  const auto p = make_pattern(33, 17, 7, 0.3, SamplingScheme::variable_density, 9);
  save_pattern(dir / "p.json", p);
  const auto back = load_pattern(dir / "p.json");
  EXPECT_TRUE(back == p);
  EXPECT_DOUBLE_EQ(back.undersampling, p.undersampling);
}

TEST(Forward, MatchesDenseOracle) {
  std::mt19937_64 rng(3);
  const Index h = 5, w = 6, T = 7, s = 3;
  const auto v = random_subspace(T, s, rng);
  const auto p = make_pattern(h, w, T, 0.4, SamplingScheme::uniform_random, 4);
  const Tsmi x{oracle::random_cmatrix(s, h * w, rng), h, w};
  const CVector fast = apply_forward(v, x, p).samples;
  const CVector dense = oracle::dense_forward(v.basis, x.coeffs, p);
  EXPECT_LE((fast - dense).norm(), 1e-12 * dense.norm());
}

TEST(Forward, AdjointDotProduct) {
  std::mt19937_64 rng(10);
  for (int probe = 0; probe < 20; ++probe) {
    const Index h = 8 + probe % 5, w = 6 + probe % 7, T = 12, s = 4;
    const auto v = random_subspace(T, s, rng);
    const auto p = make_pattern(h, w, T, 0.3, probe % 2 ? SamplingScheme::variable_density : SamplingScheme::uniform_random,
                                static_cast<std::uint64_t>(probe));
    const Tsmi x{oracle::random_cmatrix(s, h * w, rng), h, w};
    const auto ax = apply_forward(v, x, p);
    const CVector y = oracle::random_cmatrix(ax.samples.size(), 1, rng).col(0);
    const Tsmi aty = apply_adjoint(v, kspace_from_samples(p, y));
    const cdouble lhs = y.dot(ax.samples);                // <A x, y>
    const cdouble rhs = aty.coeffs.reshaped().dot(x.coeffs.reshaped());  // <x, A^H y>
    EXPECT_LE(std::abs(lhs - rhs), 1e-10 * std::abs(lhs));
  }
}

TEST(Forward, FullSamplingIsIdentity) {
  std::mt19937_64 rng(11);
  const auto v = random_subspace(16, 5, rng);
  const auto p = make_pattern(12, 10, 16, 1.0, SamplingScheme::uniform_random, 1);
  const Tsmi x{oracle::random_cmatrix(5, 120, rng), 12, 10};
  const Tsmi back = apply_adjoint(v, apply_forward(v, x, p));
  EXPECT_LE((back.coeffs - x.coeffs).norm(), 1e-10 * x.coeffs.norm());
}

TEST(Forward, ZerosAndShapeErrors) {
  std::mt19937_64 rng(12);
  const auto v = random_subspace(6, 2, rng);
  const auto p = make_pattern(4, 4, 6, 0.5, SamplingScheme::uniform_random, 1);
  EXPECT_EQ(apply_forward(v, Tsmi::zeros(2, 4, 4), p).samples.norm(), 0.0);
  EXPECT_EQ(apply_adjoint(v, kspace_from_samples(p, CVector::Zero(p.total_samples()))).coeffs.norm(), 0.0);
  EXPECT_THROW(apply_forward(v, Tsmi::zeros(3, 4, 4), p), Error);
  EXPECT_THROW(apply_forward(v, Tsmi::zeros(2, 4, 5), p), Error);
  EXPECT_THROW(kspace_from_samples(p, CVector::Zero(3)), Error);
  const auto p7 = make_pattern(4, 4, 7, 0.5, SamplingScheme::uniform_random, 1);
  EXPECT_THROW(apply_forward(v, Tsmi::zeros(2, 4, 4), p7), Error);
}

TEST(Noise, ExactRealisedSnr) {
  std::mt19937_64 rng(13);
  const auto v = random_subspace(10, 3, rng);
  const auto p = make_pattern(16, 16, 10, 0.25, SamplingScheme::uniform_random, 2);
  const auto data = apply_forward(v, Tsmi{oracle::random_cmatrix(3, 256, rng), 16, 16}, p);
  for (double snr : {35.0, 0.0, 12.5}) {
    const auto noisy = add_noise(data, snr, 77);
    const double ratio = data.samples.norm() / (noisy.samples - data.samples).norm();
    EXPECT_NEAR(ratio, std::pow(10.0, snr / 20.0), 1e-9 * std::pow(10.0, snr / 20.0));
    EXPECT_EQ(noisy.samples, add_noise(data, snr, 77).samples);
  }
  EXPECT_EQ(add_noise(data, INFINITY, 1).samples, data.samples);
  EXPECT_THROW(add_noise(with_samples(data, CVector::Zero(data.samples.size())), 30, 1), Error);
}
