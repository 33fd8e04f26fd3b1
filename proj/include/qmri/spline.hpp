#pragma once

// Affine-spline view of a trained encoder: local slopes A[x] and offsets b[x],
// ReLU activation patterns as exact segment identifiers, k-means atlases of
// slopes and matched filters lifted to the temporal dimension.

#include "qmri/core.hpp"
#include "qmri/neural.hpp"
#include "qmri/subspace.hpp"

#include <random>
#include <string>
#include <unordered_set>

namespace qmri {

inline constexpr Index kEndLevel = -1;
inline constexpr double kKinkTol = 1e-12;

struct SlopeSample {
  RVector input;
  RMatrix jacobian;  // rows x s
  RVector offset;
  RVector value;     // output at the level, equal to jacobian * input + offset
  Index level = kEndLevel;
  bool on_kink = false;
};

namespace detail {

inline Index resolve_level(const MrfResnet& net, Index level) {
  if (level == kEndLevel) return net.depth();
  require(level >= 1 && level <= net.depth(), ErrorCode::invalid_argument,
          "level must be in 1.." + std::to_string(net.depth()) + " or end");
  return level;
}

}  // namespace detail

// Reverse-mode Jacobian of h^(level) (or of z for kEndLevel) at x.
inline SlopeSample jacobian(const MrfResnet& net, const RVector& x, Index level = kEndLevel) {
  require(x.size() == net.input_dim, ErrorCode::shape_mismatch, "jacobian: input size mismatch");
  require(x.allFinite(), ErrorCode::invalid_argument, "jacobian: non-finite input");
  const Index depth = detail::resolve_level(net, level);
  const EncoderTrace t = encoder_trace(net, RMatrix(x));
  SlopeSample out;
  out.input = x;
  out.level = level;
  RMatrix adj;
  if (level == kEndLevel) {
    adj = net.output_scale.asDiagonal() * net.w_out;
    out.value = t.z.col(0);
  } else {
    adj = RMatrix::Identity(net.width, net.width);
    out.value = t.h[static_cast<std::size_t>(depth)].col(0);
  }
  for (Index i = depth - 1; i >= 0; --i) {
    const auto& b = net.blocks[static_cast<std::size_t>(i)];
    const RVector& u = t.u[static_cast<std::size_t>(i)].col(0);
    const RVector& a1 = t.a1[static_cast<std::size_t>(i)].col(0);
    if ((u.array().abs() <= kKinkTol).any() || (a1.array().abs() <= kKinkTol).any()) out.on_kink = true;
    const RMatrix adj_u = adj * relu_mask(u).col(0).asDiagonal();
    const RMatrix adj_a1 = (adj_u * b.w2) * relu_mask(a1).col(0).asDiagonal();
    adj = adj_u + adj_a1 * b.w1;
  }
  out.jacobian = net.lift.size() ? RMatrix(adj * net.lift) : adj;
  out.offset = out.value - out.jacobian * x;
  return out;
}

// Bits of the inner and outer ReLUs of blocks 1..level ('1' = active).
inline std::string activation_pattern(const MrfResnet& net, const RVector& x, Index level = kEndLevel) {
  const Index depth = detail::resolve_level(net, level);
  const EncoderTrace t = encoder_trace(net, RMatrix(x));
  std::string bits;
  bits.reserve(static_cast<std::size_t>(2 * net.width * depth));
  for (Index i = 0; i < depth; ++i) {
    for (Index k = 0; k < net.width; ++k) bits.push_back(t.a1[static_cast<std::size_t>(i)](k, 0) > 0.0 ? '1' : '0');
    for (Index k = 0; k < net.width; ++k) bits.push_back(t.u[static_cast<std::size_t>(i)](k, 0) > 0.0 ? '1' : '0');
  }
  return bits;
}

struct HierarchyReport {
  std::vector<Index> level_counts;  // blocks 1..N
  Index end_count = 0;
  Index kink_samples = 0;
};

inline HierarchyReport hierarchy_report(const MrfResnet& net, const RMatrix& samples) {
  HierarchyReport rep;
  const Index n = net.depth(), w = net.width;
  std::vector<std::unordered_set<std::string>> seen(static_cast<std::size_t>(n));
  constexpr Index kBlock = 1024;
  for (Index c0 = 0; c0 < samples.cols(); c0 += kBlock) {
    const Index nc = std::min(kBlock, samples.cols() - c0);
    const EncoderTrace t = encoder_trace(net, samples.middleCols(c0, nc));
    for (Index c = 0; c < nc; ++c) {
      std::string bits;
      bool kink = false;
      for (Index i = 0; i < n; ++i) {
        const auto& a1 = t.a1[static_cast<std::size_t>(i)];
        const auto& u = t.u[static_cast<std::size_t>(i)];
        for (Index k = 0; k < w; ++k) {
          bits.push_back(a1(k, c) > 0.0 ? '1' : '0');
          kink = kink || std::abs(a1(k, c)) <= kKinkTol;
        }
        for (Index k = 0; k < w; ++k) {
          bits.push_back(u(k, c) > 0.0 ? '1' : '0');
          kink = kink || std::abs(u(k, c)) <= kKinkTol;
        }
        seen[static_cast<std::size_t>(i)].insert(bits);
      }
      rep.kink_samples += kink;
    }
  }
  for (const auto& s : seen) rep.level_counts.push_back(static_cast<Index>(s.size()));
  rep.end_count = rep.level_counts.empty() ? 1 : rep.level_counts.back();
  return rep;
}

struct PartitionAtlas {
  Index level = kEndLevel;
  std::vector<Index> labels;
  RMatrix centroids;  // clusters x (rows * s), vectorised column-major slopes
  Index empty_clusters = 0;
  Index distinct_patterns = 0;
  Index kink_samples = 0;
  int iterations = 0;
};

struct KMeansResult {
  std::vector<Index> labels;
  RMatrix centroids;
  Index empty_clusters = 0;
  int iterations = 0;
};

// Lloyd iterations from a k-means++ start; rows of `data` are points.
inline KMeansResult kmeans(const RMatrix& data, Index k, std::uint64_t seed, int max_iters = 100) {
  const Index n = data.rows();
  require(n >= 1, ErrorCode::invalid_argument, "k-means needs samples");
  require(k >= 1 && k <= n, ErrorCode::invalid_argument, "k must be in 1..sample count");
  std::mt19937_64 rng(seed);
  std::vector<Index> centers{std::uniform_int_distribution<Index>(0, n - 1)(rng)};
  RVector d2 = (data.rowwise() - data.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<Index>(centers.size()) < k) {
    const double total = d2.sum();
    if (!(total > 0.0)) break;  // every point already coincides with a centre
    const double r = std::uniform_real_distribution<double>(0.0, total)(rng);
    double acc = 0.0;
    Index pick = n - 1;
    for (Index i = 0; i < n; ++i) {
      acc += d2[i];
      if (acc > r && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    centers.push_back(pick);
    d2 = d2.cwiseMin((data.rowwise() - data.row(pick)).rowwise().squaredNorm());
  }
  KMeansResult res;
  res.empty_clusters = k - static_cast<Index>(centers.size());
  RMatrix c(static_cast<Index>(centers.size()), data.cols());
  for (std::size_t i = 0; i < centers.size(); ++i) c.row(static_cast<Index>(i)) = data.row(centers[i]);
  std::vector<Index> labels(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      double bd = INFINITY;
      for (Index j = 0; j < c.rows(); ++j) {
        const double d = (data.row(i) - c.row(j)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = j;
        }
      }
      if (labels[static_cast<std::size_t>(i)] != best) {
        labels[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    res.iterations = it + 1;
    RMatrix sum = RMatrix::Zero(c.rows(), c.cols());
    std::vector<Index> count(static_cast<std::size_t>(c.rows()), 0);
    for (Index i = 0; i < n; ++i) {
      sum.row(labels[static_cast<std::size_t>(i)]) += data.row(i);
      ++count[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    // drop empty clusters and compact labels
    std::vector<Index> remap(static_cast<std::size_t>(c.rows()), -1);
    Index kept = 0;
    for (Index j = 0; j < c.rows(); ++j)
      if (count[static_cast<std::size_t>(j)] > 0) remap[static_cast<std::size_t>(j)] = kept++;
    res.empty_clusters += c.rows() - kept;
    RMatrix nc(kept, c.cols());
    for (Index j = 0; j < c.rows(); ++j)
      if (remap[static_cast<std::size_t>(j)] >= 0)
        nc.row(remap[static_cast<std::size_t>(j)]) = sum.row(j) / static_cast<double>(count[static_cast<std::size_t>(j)]);
    for (auto& l : labels) l = remap[static_cast<std::size_t>(l)];
    c = std::move(nc);
    if (!changed) break;
  }
  res.labels = std::move(labels);
  res.centroids = std::move(c);
  return res;
}

// Samples are columns (compressed aligned real fingerprints).
inline PartitionAtlas build_atlas(const MrfResnet& net, const RMatrix& samples, Index k, Index level,
                                  std::uint64_t seed) {
  require(samples.cols() >= 1, ErrorCode::invalid_argument, "build_atlas: no samples");
  require(k <= samples.cols(), ErrorCode::invalid_argument, "build_atlas: k exceeds sample count");
  const Index n = samples.cols();
  const Index rows = level == kEndLevel ? net.outputs() : net.width;
  RMatrix flat(n, rows * net.input_dim);
  std::vector<std::string> patterns(static_cast<std::size_t>(n));
  std::vector<std::uint8_t> kinks(static_cast<std::size_t>(n), 0);
  parallel_for(n, [&](Index b, Index e) {
    for (Index i = b; i < e; ++i) {
      const RVector x = samples.col(i);
      const auto js = jacobian(net, x, level);
      flat.row(i) = Eigen::Map<const RVector>(js.jacobian.data(), js.jacobian.size()).transpose();
      patterns[static_cast<std::size_t>(i)] = activation_pattern(net, x, level);
      kinks[static_cast<std::size_t>(i)] = js.on_kink;
    }
  });
  PartitionAtlas atlas;
  atlas.level = level;
  auto km = kmeans(flat, k, seed);
  atlas.labels = std::move(km.labels);
  atlas.centroids = std::move(km.centroids);
  atlas.empty_clusters = km.empty_clusters;
  atlas.iterations = km.iterations;
  atlas.distinct_patterns =
      static_cast<Index>(std::unordered_set<std::string>(patterns.begin(), patterns.end()).size());
  for (auto f : kinks) atlas.kink_samples += f;
  return atlas;
}

// T x p filters V * A[x]^T.
inline CMatrix matched_filters(const MrfResnet& net, const SubspaceModel& v, const RVector& x) {
  require(v.rank() == net.input_dim, ErrorCode::shape_mismatch, "matched_filters: subspace rank mismatch");
  const auto js = jacobian(net, x, kEndLevel);
  return v.basis * js.jacobian.transpose().cast<cdouble>();
}

// Leading three principal coordinates of real sample columns, for point-cloud export.
inline RMatrix pca_coordinates(const RMatrix& samples, Index dims = 3) {
  const CMatrix c = samples.cast<cdouble>();
  const auto model = fit_subspace(c, std::min<Index>(dims, std::min(samples.rows(), samples.cols())));
  return compress(model, c).real();
}

}  // namespace qmri
