#pragma once

// Low-rank temporal subspace learned by PCA of a fingerprint dictionary.

#include "qmri/core.hpp"
#include "qmri/epg.hpp"
#include "qmri/io.hpp"

#include <Eigen/Eigenvalues>

namespace qmri {

struct SubspaceModel {
  CMatrix basis;       // T x s, orthonormal columns
  RVector eigenvalues; // descending, length s
  double energy_fraction = 0.0;

  Index rank() const { return basis.cols(); }
  Index frames() const { return basis.rows(); }
};

// Rotates a vector so its largest-magnitude entry (lowest index on ties) is real-positive.
inline void fix_phase(Eigen::Ref<CVector> v) {
  Index best = 0;
  double mag = -1.0;
  for (Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) > mag) {
      mag = std::abs(v[i]);
      best = i;
    }
  }
  if (mag > 0.0) v *= std::conj(v[best]) / mag;
}

// Top-s eigenvectors of a T x T Hermitian matrix (lower triangle used).
inline SubspaceModel subspace_from_gram(CMatrix gram, Index s) {
  const Index T = gram.rows();
  require(s >= 1 && s <= T, ErrorCode::invalid_argument, "subspace rank out of range");
  gram = gram.selfadjointView<Eigen::Lower>();
  Eigen::SelfAdjointEigenSolver<CMatrix> es(gram);
  require(es.info() == Eigen::Success, ErrorCode::numerical, "eigensolver did not converge");

  SubspaceModel model;
  model.basis.resize(T, s);
  model.eigenvalues.resize(s);
  // eigenvalues come out ascending
  for (Index k = 0; k < s; ++k) {
    model.basis.col(k) = es.eigenvectors().col(T - 1 - k);
    fix_phase(model.basis.col(k));
    model.eigenvalues[k] = std::max(0.0, es.eigenvalues()[T - 1 - k]);
  }
  const double total = es.eigenvalues().cwiseMax(0.0).sum();
  model.energy_fraction = total > 0.0 ? model.eigenvalues.sum() / total : 1.0;
  return model;
}

// Top-s eigenvectors of signals * signals^H, from the T x T matrix.
inline SubspaceModel fit_subspace(const CMatrix& signals, Index s) {
  const Index T = signals.rows();
  require(s >= 1 && s <= std::min(T, signals.cols()), ErrorCode::invalid_argument,
          "subspace rank out of range");
  CMatrix gram = CMatrix::Zero(T, T);
  gram.selfadjointView<Eigen::Lower>().rankUpdate(signals);
  return subspace_from_gram(std::move(gram), s);
}

inline SubspaceModel fit_subspace(const Dictionary& dict, Index s) { return fit_subspace(dict.atoms, s); }

// Same PCA without holding the dictionary: normalised atoms are simulated in
// blocks and folded into D D^H. Meant for grids too large to store.
inline SubspaceModel fit_subspace_streaming(const SequenceParams& seq, const std::vector<double>& t1_axis,
                                            const std::vector<double>& t2_axis, Index s, int states = 50,
                                            Index block = 2048) {
  check_axis(t1_axis, "T1");
  check_axis(t2_axis, "T2");
  const Index T = seq.frames();
  const auto d = static_cast<Index>(t1_axis.size() * t2_axis.size());
  require(s >= 1 && s <= std::min(T, d), ErrorCode::invalid_argument, "subspace rank out of range");
  CMatrix gram = CMatrix::Zero(T, T);
  CMatrix buf(T, block);
  for (Index j0 = 0; j0 < d; j0 += block) {
    const Index nb = std::min(block, d - j0);
    parallel_for(nb, [&](Index b, Index e) {
      for (Index c = b; c < e; ++c) {
        const Index j = j0 + c;
        const NmrParams th{t1_axis[static_cast<std::size_t>(j) / t2_axis.size()],
                           t2_axis[static_cast<std::size_t>(j) % t2_axis.size()]};
        CVector f = simulate_fingerprint(seq, th, states).signal;
        const double n = f.norm();
        buf.col(c) = n > 0.0 ? CVector(f / n) : f;
      }
    });
    gram.selfadjointView<Eigen::Lower>().rankUpdate(buf.leftCols(nb));
  }
  return subspace_from_gram(std::move(gram), s);
}

inline CMatrix compress(const SubspaceModel& v, const CMatrix& signals) {
  require(signals.rows() == v.frames(), ErrorCode::shape_mismatch,
          "compress: expected " + std::to_string(v.frames()) + " rows");
  return v.basis.adjoint() * signals;
}

inline CMatrix expand(const SubspaceModel& v, const CMatrix& coeffs) {
  require(coeffs.rows() == v.rank(), ErrorCode::shape_mismatch,
          "expand: expected " + std::to_string(v.rank()) + " rows");
  return v.basis * coeffs;
}

inline void save_subspace(const std::filesystem::path& tensor_path, const std::filesystem::path& meta_path,
                          const SubspaceModel& v) {
  write_tensor(tensor_path, tensor_from(v.basis));
  std::vector<double> ev(v.eigenvalues.data(), v.eigenvalues.data() + v.eigenvalues.size());
  write_json(meta_path, json{{"eigenvalues", ev}, {"energy_fraction", v.energy_fraction}});
}

inline SubspaceModel load_subspace(const std::filesystem::path& tensor_path,
                                   const std::filesystem::path& meta_path) {
  SubspaceModel v;
  v.basis = to_cmatrix(read_tensor(tensor_path));
  const json meta = read_json(meta_path);
  StrictObject o(meta, "subspace");
  const auto ev = o.get<std::vector<double>>("eigenvalues");
  v.energy_fraction = o.get<double>("energy_fraction");
  o.finish();
  require(static_cast<Index>(ev.size()) == v.rank(), ErrorCode::shape_mismatch,
          "eigenvalue count does not match basis rank");
  v.eigenvalues = Eigen::Map<const RVector>(ev.data(), static_cast<Index>(ev.size()));
  return v;
}

}  // namespace qmri
