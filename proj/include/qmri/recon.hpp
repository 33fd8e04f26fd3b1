#pragma once

// TSMI reconstruction: zero-filling and the LRTV solver (accelerated proximal
// gradient with backtracking and per-component TV proximal steps).

#include "qmri/core.hpp"
#include "qmri/forward.hpp"
#include "qmri/tv.hpp"

#include <iostream>

namespace qmri {

struct LrtvConfig {
  std::vector<double> lambda{0.2};  // one value broadcasts to every component
  int max_iters = 30;
  double tol = 1e-4;
  double mu_init = 1.0;
  int inner_iters = 50;
  double inner_gap_tol = 1e-6;
  bool warm_start = false;
  int max_backtracks = 40;

  void validate() const {
    require(!lambda.empty(), ErrorCode::invalid_argument, "lambda list is empty");
    for (double l : lambda) require(l >= 0.0, ErrorCode::invalid_argument, "lambda must be >= 0");
    require(tol > 0.0, ErrorCode::invalid_argument, "tol must be > 0");
    require(max_iters >= 1, ErrorCode::invalid_argument, "max_iters must be >= 1");
    require(mu_init > 0.0, ErrorCode::invalid_argument, "mu_init must be > 0");
    require(inner_iters >= 1, ErrorCode::invalid_argument, "inner_iters must be >= 1");
  }

  double lambda_for(Index component) const {
    if (lambda.size() == 1) return lambda[0];
    return lambda.at(static_cast<std::size_t>(component));
  }
};

struct ReconReport {
  std::vector<double> objective_per_iter;
  std::vector<double> step_sizes;
  int iterations_run = 0;
  bool converged = false;
  int nonmonotone_steps = 0;
  int restarts = 0;
  int rejected_steps = 0;
  int backtracks = 0;
};

inline Tsmi zero_fill(const SubspaceModel& v, const KspaceData& data) { return apply_adjoint(v, data); }

inline double tv_penalty(const CMatrix& x, Index h, Index w, const LrtvConfig& cfg) {
  double s = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    const double l = cfg.lambda_for(i);
    if (l > 0.0) s += l * tv::total_variation(x.row(i).transpose(), h, w);
  }
  return s;
}

// The solver minimises 1/2 ||Y - A(V X)||^2 + sum_i lambda_i TV(X_i); that is the
// functional for which a gradient step of mu on V^H A^H(A(VX) - Y) followed by a
// TV prox of weight lambda_i mu is a proximal-gradient step.
inline double lrtv_objective(const Acquisition& op, const KspaceData& data, const Tsmi& x, const LrtvConfig& cfg) {
  return 0.5 * (op.forward(x.coeffs) - data.samples).squaredNorm() + tv_penalty(x.coeffs, x.height, x.width, cfg);
}

inline std::pair<Tsmi, ReconReport> lrtv(const SubspaceModel& v, const KspaceData& data, const LrtvConfig& cfg) {
  cfg.validate();
  require(cfg.lambda.size() == 1 || static_cast<Index>(cfg.lambda.size()) == v.rank(),
          ErrorCode::invalid_argument, "lambda list length must be 1 or s");
  const Acquisition op(v, data.pattern);
  const Index s = v.rank();
  const Index h = data.pattern.height;
  const Index w = data.pattern.width;
  const CVector& y = data.samples;
  require(y.size() == data.pattern.total_samples(), ErrorCode::shape_mismatch,
          "k-space sample count does not match pattern");

  CMatrix x = CMatrix::Zero(s, h * w);
  CMatrix z_prev = x;
  CVector ax = CVector::Zero(y.size());  // A(V X^k), maintained by linearity
  CVector az_prev = ax;
  std::vector<TvDual> duals(static_cast<std::size_t>(s));
  TvProxOptions popt;
  popt.max_iters = cfg.inner_iters;
  popt.gap_tol = cfg.inner_gap_tol;

  double mu = cfg.mu_init;
  if (cfg.warm_start) {
    const CVector a1 = op.forward(op.adjoint(y));
    const double n1 = a1.norm();
    if (n1 > 0.0) mu *= y.norm() / n1;
  }

  ReconReport rep;
  CMatrix z;
  CVector az;
  double prev_obj = 0.5 * y.squaredNorm();

  // one backtracked proximal-gradient step from (x, ax) into (z, az)
  auto prox_step = [&](const CMatrix& xs, const CVector& axs) {
    const CVector r = axs - y;
    const double fx = r.squaredNorm();
    const CMatrix g = op.adjoint(r);
    int tries = 0;
    while (true) {
      const CMatrix step = xs - mu * g;
      z.resize(s, h * w);
      parallel_for(s, [&](Index b, Index e) {
        for (Index i = b; i < e; ++i) {
          const double alpha = cfg.lambda_for(i) * mu;
          auto res = tv_prox(step.row(i).transpose(), h, w, alpha, popt, &duals[static_cast<std::size_t>(i)]);
          z.row(i) = res.image.transpose();
        }
      });
      az = op.forward(z);
      const CMatrix d = z - xs;
      const double fz = (az - y).squaredNorm();
      const double bound = fx + 2.0 * (g.conjugate().cwiseProduct(d)).sum().real() + d.squaredNorm() / mu;
      // halve while the sufficient-decrease test fails
      if (fz <= bound + 1e-12 * std::max(1.0, fx) || tries >= cfg.max_backtracks) break;
      mu *= 0.5;
      ++tries;
    }
    rep.backtracks += tries;
    const double obj = 0.5 * (az - y).squaredNorm() + tv_penalty(z, h, w, cfg);
    require(std::isfinite(obj), ErrorCode::numerical, "LRTV objective is not finite");
    return obj;
  };

  int km = 1;  // momentum counter, reset on restart
  const double floor = 1e-6 * prev_obj;
  auto increased = [&](double obj) { return obj > prev_obj + 1e-12 * std::max(prev_obj, floor); };
  for (int k = 1; k <= cfg.max_iters; ++k) {
    double obj = prox_step(x, ax);
    if (k > 1 && increased(obj)) {
      // momentum overshoot: restart from the last accepted iterate
      ++rep.restarts;
      km = 1;
      obj = prox_step(z_prev, az_prev);
      if (increased(obj)) {
        // inexact prox gave no descent; keep the previous iterate
        ++rep.rejected_steps;
        z = z_prev;
        az = az_prev;
        obj = prev_obj;
      }
    }
    if (k > 1 && increased(obj)) {
      ++rep.nonmonotone_steps;
      std::cerr << "lrtv: objective increased at iteration " << k << " (" << prev_obj << " -> " << obj << ")\n";
    }
    rep.objective_per_iter.push_back(obj);
    rep.step_sizes.push_back(mu);
    rep.iterations_run = k;
    const bool small_change = k > 1 && std::abs(obj - prev_obj) < cfg.tol * prev_obj;
    prev_obj = obj;
    if (small_change) {
      rep.converged = true;
      break;
    }
    const double beta = static_cast<double>(km - 1) / static_cast<double>(km + 2);
    ++km;
    x = z + beta * (z - z_prev);
    ax = az + beta * (az - az_prev);
    z_prev = z;
    az_prev = az;
  }
  return {Tsmi{z, h, w}, rep};
}

}  // namespace qmri
