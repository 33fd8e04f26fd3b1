#pragma once

// Proximal operator of isotropic total variation for complex images,
//   prox(x) = argmin_u 1/2 ||x - u||^2 + alpha TV(u),
// solved with the accelerated Chambolle-Pock primal-dual iteration.
// Gradients are forward differences with Neumann boundary; the pointwise norm is
// sqrt(|du/dx|^2 + |du/dy|^2) over complex differences.

#include "qmri/core.hpp"

#include <cmath>

namespace qmri {

struct TvDual {
  CVector px, py;
};

struct TvProxOptions {
  int max_iters = 50;
  double gap_tol = 1e-6;  // relative to ||x||^2
  int check_every = 5;
  double tau0 = 4.0;
};

struct TvProxResult {
  CVector image;
  double gap = 0.0;
  int iterations = 0;
};

namespace tv {

inline void gradient(const CVector& u, Index h, Index w, CVector& gx, CVector& gy) {
  gx.resize(u.size());
  gy.resize(u.size());
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const Index i = y * w + x;
      gx[i] = x + 1 < w ? u[i + 1] - u[i] : cdouble(0.0);
      gy[i] = y + 1 < h ? u[i + w] - u[i] : cdouble(0.0);
    }
}

// Negative adjoint of `gradient`.
inline void divergence(const CVector& px, const CVector& py, Index h, Index w, CVector& out) {
  out.resize(px.size());
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const Index i = y * w + x;
      cdouble d = 0.0;
      if (x + 1 < w) d += px[i];
      if (x > 0) d -= px[i - 1];
      if (y + 1 < h) d += py[i];
      if (y > 0) d -= py[i - w];
      out[i] = d;
    }
}

inline double total_variation(const CVector& u, Index h, Index w) {
  CVector gx, gy;
  gradient(u, h, w, gx, gy);
  double s = 0.0;
  for (Index i = 0; i < u.size(); ++i) s += std::sqrt(std::norm(gx[i]) + std::norm(gy[i]));
  return s;
}

inline double primal(const CVector& u, const CVector& x, double alpha, Index h, Index w) {
  return 0.5 * (u - x).squaredNorm() + alpha * total_variation(u, h, w);
}

// Dual objective for p already inside the alpha-ball.
inline double dual(const CVector& px, const CVector& py, const CVector& x, Index h, Index w) {
  CVector d;
  divergence(px, py, h, w, d);
  return 0.5 * x.squaredNorm() - 0.5 * (x + d).squaredNorm();
}

inline void project_ball(CVector& px, CVector& py, double alpha) {
  for (Index i = 0; i < px.size(); ++i) {
    const double m = std::sqrt(std::norm(px[i]) + std::norm(py[i]));
    if (m > alpha) {
      const double s = alpha / m;
      px[i] *= s;
      py[i] *= s;
    }
  }
}

}  // namespace tv

// `dual`, when given, warm-starts the dual variable and receives the final one.
inline TvProxResult tv_prox(const CVector& x, Index h, Index w, double alpha,
                            const TvProxOptions& opt = {}, TvDual* dual = nullptr) {
  require(alpha >= 0.0, ErrorCode::invalid_argument, "tv_prox: negative alpha");
  require(x.size() == h * w, ErrorCode::shape_mismatch, "tv_prox: image size != H*W");
  TvProxResult res;
  if (alpha == 0.0 || x.size() == 0) {
    res.image = x;
    return res;
  }
  constexpr double kL2 = 8.0;  // ||grad||^2 bound for 2D forward differences
  double tau = opt.tau0;
  double sigma = 1.0 / (kL2 * tau);

  CVector px = CVector::Zero(x.size()), py = CVector::Zero(x.size());
  if (dual && dual->px.size() == x.size()) {
    px = dual->px;
    py = dual->py;
    tv::project_ball(px, py, alpha);
  }
  CVector div;
  tv::divergence(px, py, h, w, div);
  CVector u = x + div;  // primal point consistent with the starting dual
  CVector ubar = u, uold, gx, gy;
  const double scale = x.squaredNorm();
  const double tol = opt.gap_tol * scale;

  auto gap_now = [&] { return tv::primal(u, x, alpha, h, w) - tv::dual(px, py, x, h, w); };

  res.gap = gap_now();
  int it = 0;
  while (it < opt.max_iters && !(res.gap <= tol)) {
    tv::gradient(ubar, h, w, gx, gy);
    px += sigma * gx;
    py += sigma * gy;
    tv::project_ball(px, py, alpha);
    tv::divergence(px, py, h, w, div);
    uold = u;
    u = (u + tau * div + tau * x) / (1.0 + tau);
    const double theta = 1.0 / std::sqrt(1.0 + 2.0 * tau);
    tau *= theta;
    sigma /= theta;
    ubar = u + theta * (u - uold);
    ++it;
    if (it % opt.check_every == 0 || it == opt.max_iters) res.gap = gap_now();
  }
  res.image = std::move(u);
  res.iterations = it;
  if (dual) {
    dual->px = std::move(px);
    dual->py = std::move(py);
  }
  return res;
}

}  // namespace qmri
