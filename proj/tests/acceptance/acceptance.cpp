// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.

#include "oracles.hpp"
#include "qmri/pipeline.hpp"
#include "qmri/recon.hpp"
#include "qmri/spline.hpp"
#include "qmri/tv.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

using namespace qmri;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 1: operators ----------------------------------------------------------

Verdict operators() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst_dot = 0.0;
  for (int probe = 0; probe < 20; ++probe) {
    const Index h = 8 + probe % 5, w = 6 + probe % 7, T = 16, s = 5;
    const auto v = fit_subspace(oracle::random_cmatrix(T, 4 * T, rng), s);
    const auto p = make_pattern(h, w, T, 0.3,
                                probe % 2 ? SamplingScheme::variable_density : SamplingScheme::uniform_random,
                                static_cast<std::uint64_t>(probe + 1));
    const Tsmi x{oracle::random_cmatrix(s, h * w, rng), h, w};
    const auto ax = apply_forward(v, x, p);
    const CVector y = oracle::random_cmatrix(ax.samples.size(), 1, rng).col(0);
    const Tsmi aty = apply_adjoint(v, kspace_from_samples(p, y));
    const cdouble lhs = y.dot(ax.samples);
    const cdouble rhs = aty.coeffs.reshaped().dot(x.coeffs.reshaped());
    worst_dot = std::max(worst_dot, std::abs(lhs - rhs) / std::abs(lhs));
  }
  // full sampling, ZF against the ground-truth TSMI
  const auto v = fit_subspace(oracle::random_cmatrix(24, 96, rng), 6);
  const auto p = make_pattern(20, 18, 24, 1.0, SamplingScheme::uniform_random, 7);
  const Tsmi x{oracle::random_cmatrix(6, 20 * 18, rng), 20, 18};
  const Tsmi zf = zero_fill(v, apply_forward(v, x, p));
  const double zf_err = (zf.coeffs - x.coeffs).norm() / x.coeffs.norm();
  const double sec = seconds_since(t0);
  return {worst_dot <= 1e-10 && zf_err <= 1e-10 && sec < 5.0,
          "max dot-product rel err " + fmt(worst_dot) + ", full-sampling ZF rel err " + fmt(zf_err) + ", " +
              fmt(sec, 3) + " s"};
}

// ---- 2: TV prox ------------------------------------------------------------

Verdict tv_certificate() {
  std::mt19937_64 rng(202);
  double worst_gap = 0.0, worst_ref = 0.0, prox_sec = 0.0;
  bool gap_ok = true;
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 50; ++i) {
    const CVector x = oracle::random_cmatrix(256, 1, rng).col(0);
    for (double alpha : {0.01, 0.1, 1.0}) {
      TvProxOptions o;
      o.max_iters = 50000;
      o.gap_tol = 1e-11;
      const auto t1 = std::chrono::steady_clock::now();
      const auto r = tv_prox(x, 16, 16, alpha, o);
      prox_sec += seconds_since(t1);
      TvProxOptions ro;
      ro.max_iters = 100000;
      ro.gap_tol = 1e-13;
      ro.check_every = 50;
      const auto ref = tv_prox(x, 16, 16, alpha, ro);
      const double rel_gap = r.gap / x.squaredNorm();
      gap_ok = gap_ok && r.gap <= 1e-6 * x.squaredNorm();
      worst_gap = std::max(worst_gap, rel_gap);
      worst_ref = std::max(worst_ref, (r.image - ref.image).norm() / ref.image.norm());
    }
  }
  const double sec = seconds_since(t0);
  return {gap_ok && worst_ref <= 1e-4 && sec < 60.0,
          "max gap/||x||^2 " + fmt(worst_gap) + ", max rel err vs reference " + fmt(worst_ref) + ", prox " +
              fmt(prox_sec, 3) + " s, total " + fmt(sec, 3) + " s"};
}

// ---- 3: FISTA --------------------------------------------------------------

struct Problem {
  SubspaceModel v;
  SamplingPattern p;
  Tsmi truth;
  KspaceData data;
};

Problem make_problem(std::uint64_t seed, Index h = 16, Index w = 16, Index T = 24, Index s = 4, double fraction = 0.3,
                     double snr = 30.0) {
  std::mt19937_64 rng(seed);
  Problem pr;
  pr.v = fit_subspace(oracle::random_cmatrix(T, 3 * T, rng), s);
  pr.p = make_pattern(h, w, T, fraction, SamplingScheme::variable_density, seed + 1);
  pr.truth = Tsmi::zeros(s, h, w);
  const CMatrix vals = oracle::random_cmatrix(s, 4, rng);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) pr.truth.coeffs.col(y * w + x) = vals.col((y >= h / 2 ? 2 : 0) + (x >= w / 3 ? 1 : 0));
  pr.data = add_noise(apply_forward(pr.v, pr.truth, pr.p), snr, seed + 2);
  return pr;
}

Verdict fista() {
  int monotone = 0;
  double worst_rise = 0.0;
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    const auto pr = make_problem(seed);
    LrtvConfig cfg;
    cfg.lambda = {0.05};
    cfg.max_iters = 40;
    cfg.tol = 1e-9;
    const auto rep = lrtv(pr.v, pr.data, cfg).second;
    bool ok = true;
    const auto& f = rep.objective_per_iter;
    for (std::size_t k = 1; k < f.size(); ++k) {
      worst_rise = std::max(worst_rise, (f[k] - f[k - 1]) / f[k - 1]);
      ok = ok && f[k] <= f[k - 1] * (1.0 + 1e-12);
    }
    monotone += ok;
  }
  // lambda = 0 against plain gradient descent with unit step
  const auto pr = make_problem(4, 10, 10, 16, 3, 0.35, 30.0);
  LrtvConfig cfg;
  cfg.lambda = {0.0};
  cfg.max_iters = 3000;
  cfg.tol = 1e-14;
  const auto [x, rep] = lrtv(pr.v, pr.data, cfg);
  const Acquisition op(pr.v, pr.data.pattern);
  CMatrix xg = CMatrix::Zero(pr.v.rank(), pr.p.voxels());
  for (int k = 0; k < 20000; ++k) xg -= op.adjoint(op.forward(xg) - pr.data.samples);
  const double fg = 0.5 * (op.forward(xg) - pr.data.samples).squaredNorm();
  const double obj_err = std::abs(rep.objective_per_iter.back() - fg) / fg;
  // first iterate from zero init
  bool zf_exact = true;
  for (std::uint64_t seed : {2, 3, 5}) {
    const auto q = make_problem(seed);
    LrtvConfig c1;
    c1.lambda = {0.0};
    c1.max_iters = 1;
    c1.mu_init = 1.0;
    const Tsmi x0 = lrtv(q.v, q.data, c1).first;
    const Tsmi zf = zero_fill(q.v, q.data);
    zf_exact = zf_exact && std::memcmp(x0.coeffs.data(), zf.coeffs.data(), sizeof(cdouble) * zf.coeffs.size()) == 0;
  }
  return {monotone == 10 && obj_err <= 1e-4 && zf_exact,
          std::to_string(monotone) + "/10 monotone (max rel rise " + fmt(worst_rise) + "), lambda=0 objective rel err " +
              fmt(obj_err) + ", first iterate == ZF " + (zf_exact ? "bitwise" : "no")};
}

// ---- 4-8, 10, 11: retrospective run ----------------------------------------

struct Desk {
  ExperimentConfig cfg;
  fs::path dir;
  json metrics, timings;
  Dictionary dict;
  SubspaceModel v;
  MrfResnet enc;
  DecoderNet dec;
  KernelMachine km_enc;
  NoisySet eval;
  bool loaded = false;
  bool eval_ready = false;
};

Desk& desk_run(Desk& d) {
  if (d.loaded) return d;
  std::cout << "running retrospective experiment in " << d.dir << "\n" << std::flush;
  run_retrospective(d.cfg, d.dir);
  d.metrics = read_json(d.dir / "metrics.json");
  d.timings = read_json(d.dir / "timings.json");
  d.dict = load_dictionary(d.dir / "dict.tnsr", d.dir / "grid.json");
  d.v = load_subspace(d.dir / "V.tnsr", d.dir / "V.json");
  d.enc = load_encoder(d.dir / "encoder.json");
  d.dec = load_decoder(d.dir / "decoder.json");
  d.km_enc = load_km(d.dir / "km_encoder.json");
  d.loaded = true;
  return d;
}

const NoisySet& eval_set(Desk& d) {
  desk_run(d);
  if (!d.eval_ready) {
    d.eval = make_eval_set(d.dict, d.v, d.cfg.eval_copies, d.cfg.training.noise_sigma, derive_seed(d.cfg.seed, stage_eval));
    d.eval_ready = true;
  }
  return d.eval;
}

Verdict recon_gain(Desk& d) {
  desk_run(d);
  const auto& r = d.metrics["recon"];
  const double zf = r["zf"]["tsmi_snr_db"], lr = r["lr"]["tsmi_snr_db"], lrtv = r["lrtv"]["tsmi_snr_db"];
  double sec = 0.0;
  for (const char* k : {"dictionary_s", "subspace_s", "phantom_s", "kspace_s", "recon_zf_s", "recon_lr_s", "recon_lrtv_s"})
    sec += d.timings.value(k, 0.0);
  return {lrtv >= zf + 3.0 && lrtv >= lr + 3.0 && sec < 300.0,
          "TSMI SNR ZF " + fmt(zf) + " dB, LR " + fmt(lr) + " dB, LRTV " + fmt(lrtv) + " dB, " + fmt(sec, 3) + " s"};
}

Verdict encoder_accuracy(Desk& d) {
  const auto& ev = eval_set(d);
  const auto e = score_predictions(encoder_forward(d.enc, ev.inputs), ev.labels);
  const double sec = d.timings.value("training_s", 0.0);
  return {e.t1_mape <= 3.0 && e.t2_mape <= 5.0 && sec < 600.0 && d.dict.grid.size() >= 1500,
          std::to_string(d.dict.grid.size()) + " atoms, " + std::to_string(ev.inputs.cols()) +
              " noisy samples: T1 MAPE " + fmt(e.t1_mape) + " %, T2 MAPE " + fmt(e.t2_mape) +
              " % (bands 3 / 5), training " + fmt(sec, 3) + " s"};
}

std::vector<double> midpoints(const std::vector<double>& axis) {
  std::vector<double> out;
  for (std::size_t i = 0; i + 1 < axis.size(); ++i) out.push_back(std::sqrt(axis[i] * axis[i + 1]));
  return out;
}

Verdict decoder_accuracy(Desk& d) {
  desk_run(d);
  std::vector<NmrParams> held;
  for (double t1 : midpoints(d.dict.t1_axis))
    for (double t2 : midpoints(d.dict.t2_axis)) held.push_back({t1, t2});
  const RMatrix ref = clean_targets(d.cfg.sequence.build(), d.v, held, d.dec.target_phase, d.cfg.sequence.epg_states);
  const double e = decoder_nrmse(decoder_forward(d.dec, grid_matrix(held)), ref);
  return {e <= 0.03, std::to_string(held.size()) + " held-out mid-grid points: NRMSE " + fmt(100 * e) + " %"};
}

Verdict km_ordering(Desk& d) {
  const auto& ev = eval_set(d);
  const auto net = score_predictions(encoder_forward(d.enc, ev.inputs), ev.labels);
  const auto km = score_predictions(km_infer(d.km_enc, ev.inputs), ev.labels);
  return {km.t2_mape > net.t2_mape,
          "T2 MAPE KM " + fmt(km.t2_mape) + " % vs encoder " + fmt(net.t2_mape) + " % (T1 KM " + fmt(km.t1_mape) +
              " %, encoder " + fmt(net.t1_mape) + " %)"};
}

Verdict dm_vs_net(Desk& d) {
  desk_run(d);
  const auto& m = d.metrics["inference"]["net_vs_dm"];
  const double t1 = m["t1_nrmse"], t2 = m["t2_nrmse"];
  return {t1 <= 0.05 && t2 <= 0.05, "net vs DM on LRTV phantom: T1 NRMSE " + fmt(100 * t1) + " %, T2 NRMSE " +
                                        fmt(100 * t2) + " %"};
}

Verdict spline_structure(Desk& d) {
  desk_run(d);
  const RMatrix x = network_inputs(compress(d.v, d.dict.atoms));
  const auto rep = hierarchy_report(d.enc, x);
  bool nondecreasing = true;
  for (std::size_t i = 1; i < rep.level_counts.size(); ++i)
    nondecreasing = nondecreasing && rep.level_counts[i] >= rep.level_counts[i - 1];
  // A[x] x + b[x] against a fresh forward pass, at x and at a nearby point of the same segment
  const RMatrix z = encoder_trace(d.enc, x).z;
  std::mt19937_64 rng(303);
  double worst = 0.0, worst_near = 0.0;
  Index near_checked = 0;
  for (Index c = 0; c < x.cols(); ++c) {
    const RVector xc = x.col(c);
    const auto js = jacobian(d.enc, xc);
    worst = std::max(worst, (js.jacobian * xc + js.offset - z.col(c)).cwiseAbs().maxCoeff());
    const RVector xn = xc + 1e-6 * oracle::random_rmatrix(xc.size(), 1, rng).col(0);
    if (activation_pattern(d.enc, xn) != activation_pattern(d.enc, xc)) continue;
    worst_near = std::max(worst_near, (js.jacobian * xn + js.offset - encoder_trace(d.enc, RMatrix(xn)).z.col(0)).cwiseAbs().maxCoeff());
    ++near_checked;
  }
  std::string counts;
  for (auto n : rep.level_counts) counts += (counts.empty() ? "" : ",") + std::to_string(n);
  const bool in_band = rep.end_count >= 300 && rep.end_count <= 10000;
  return {nondecreasing && worst <= 1e-9 && worst_near <= 1e-9 && in_band,
          "block pattern counts [" + counts + "], affine err " + fmt(worst) + " ms at " + std::to_string(x.cols()) +
              " atoms, " + fmt(worst_near) + " ms at " + std::to_string(near_checked) +
              " same-segment neighbours, end count " + std::to_string(rep.end_count) + " (band 300..10000)"};
}

Verdict determinism(Desk& d) {
  desk_run(d);
  const fs::path again = d.dir.parent_path() / (d.dir.filename().string() + "_rerun");
  fs::remove_all(again);
  run_retrospective(d.cfg, again);
  const bool same = read_bytes(d.dir / "metrics.json") == read_bytes(again / "metrics.json");
  return {same, std::string("metrics.json ") + (same ? "byte-identical" : "differs") + " across two runs with seed " +
                    std::to_string(d.cfg.seed)};
}

// ---- 9: gradients ----------------------------------------------------------

template <class Net>
double gradient_error(Net net, const RMatrix& x, const RMatrix& t) {
  Net grad;
  backward(net, x, t, grad);
  const RVector g = flatten_params(grad);
  const RVector p = flatten_params(net);
  RVector fd(p.size());
  constexpr double h = 1e-6;
  for (Index i = 0; i < p.size(); ++i) {
    Net a = net, b = net, scratch;
    RVector pa = p, pb = p;
    pa[i] += h;
    pb[i] -= h;
    assign_params(a, pa);
    assign_params(b, pb);
    fd[i] = (backward(a, x, t, scratch) - backward(b, x, t, scratch)) / (2 * h);
  }
  return (fd - g).norm() / g.norm();
}

Verdict gradients() {
  double enc_err = 0.0, dec_err = 0.0, jac_err = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed + 400);
    MrfResnet enc = init_encoder(10, 10, 6, (RVector(2) << 1000.0, 100.0).finished(),
                                 (RVector(2) << 1200.0, 150.0).finished(), seed);
    for (auto& b : enc.blocks) {
      b.b1 = oracle::random_rmatrix(10, 1, rng, 0.3).col(0);
      b.b2 = oracle::random_rmatrix(10, 1, rng, 0.3).col(0);
    }
    const RMatrix x = oracle::random_rmatrix(10, 8, rng);
    const RMatrix t = 1000.0 * oracle::random_rmatrix(2, 8, rng).cwiseAbs();
    enc_err = std::max(enc_err, gradient_error(enc, x, t));

    DecoderNet dec = init_decoder(2, 40, 10, (RVector(2) << 1000.0, 100.0).finished(), seed);
    const RMatrix th = 500.0 * oracle::random_rmatrix(2, 8, rng).cwiseAbs();
    dec_err = std::max(dec_err, gradient_error(dec, th, oracle::random_rmatrix(10, 8, rng)));

    const RVector xj = oracle::random_rmatrix(10, 1, rng).col(0);
    for (Index level = 1; level <= enc.depth() + 1; ++level) {
      const Index lv = level > enc.depth() ? kEndLevel : level;
      const auto js = jacobian(enc, xj, lv);
      auto eval = [&](const RVector& q) {
        const auto tr = encoder_trace(enc, RMatrix(q));
        return RVector(lv == kEndLevel ? tr.z.col(0) : tr.h[static_cast<std::size_t>(lv)].col(0));
      };
      RMatrix fd(js.jacobian.rows(), xj.size());
      constexpr double h = 1e-6;
      for (Index i = 0; i < xj.size(); ++i) {
        RVector a = xj, b = xj;
        a[i] += h;
        b[i] -= h;
        fd.col(i) = (eval(a) - eval(b)) / (2 * h);
      }
      jac_err = std::max(jac_err, (fd - js.jacobian).norm() / js.jacobian.norm());
    }
  }
  return {enc_err <= 1e-5 && dec_err <= 1e-5 && jac_err <= 1e-5,
          "max rel err over 5 seeds: encoder " + fmt(enc_err) + ", decoder " + fmt(dec_err) + ", spline Jacobians " +
              fmt(jac_err)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  fs::path work = fs::temp_directory_path() / "qmri_acceptance";
  fs::path config = fs::path(QMRI_SOURCE_DIR) / "configs" / "desk.json";
  std::vector<int> only;
  app.add_option("--work-dir", work, "scratch directory for the retrospective runs");
  app.add_option("--config", config, "experiment config for criteria 4-8, 10, 11")->check(CLI::ExistingFile);
  app.add_option("--only", only, "criterion numbers to run")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  Desk desk;
  try {
    desk.cfg = load_experiment(config);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  desk.dir = work / "desk";
  fs::remove_all(desk.dir);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"operator correctness", operators},
      {"TV prox certificate", tv_certificate},
      {"FISTA behaviour", fista},
      {"retrospective reconstruction gain", [&] { return recon_gain(desk); }},
      {"encoder accuracy", [&] { return encoder_accuracy(desk); }},
      {"decoder accuracy", [&] { return decoder_accuracy(desk); }},
      {"KM ordering", [&] { return km_ordering(desk); }},
      {"DM-vs-net consistency", [&] { return dm_vs_net(desk); }},
      {"gradient checks", gradients},
      {"spline structure", [&] { return spline_structure(desk); }},
      {"determinism", [&] { return determinism(desk); }},
  };
  const std::set<int> wanted(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first << "): " << v.detail
              << " [" << fmt(seconds_since(t0), 3) << " s]\n"
              << std::flush;
  }
  std::cout << (failed ? std::to_string(failed) + " criterion(s) failed" : std::string("all criteria passed")) << "\n";
  return failed ? 1 : 0;
}
