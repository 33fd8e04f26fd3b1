#pragma once

// Experiment configuration, synthetic phantoms, model training helpers and the
// retrospective experiment: maps -> TSMI -> k-space -> reconstruction ->
// inference -> metrics.

#include "qmri/core.hpp"
#include "qmri/epg.hpp"
#include "qmri/forward.hpp"
#include "qmri/inference.hpp"
#include "qmri/io.hpp"
#include "qmri/kernel.hpp"
#include "qmri/neural.hpp"
#include "qmri/recon.hpp"
#include "qmri/subspace.hpp"

#include <chrono>
#include <fstream>
#include <map>
#include <ostream>

namespace qmri {

inline constexpr int kSchemaVersion = 1;

// Stage numbers fed to derive_seed.
enum Stage : unsigned { stage_phantom = 0, stage_pattern = 1, stage_noise = 2, stage_training = 3, stage_km = 4, stage_eval = 5 };

// ---- configuration ---------------------------------------------------------

struct AxisConfig {
  std::string spacing = "log";  // "log" | "linear"
  double min_ms = 0, max_ms = 0, step_ms = 0;
  Index count = 0;

  std::vector<double> build() const {
    if (spacing == "linear") return linear_axis(min_ms, max_ms, step_ms);
    return log_axis(min_ms, max_ms, static_cast<int>(count));
  }
};

struct SequenceConfig {
  Index frames = 200;
  double peak_flip_deg = 70.0;
  double tr_ms = 12.0, te_ms = 2.08, inversion_time_ms = 18.0;
  bool inversion = true;
  int epg_states = 50;
  std::vector<double> flip_deg;  // overrides the ramp when given

  SequenceParams build() const {
    SequenceParams seq = flip_deg.empty() ? ramp_flip_schedule(frames, peak_flip_deg) : SequenceParams{};
    if (!flip_deg.empty()) seq.flip_deg = flip_deg;
    seq.tr_ms = tr_ms;
    seq.te_ms = te_ms;
    seq.inversion = inversion;
    seq.inversion_time_ms = inversion_time_ms;
    seq.validate();
    return seq;
  }
};

struct PhantomRegion {
  double cx_px = 0, cy_px = 0, rx_px = 0, ry_px = 0;
  double t1_ms = 0, t2_ms = 0, pd = 0;
};

struct PhantomConfig {
  bool use_default = true;
  std::vector<PhantomRegion> regions;
  bool snap_to_grid = true;
};

struct SamplingConfig {
  Index height = 64, width = 64;
  double fraction = 0.125;
  SamplingScheme scheme = SamplingScheme::variable_density;
  double density_sigma = 0.3;
  double snr_db = 35.0;  // +inf when the config gives null
};

struct KmSettings {
  Index encoder_features = 1000;
  Index decoder_features = 500;
  double ridge = 1e-6;
  double kernel_scale = 0.0;
  Index max_samples = 0;  // 0 uses every training sample
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  SequenceConfig sequence;
  AxisConfig t1_axis{"log", 100.0, 4000.0, 0.0, 80};
  AxisConfig t2_axis{"log", 20.0, 600.0, 0.0, 60};
  Index rank = 10;
  SamplingConfig sampling;
  LrtvConfig recon;
  std::vector<std::string> recon_methods{"zf", "lr", "lrtv"};
  TrainConfig training;
  KmSettings km;
  Index eval_copies = 10;
  std::vector<std::string> inference_methods{"dm", "net", "km"};
  std::string inference_source = "lrtv";
  PhantomConfig phantom;
};

namespace detail {

inline AxisConfig parse_axis(StrictObject o) {
  AxisConfig a;
  a.spacing = o.get<std::string>("spacing");
  require(a.spacing == "log" || a.spacing == "linear", ErrorCode::config, o.where("spacing") + ": log or linear");
  a.min_ms = o.get<double>("min_ms");
  a.max_ms = o.get<double>("max_ms");
  if (a.spacing == "log")
    a.count = o.get<Index>("count");
  else
    a.step_ms = o.get<double>("step_ms");
  o.finish();
  require(a.min_ms > 0.0 && a.max_ms >= a.min_ms, ErrorCode::config, "axis range must satisfy 0 < min_ms <= max_ms");
  require(a.spacing == "linear" || a.count >= 1, ErrorCode::config, "axis count must be >= 1");
  require(a.spacing == "log" || a.step_ms > 0.0, ErrorCode::config, "axis step_ms must be > 0");
  return a;
}

inline std::vector<std::string> parse_methods(StrictObject& o, const std::string& key,
                                              const std::vector<std::string>& allowed,
                                              std::vector<std::string> fallback) {
  auto m = o.get_or<std::vector<std::string>>(key, std::move(fallback));
  for (const auto& s : m)
    require(std::find(allowed.begin(), allowed.end(), s) != allowed.end(), ErrorCode::config,
            "unknown method '" + s + "' at " + o.where(key));
  return m;
}

inline void config_guard(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::config) throw;
    throw Error(ErrorCode::config, e.what());
  }
}

}  // namespace detail

inline ExperimentConfig parse_experiment(const json& j) {
  ExperimentConfig c;
  detail::config_guard([&] {
    StrictObject root(j, "");
    require(root.get<int>("schema_version") == kSchemaVersion, ErrorCode::config,
            "schema_version must be " + std::to_string(kSchemaVersion));
    c.seed = root.get<std::uint64_t>("seed");

    {
      auto o = root.child("sequence");
      c.sequence.frames = o.get_or<Index>("frames_count", c.sequence.frames);
      c.sequence.peak_flip_deg = o.get_or<double>("peak_flip_deg", c.sequence.peak_flip_deg);
      c.sequence.tr_ms = o.get_or<double>("tr_ms", c.sequence.tr_ms);
      c.sequence.te_ms = o.get_or<double>("te_ms", c.sequence.te_ms);
      c.sequence.inversion = o.get_or<bool>("inversion", c.sequence.inversion);
      c.sequence.inversion_time_ms = o.get_or<double>("inversion_time_ms", c.sequence.inversion_time_ms);
      c.sequence.epg_states = o.get_or<int>("epg_states_count", c.sequence.epg_states);
      c.sequence.flip_deg = o.get_or<std::vector<double>>("flip_deg", {});
      o.finish();
      c.sequence.build();
    }
    {
      auto o = root.child("grid");
      const auto preset = o.get_or<std::string>("preset", "custom");
      if (preset == "full") {
        c.t1_axis = {"linear", 100.0, 4000.0, 10.0, 0};
        c.t2_axis = {"linear", 20.0, 600.0, 2.0, 0};
      } else {
        require(preset == "custom", ErrorCode::config, "grid.preset must be custom or full");
        c.t1_axis = detail::parse_axis(o.child("t1"));
        c.t2_axis = detail::parse_axis(o.child("t2"));
      }
      o.finish();
    }
    {
      auto o = root.child("subspace");
      c.rank = o.get<Index>("rank_count");
      o.finish();
      require(c.rank >= 1, ErrorCode::config, "subspace.rank_count must be >= 1");
    }
    {
      auto o = root.child("sampling");
      c.sampling.height = o.get<Index>("height_px");
      c.sampling.width = o.get<Index>("width_px");
      c.sampling.fraction = o.get<double>("fraction_ratio");
      c.sampling.scheme = parse_scheme(o.get_or<std::string>("scheme", "variable-density"));
      c.sampling.density_sigma = o.get_or<double>("density_sigma_ratio", c.sampling.density_sigma);
      const json& snr = o.raw("snr_db");
      if (snr.is_null()) {
        c.sampling.snr_db = INFINITY;
      } else {
        c.sampling.snr_db = o.get<double>("snr_db");
      }
      o.finish();
      require(c.sampling.height >= 1 && c.sampling.width >= 1, ErrorCode::config, "image size must be >= 1");
      require(c.sampling.fraction > 0.0 && c.sampling.fraction <= 1.0, ErrorCode::config,
              "sampling.fraction_ratio must lie in (0, 1]");
      require(c.sampling.density_sigma > 0.0, ErrorCode::config, "sampling.density_sigma_ratio must be > 0");
    }
    {
      auto o = root.child("recon");
      const json& lam = o.raw("lambda_au");
      if (lam.is_array()) {
        c.recon.lambda = o.get<std::vector<double>>("lambda_au");
      } else {
        c.recon.lambda = {o.get<double>("lambda_au")};
      }
      c.recon.max_iters = o.get_or<int>("max_iters_count", c.recon.max_iters);
      c.recon.tol = o.get_or<double>("tol_ratio", c.recon.tol);
      c.recon.mu_init = o.get_or<double>("mu_init_au", c.recon.mu_init);
      c.recon.inner_iters = o.get_or<int>("inner_iters_count", c.recon.inner_iters);
      c.recon.inner_gap_tol = o.get_or<double>("inner_gap_tol_ratio", c.recon.inner_gap_tol);
      c.recon.warm_start = o.get_or<bool>("warm_start", c.recon.warm_start);
      c.recon.max_backtracks = o.get_or<int>("max_backtracks_count", c.recon.max_backtracks);
      c.recon_methods = detail::parse_methods(o, "methods", {"zf", "lr", "lrtv"}, c.recon_methods);
      o.finish();
      c.recon.validate();
      require(c.recon.lambda.size() == 1 || static_cast<Index>(c.recon.lambda.size()) == c.rank, ErrorCode::config,
              "recon.lambda_au must be a number or a list of length rank_count");
    }
    {
      auto o = root.child("training");
      auto& t = c.training;
      t.epochs = o.get_or<int>("epochs_count", t.epochs);
      t.decoder_epochs = o.get_or<int>("decoder_epochs_count", t.decoder_epochs);
      t.lr_init = o.get_or<double>("lr_init_au", t.lr_init);
      t.lr_decay_encoder = o.get_or<double>("lr_decay_encoder_ratio", t.lr_decay_encoder);
      t.lr_decay_decoder = o.get_or<double>("lr_decay_decoder_ratio", t.lr_decay_decoder);
      t.batch_encoder = o.get_or<Index>("batch_encoder_count", t.batch_encoder);
      t.batch_decoder = o.get_or<Index>("batch_decoder_count", t.batch_decoder);
      require(!(o.has("noise_sigma_au") && o.has("noise_variance_au")), ErrorCode::config,
              "give either training.noise_sigma_au or training.noise_variance_au");
      if (o.has("noise_variance_au")) {
        const double var = o.get<double>("noise_variance_au");
        require(var >= 0.0, ErrorCode::config, "training.noise_variance_au must be >= 0");
        t.noise_sigma = std::sqrt(var);
      } else {
        t.noise_sigma = o.get_or<double>("noise_sigma_au", t.noise_sigma);
      }
      t.augmentations_per_atom = o.get_or<Index>("augmentations_count", t.augmentations_per_atom);
      t.width = o.get_or<Index>("width_count", t.width);
      t.blocks = o.get_or<Index>("blocks_count", t.blocks);
      t.decoder_hidden = o.get_or<Index>("decoder_hidden_count", t.decoder_hidden);
      t.target_scale_ms = o.get_or<std::vector<double>>("target_scale_ms", t.target_scale_ms);
      t.decoder_input_scale_ms = o.get_or<std::vector<double>>("decoder_input_scale_ms", t.decoder_input_scale_ms);
      c.km.encoder_features = o.get_or<Index>("km_encoder_features_count", c.km.encoder_features);
      c.km.decoder_features = o.get_or<Index>("km_decoder_features_count", c.km.decoder_features);
      c.km.ridge = o.get_or<double>("km_ridge_ratio", c.km.ridge);
      c.km.kernel_scale = o.get_or<double>("km_kernel_scale_au", c.km.kernel_scale);
      c.km.max_samples = o.get_or<Index>("km_max_samples_count", c.km.max_samples);
      c.eval_copies = o.get_or<Index>("eval_copies_count", c.eval_copies);
      o.finish();
      t.seed = derive_seed(c.seed, stage_training);
      t.validate();
      require(c.km.encoder_features >= 1 && c.km.decoder_features >= 1, ErrorCode::config,
              "KM feature counts must be >= 1");
      require(c.km.ridge > 0.0, ErrorCode::config, "training.km_ridge_ratio must be > 0");
      require(c.eval_copies >= 1, ErrorCode::config, "training.eval_copies_count must be >= 1");
    }
    {
      auto o = root.child("inference");
      c.inference_methods = detail::parse_methods(o, "methods", {"dm", "net", "km"}, c.inference_methods);
      c.inference_source = o.get_or<std::string>("source", c.inference_source);
      o.finish();
      require(std::find(c.recon_methods.begin(), c.recon_methods.end(), c.inference_source) != c.recon_methods.end(),
              ErrorCode::config, "inference.source must be one of the recon methods");
    }
    if (auto po = root.child_opt("phantom")) {
      auto& p = c.phantom;
      p.snap_to_grid = po->get_or<bool>("snap_to_grid", p.snap_to_grid);
      if (po->has("regions")) {
        p.use_default = false;
        const json& regs = po->raw("regions");
        require(regs.is_array(), ErrorCode::config, "phantom.regions must be an array");
        for (std::size_t i = 0; i < regs.size(); ++i) {
          StrictObject r(regs[i], "phantom.regions[" + std::to_string(i) + "]");
          PhantomRegion g;
          g.cx_px = r.get<double>("cx_px");
          g.cy_px = r.get<double>("cy_px");
          g.rx_px = r.get<double>("rx_px");
          g.ry_px = r.get<double>("ry_px");
          g.t1_ms = r.get<double>("t1_ms");
          g.t2_ms = r.get<double>("t2_ms");
          g.pd = r.get<double>("pd_au");
          r.finish();
          p.regions.push_back(g);
        }
      }
      po->finish();
    }
    root.finish();
  });
  return c;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
  try {
    return parse_experiment(read_json(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

// ---- phantom ---------------------------------------------------------------

// Twelve tubes on a 3 x 4 lattice, T1 in [200, 2000] ms and T2 in [50, 400] ms.
inline std::vector<PhantomRegion> default_phantom(Index h, Index w) {
  static constexpr double t1[12] = {200, 300, 450, 600, 750, 900, 1050, 1200, 1400, 1600, 1800, 2000};
  static constexpr double t2[12] = {50, 400, 80, 300, 120, 60, 220, 150, 100, 350, 180, 250};
  static constexpr double pd[12] = {1.0, 0.9, 0.8, 1.0, 0.7, 0.85, 0.95, 0.75, 1.0, 0.8, 0.9, 0.7};
  std::vector<PhantomRegion> out;
  const double r = 0.09 * static_cast<double>(std::min(h, w));
  for (int i = 0; i < 12; ++i) {
    const int row = i / 4, col = i % 4;
    PhantomRegion g;
    g.cx_px = (static_cast<double>(col) + 0.5) * static_cast<double>(w) / 4.0 - 0.5;
    g.cy_px = (static_cast<double>(row) + 0.5) * static_cast<double>(h) / 3.0 - 0.5;
    g.rx_px = r;
    g.ry_px = r;
    g.t1_ms = t1[i];
    g.t2_ms = t2[i];
    g.pd = pd[i];
    out.push_back(g);
  }
  return out;
}

// Rasterises ellipses in order (later regions overwrite earlier ones).
inline QuantMaps make_phantom(const std::vector<PhantomRegion>& regions, Index h, Index w) {
  require(h >= 1 && w >= 1, ErrorCode::invalid_argument, "phantom grid must be at least 1x1");
  QuantMaps m = QuantMaps::zeros(h, w);
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& g = regions[i];
    const std::string tag = "phantom region " + std::to_string(i);
    require(g.rx_px > 0.0 && g.ry_px > 0.0, ErrorCode::invalid_argument, tag + ": radii must be > 0");
    // regions may extend past the border and are clipped, but must be centred on the grid
    require(g.cx_px >= -0.5 && g.cx_px <= static_cast<double>(w) - 0.5 && g.cy_px >= -0.5 &&
                g.cy_px <= static_cast<double>(h) - 0.5,
            ErrorCode::invalid_argument, tag + " lies outside the grid");
    require(g.t1_ms > 0.0 && g.t2_ms > 0.0 && g.pd >= 0.0, ErrorCode::invalid_argument,
            tag + ": need T1, T2 > 0 and PD >= 0");
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const double dx = (static_cast<double>(x) - g.cx_px) / g.rx_px;
        const double dy = (static_cast<double>(y) - g.cy_px) / g.ry_px;
        if (dx * dx + dy * dy > 1.0) continue;
        const Index v = y * w + x;
        m.t1_ms[v] = g.t1_ms;
        m.t2_ms[v] = g.t2_ms;
        m.pd[v] = g.pd;
      }
  }
  m.mask.resize(static_cast<std::size_t>(h * w));
  for (Index v = 0; v < h * w; ++v) m.mask[static_cast<std::size_t>(v)] = m.pd[v] > 0.0;
  return m;
}

inline double nearest_on_axis(const std::vector<double>& axis, double v) {
  require(!axis.empty(), ErrorCode::invalid_argument, "empty axis");
  double best = axis.front();
  for (double a : axis)
    if (std::abs(std::log(a / v)) < std::abs(std::log(best / v))) best = a;
  return best;
}

inline std::vector<PhantomRegion> snap_regions(std::vector<PhantomRegion> regions, const Dictionary& dict) {
  for (auto& g : regions) {
    g.t1_ms = nearest_on_axis(dict.t1_axis, g.t1_ms);
    g.t2_ms = nearest_on_axis(dict.t2_axis, g.t2_ms);
  }
  return regions;
}

// X_v = pd_v V^H B(theta_v) / ||B(theta_v)||, fingerprints cached per (T1, T2).
inline Tsmi maps_to_tsmi(const QuantMaps& maps, const SequenceParams& seq, const SubspaceModel& v, int states = 50) {
  Tsmi x = Tsmi::zeros(v.rank(), maps.height, maps.width);
  std::map<std::pair<double, double>, CVector> cache;
  for (Index i = 0; i < maps.voxels(); ++i) {
    if (maps.pd[i] == 0.0) continue;
    const NmrParams theta{maps.t1_ms[i], maps.t2_ms[i]};
    validate(theta);
    auto key = std::make_pair(theta.t1_ms, theta.t2_ms);
    auto it = cache.find(key);
    if (it == cache.end()) {
      CVector sig = simulate_fingerprint(seq, theta, states).signal;
      const double n = sig.norm();
      require(n > 0.0, ErrorCode::numerical, "zero fingerprint");
      it = cache.emplace(key, CVector(compress(v, CMatrix(sig / n)).col(0))).first;
    }
    x.coeffs.col(i) = maps.pd[i] * it->second;
  }
  return x;
}

// 16-bit binary PGM, linear window [0, max] per map.
inline void write_pgm16(const std::filesystem::path& path, const RVector& img, Index h, Index w) {
  const double hi = img.size() ? img.maxCoeff() : 0.0;
  std::string buf = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
  for (Index i = 0; i < h * w; ++i) {
    const double v = hi > 0.0 ? std::clamp(img[i] / hi, 0.0, 1.0) : 0.0;
    const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    buf.push_back(static_cast<char>(q >> 8));
    buf.push_back(static_cast<char>(q & 0xff));
  }
  write_bytes(path, buf);
}

inline void export_maps(const std::filesystem::path& dir, const QuantMaps& m) {
  save_maps(dir, m);
  write_pgm16(dir / "t1.pgm", m.t1_ms, m.height, m.width);
  write_pgm16(dir / "t2.pgm", m.t2_ms, m.height, m.width);
  write_pgm16(dir / "pd.pgm", m.pd, m.height, m.width);
}

// ---- models ----------------------------------------------------------------

struct TrainedModels {
  MrfResnet encoder;
  DecoderNet decoder;
  KernelMachine km_encoder, km_decoder;
  bool has_net = false, has_km = false;
  std::vector<double> encoder_mse, decoder_mse;
  double label_mismatch = 0.0;
};

inline TrainedModels train_models(const Dictionary& dict, const SubspaceModel& v, const TrainConfig& cfg,
                                  const KmSettings& kms, bool want_net, bool want_km, std::uint64_t km_seed,
                                  std::ostream* log = nullptr) {
  TrainedModels m;
  const auto ts = make_training_set(dict, v, cfg);
  m.label_mismatch = ts.encoder.mismatch_fraction();
  if (log) *log << "training set: " << ts.encoder.inputs.cols() << " noisy samples, label mismatch "
                << m.label_mismatch << "\n";
  const RVector tscale = to_rvector(cfg.target_scale_ms);
  const RVector dscale = to_rvector(cfg.decoder_input_scale_ms);
  if (want_net) {
    const RVector mean = ts.encoder.labels.rowwise().mean();
    m.encoder = init_encoder(v.rank(), cfg.width, cfg.blocks, tscale, mean, derive_seed(cfg.seed, 11));
    m.encoder_mse = train(m.encoder, ts.encoder.inputs, ts.encoder.labels, cfg).epoch_mse;
    m.decoder = init_decoder(2, cfg.decoder_hidden, v.rank(), dscale, derive_seed(cfg.seed, 12));
    m.decoder.target_phase = ts.decoder_phase;
    m.decoder_mse = train(m.decoder, ts.decoder_inputs, ts.decoder_targets, cfg).epoch_mse;
    m.has_net = true;
    if (log) *log << "encoder final mse " << m.encoder_mse.back() << ", decoder final mse " << m.decoder_mse.back() << "\n";
  }
  if (want_km) {
    RMatrix xin = ts.encoder.inputs, lab = ts.encoder.labels;
    if (kms.max_samples > 0 && kms.max_samples < xin.cols()) {
      // evenly strided subset keeps every atom represented
      const Index n = kms.max_samples, total = xin.cols();
      RMatrix xs(xin.rows(), n), ls(lab.rows(), n);
      for (Index i = 0; i < n; ++i) {
        const Index c = i * total / n;
        xs.col(i) = xin.col(c);
        ls.col(i) = lab.col(c);
      }
      xin = std::move(xs);
      lab = std::move(ls);
    }
    KmConfig ke{kms.encoder_features, kms.kernel_scale, kms.ridge, derive_seed(km_seed, 1)};
    m.km_encoder = km_fit(xin, lab, ke);
    KmConfig kd{kms.decoder_features, kms.kernel_scale, kms.ridge, derive_seed(km_seed, 2)};
    m.km_decoder = km_fit(dscale.cwiseInverse().asDiagonal() * ts.decoder_inputs, ts.decoder_targets, kd);
    m.has_km = true;
  }
  return m;
}

inline QuantMaps km_infer_maps(const KernelMachine& enc, const KernelMachine& dec, const RVector& dec_scale,
                               const Tsmi& x) {
  RVector norms;
  const RMatrix in = network_inputs(x.coeffs, &norms);
  const auto al = phase_align(x.coeffs);
  const RMatrix theta = km_infer(enc, in);
  const RMatrix g = align_real(km_infer(dec, dec_scale.cwiseInverse().asDiagonal() * theta.cwiseMax(1e-3)));
  QuantMaps out = QuantMaps::zeros(x.height, x.width);
  for (Index v = 0; v < x.voxels(); ++v) {
    out.t1_ms[v] = theta(0, v);
    out.t2_ms[v] = theta(1, v);
    const double gg = g.col(v).squaredNorm();
    if (norms[v] == 0.0 || gg == 0.0) continue;
    const cdouble ip = g.col(v).cast<cdouble>().dot(al.signals.col(v));
    out.pd[v] = ip.real() / gg;
    out.pd_imag[v] = ip.imag() / gg;
  }
  return out;
}

struct EncoderEval {
  double t1_mape = 0, t2_mape = 0, t1_mae_ms = 0, t2_mae_ms = 0;

  json to_json() const {
    return json{{"t1_mape_pct", t1_mape}, {"t2_mape_pct", t2_mape}, {"t1_mae_ms", t1_mae_ms}, {"t2_mae_ms", t2_mae_ms}};
  }
};

inline EncoderEval score_predictions(const RMatrix& pred, const RMatrix& labels) {
  std::vector<Index> all(static_cast<std::size_t>(labels.cols()));
  std::iota(all.begin(), all.end(), Index{0});
  EncoderEval e;
  const RVector p1 = pred.row(0).transpose(), p2 = pred.row(1).transpose();
  const RVector l1 = labels.row(0).transpose(), l2 = labels.row(1).transpose();
  e.t1_mape = metrics::mape(p1, l1, all);
  e.t2_mape = metrics::mape(p2, l2, all);
  e.t1_mae_ms = metrics::mae(p1, l1, all);
  e.t2_mae_ms = metrics::mae(p2, l2, all);
  return e;
}

// Fresh noisy copies of every atom, labelled by DM.
inline NoisySet make_eval_set(const Dictionary& dict, const SubspaceModel& v, Index copies, double sigma,
                              std::uint64_t seed) {
  return make_noisy_set(compress(v, dict.atoms), compress_dictionary(dict, v), copies, sigma, seed);
}

// Mean over samples of ||G(theta) - V^H B(theta)|| / ||V^H B(theta)|| for fresh theta.
inline double decoder_nrmse(const RMatrix& predicted, const RMatrix& reference) {
  double s = 0.0;
  for (Index c = 0; c < reference.cols(); ++c) s += (predicted.col(c) - reference.col(c)).norm() / reference.col(c).norm();
  return s / static_cast<double>(reference.cols());
}

inline RMatrix clean_targets(const SequenceParams& seq, const SubspaceModel& v, const std::vector<NmrParams>& thetas,
                             double phase, int states = 50) {
  CMatrix sig(seq.frames(), static_cast<Index>(thetas.size()));
  parallel_for(sig.cols(), [&](Index b, Index e) {
    for (Index j = b; j < e; ++j) {
      CVector s = simulate_fingerprint(seq, thetas[static_cast<std::size_t>(j)], states).signal;
      sig.col(j) = s / s.norm();
    }
  });
  return decoder_targets(v, sig, phase);
}

// ---- retrospective experiment ----------------------------------------------

struct RetroResult {
  json metrics;
  std::map<std::string, double> tsmi_snr_db;
  std::map<std::string, QuantMaps> maps;
  QuantMaps truth;
};

namespace detail {

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), "stage " + name + ": " + e.what());
  }
}

inline bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace detail

inline json report_json(const ReconReport& rep) {
  return json{{"objective_per_iter", rep.objective_per_iter},
              {"step_sizes", rep.step_sizes},
              {"iterations_run", rep.iterations_run},
              {"converged", rep.converged},
              {"restart_count", rep.restarts},
              {"rejected_count", rep.rejected_steps},
              {"backtrack_count", rep.backtracks}};
}

inline Dictionary build_experiment_dictionary(const ExperimentConfig& cfg) {
  return build_dictionary(cfg.sequence.build(), cfg.t1_axis.build(), cfg.t2_axis.build(), cfg.sequence.epg_states);
}

// Writes every intermediate under out_dir; metrics.json holds no timings so that
// reruns with the same seed are byte-identical.
inline RetroResult run_retrospective(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                     std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  RetroResult res;
  json timings = json::object();
  auto timed = [&](const std::string& name, auto&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    detail::stage(name, f);
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timings[name + "_s"] = sec;
    if (log) *log << "[" << name << "] " << sec << " s\n";
  };

  const SequenceParams seq = cfg.sequence.build();
  Dictionary dict;
  SubspaceModel v;
  timed("dictionary", [&] {
    dict = build_experiment_dictionary(cfg);
    save_dictionary(out_dir / "dict.tnsr", out_dir / "grid.json", dict);
  });
  timed("subspace", [&] {
    v = fit_subspace(dict, cfg.rank);
    save_subspace(out_dir / "V.tnsr", out_dir / "V.json", v);
  });

  Tsmi x_true;
  timed("phantom", [&] {
    auto regions = cfg.phantom.use_default ? default_phantom(cfg.sampling.height, cfg.sampling.width)
                                           : cfg.phantom.regions;
    if (cfg.phantom.snap_to_grid) regions = snap_regions(regions, dict);
    res.truth = make_phantom(regions, cfg.sampling.height, cfg.sampling.width);
    export_maps(out_dir / "gt", res.truth);
    x_true = maps_to_tsmi(res.truth, seq, v, cfg.sequence.epg_states);
    write_tensor(out_dir / "x_true.tnsr", tsmi_tensor(x_true));
  });

  KspaceData data;
  timed("kspace", [&] {
    const auto pattern = make_pattern(cfg.sampling.height, cfg.sampling.width, seq.frames(), cfg.sampling.fraction,
                                      cfg.sampling.scheme, derive_seed(cfg.seed, stage_pattern),
                                      cfg.sampling.density_sigma);
    save_pattern(out_dir / "pattern.json", pattern);
    data = add_noise(apply_forward(v, x_true, pattern), cfg.sampling.snr_db, derive_seed(cfg.seed, stage_noise));
    write_tensor(out_dir / "y.tnsr", tensor_from(data.samples));
  });

  json recon_json = json::object();
  std::map<std::string, Tsmi> recons;
  for (const auto& method : cfg.recon_methods) {
    timed("recon_" + method, [&] {
      json rj = json::object();
      Tsmi x;
      if (method == "zf") {
        x = zero_fill(v, data);
      } else {
        LrtvConfig rc = cfg.recon;
        if (method == "lr") rc.lambda = {0.0};
        auto [sol, rep] = lrtv(v, data, rc);
        x = std::move(sol);
        rj["iterations_count"] = rep.iterations_run;
        rj["converged"] = rep.converged;
        rj["final_objective_au"] = rep.objective_per_iter.back();
        rj["nonmonotone_count"] = rep.nonmonotone_steps;
        rj["restart_count"] = rep.restarts;
        rj["rejected_count"] = rep.rejected_steps;
        rj["backtrack_count"] = rep.backtracks;
        write_json(out_dir / ("report_" + method + ".json"), report_json(rep));
      }
      const double snr = tsmi_snr_db(x_true, x);
      res.tsmi_snr_db[method] = snr;
      rj["tsmi_snr_db"] = snr;
      recon_json[method] = rj;
      write_tensor(out_dir / ("x_" + method + ".tnsr"), tsmi_tensor(x));
      recons.emplace(method, std::move(x));
    });
  }

  json inf_json = json::object();
  json train_json = json::object();
  if (!cfg.inference_methods.empty()) {
    const Tsmi& src = recons.at(cfg.inference_source);
    const bool want_net = detail::contains(cfg.inference_methods, "net");
    const bool want_km = detail::contains(cfg.inference_methods, "km");
    TrainedModels models;
    if (want_net || want_km) {
      timed("training", [&] {
        models = train_models(dict, v, cfg.training, cfg.km, want_net, want_km, derive_seed(cfg.seed, stage_km), log);
        train_json["label_mismatch_ratio"] = models.label_mismatch;
        if (models.has_net) {
          train_json["encoder_epoch_mse_au"] = models.encoder_mse;
          train_json["decoder_epoch_mse_au"] = models.decoder_mse;
          save_encoder(out_dir / "encoder.json", models.encoder);
          save_decoder(out_dir / "decoder.json", models.decoder);
        }
        if (models.has_km) {
          save_km(out_dir / "km_encoder.json", models.km_encoder);
          save_km(out_dir / "km_decoder.json", models.km_decoder);
        }
      });
    }
    for (const auto& method : cfg.inference_methods) {
      timed("infer_" + method, [&] {
        QuantMaps m;
        if (method == "dm") {
          m = dict_match(compress_dictionary(dict, v), src);
        } else if (method == "net") {
          m = net_infer(models.encoder, models.decoder, src);
        } else {
          m = km_infer_maps(models.km_encoder, models.km_decoder, to_rvector(cfg.training.decoder_input_scale_ms), src);
        }
        m.mask = res.truth.mask;
        export_maps(out_dir / ("maps_" + method), m);
        inf_json[method] = map_metrics(m, res.truth).to_json();
        res.maps.emplace(method, std::move(m));
      });
    }
    if (res.maps.count("dm"))
      for (const auto& method : {"net", "km"})
        if (res.maps.count(method)) {
          QuantMaps ref = res.maps.at("dm");
          ref.mask = res.truth.mask;
          inf_json[std::string(method) + "_vs_dm"] = map_metrics(res.maps.at(method), ref).to_json();
        }
  }

  res.metrics = json{{"schema_version", kSchemaVersion},
                     {"seed", cfg.seed},
                     {"inference_source", cfg.inference_source},
                     {"recon", recon_json},
                     {"inference", inf_json},
                     {"training", train_json},
                     {"undersampling_ratio", data.pattern.undersampling}};
  write_json(out_dir / "metrics.json", res.metrics);
  write_json(out_dir / "timings.json", timings);
  return res;
}

}  // namespace qmri
