#pragma once

// Gradient-spoiled Extended Phase Graph simulation of an inversion-prepared,
// variable flip angle sequence, and fingerprint dictionaries over T1/T2 grids.

#include "qmri/core.hpp"
#include "qmri/io.hpp"

#include <cmath>
#include <numbers>

namespace qmri {

struct SequenceParams {
  std::vector<double> flip_deg;
  double tr_ms = 12.0;
  double te_ms = 0.0;
  bool inversion = false;
  double inversion_time_ms = 0.0;

  Index frames() const { return static_cast<Index>(flip_deg.size()); }

  void validate() const {
    require(!flip_deg.empty(), ErrorCode::invalid_argument, "sequence needs at least one repetition");
    for (double a : flip_deg)
      require(a >= 0.0 && a <= 180.0, ErrorCode::invalid_argument, "flip angle outside [0, 180] deg");
    require(te_ms >= 0.0 && tr_ms > te_ms, ErrorCode::invalid_argument, "need tr_ms > te_ms >= 0");
    require(inversion_time_ms >= 0.0, ErrorCode::invalid_argument, "negative inversion time");
  }
};

struct NmrParams {
  double t1_ms = 0.0;
  double t2_ms = 0.0;

  bool operator==(const NmrParams&) const = default;
};

struct Fingerprint {
  CVector signal;
  double norm_factor = 1.0;
};

struct Dictionary {
  CMatrix atoms;  // T x d, unit-norm columns
  std::vector<NmrParams> grid;
  std::vector<double> t1_axis;
  std::vector<double> t2_axis;
  RVector norms;  // Euclidean norm removed from each simulated column

  Index size() const { return atoms.cols(); }
  Index frames() const { return atoms.rows(); }

  // Column index of (t1_axis[i1], t2_axis[i2]); T2 runs fastest.
  Index column(std::size_t i1, std::size_t i2) const {
    return static_cast<Index>(i1 * t2_axis.size() + i2);
  }
};

// Inversion-prepared schedule: 1 -> 70 deg ramp, back down to 1 deg, then flat.
// Built on the 880-repetition layout with breakpoints at 400 and 600, scaled
// to other lengths by ceil(400 T / 880) and ceil(600 T / 880).
inline SequenceParams ramp_flip_schedule(Index frames, double peak_deg = 70.0) {
  require(frames >= 3, ErrorCode::invalid_argument, "flip schedule needs T >= 3");
  const auto up = static_cast<Index>(std::ceil(400.0 * static_cast<double>(frames) / 880.0));
  const auto down = static_cast<Index>(std::ceil(600.0 * static_cast<double>(frames) / 880.0));
  SequenceParams seq;
  seq.flip_deg.assign(static_cast<std::size_t>(frames), 1.0);
  const double span = peak_deg - 1.0;
  for (Index i = 0; i < up; ++i)
    seq.flip_deg[i] = up > 1 ? 1.0 + span * static_cast<double>(i) / static_cast<double>(up - 1) : peak_deg;
  for (Index i = up; i < down; ++i)
    seq.flip_deg[i] = peak_deg - span * static_cast<double>(i - up + 1) / static_cast<double>(down - up);
  seq.tr_ms = 12.0;
  seq.te_ms = 2.08;
  seq.inversion = true;
  seq.inversion_time_ms = 18.0;
  return seq;
}

inline void validate(const NmrParams& p) {
  require(p.t1_ms > 0.0 && p.t2_ms > 0.0 && std::isfinite(p.t1_ms) && std::isfinite(p.t2_ms),
          ErrorCode::invalid_argument, "T1 and T2 must be positive");
}

// Echo signal F0+ at TE for every repetition. Not normalised.
inline Fingerprint simulate_fingerprint(const SequenceParams& seq, const NmrParams& theta, int states = 50) {
  seq.validate();
  validate(theta);
  require(states >= 2, ErrorCode::invalid_argument, "EPG needs at least 2 configuration orders");
  const std::size_t K = static_cast<std::size_t>(states);
  std::vector<cdouble> fp(K), fm(K), z(K);
  z[0] = 1.0;

  auto relax = [&](double dt) {
    const double e1 = std::exp(-dt / theta.t1_ms);
    const double e2 = std::exp(-dt / theta.t2_ms);
    for (std::size_t k = 0; k < K; ++k) {
      fp[k] *= e2;
      fm[k] *= e2;
      z[k] *= e1;
    }
    z[0] += 1.0 - e1;
  };

  if (seq.inversion) {
    z[0] = -z[0];
    relax(seq.inversion_time_ms);
  }

  const cdouble I(0.0, 1.0);
  Fingerprint out;
  out.signal.resize(seq.frames());
  for (Index t = 0; t < seq.frames(); ++t) {
    const double a = seq.flip_deg[static_cast<std::size_t>(t)] * std::numbers::pi / 180.0;
    const double c2 = std::cos(a / 2) * std::cos(a / 2);
    const double s2 = std::sin(a / 2) * std::sin(a / 2);
    const double sa = std::sin(a);
    const double ca = std::cos(a);
    for (std::size_t k = 0; k < K; ++k) {
      const cdouble p = fp[k], m = fm[k], l = z[k];
      fp[k] = c2 * p + s2 * m - I * sa * l;
      fm[k] = s2 * p + c2 * m + I * sa * l;
      z[k] = -0.5 * I * sa * p + 0.5 * I * sa * m + ca * l;
    }
    relax(seq.te_ms);
    out.signal[t] = fp[0];
    relax(seq.tr_ms - seq.te_ms);
    // spoiler: one dephasing order per repetition, highest order dropped
    for (std::size_t k = K - 1; k >= 1; --k) fp[k] = fp[k - 1];
    for (std::size_t k = 0; k + 1 < K; ++k) fm[k] = fm[k + 1];
    fm[K - 1] = 0.0;
    fp[0] = std::conj(fm[0]);
  }
  out.norm_factor = 1.0;
  return out;
}

inline void check_axis(const std::vector<double>& axis, const char* name) {
  require(!axis.empty(), ErrorCode::invalid_argument, std::string(name) + " axis is empty");
  for (std::size_t i = 0; i < axis.size(); ++i) {
    require(axis[i] > 0.0, ErrorCode::invalid_argument, std::string(name) + " axis must be positive");
    if (i > 0)
      require(axis[i] > axis[i - 1], ErrorCode::invalid_argument,
              std::string(name) + " axis must be strictly increasing");
  }
}

inline std::vector<double> linear_axis(double first, double last, double step) {
  require(step > 0.0 && last >= first, ErrorCode::invalid_argument, "bad linear axis");
  std::vector<double> out;
  const auto n = static_cast<long>(std::floor((last - first) / step + 1e-9)) + 1;
  for (long i = 0; i < n; ++i) out.push_back(first + step * static_cast<double>(i));
  return out;
}

inline std::vector<double> log_axis(double first, double last, int count) {
  require(count >= 1 && first > 0.0 && last >= first, ErrorCode::invalid_argument, "bad log axis");
  if (count == 1) return {first};
  std::vector<double> out;
  const double r = std::log(last / first) / (count - 1);
  for (int i = 0; i < count; ++i) out.push_back(first * std::exp(r * i));
  out.back() = last;
  return out;
}

inline Dictionary build_dictionary(const SequenceParams& seq, const std::vector<double>& t1_axis,
                                   const std::vector<double>& t2_axis, int states = 50) {
  check_axis(t1_axis, "T1");
  check_axis(t2_axis, "T2");
  seq.validate();
  Dictionary dict;
  dict.t1_axis = t1_axis;
  dict.t2_axis = t2_axis;
  for (double t1 : t1_axis)
    for (double t2 : t2_axis) dict.grid.push_back({t1, t2});
  const auto d = static_cast<Index>(dict.grid.size());
  dict.atoms.resize(seq.frames(), d);
  dict.norms.resize(d);
  parallel_for(d, [&](Index b, Index e) {
    for (Index j = b; j < e; ++j) {
      auto fp = simulate_fingerprint(seq, dict.grid[static_cast<std::size_t>(j)], states);
      const double nrm = fp.signal.norm();
      dict.norms[j] = nrm;
      dict.atoms.col(j) = nrm > 0.0 ? CVector(fp.signal / nrm) : fp.signal;
    }
  });
  return dict;
}

inline json to_json(const SequenceParams& seq) {
  return json{{"flip_deg", seq.flip_deg},
              {"tr_ms", seq.tr_ms},
              {"te_ms", seq.te_ms},
              {"inversion", seq.inversion},
              {"inversion_time_ms", seq.inversion_time_ms}};
}

inline SequenceParams sequence_from_json(const json& j) {
  StrictObject o(j, "sequence");
  SequenceParams seq;
  seq.flip_deg = o.get<std::vector<double>>("flip_deg");
  seq.tr_ms = o.get<double>("tr_ms");
  seq.te_ms = o.get<double>("te_ms");
  seq.inversion = o.get<bool>("inversion");
  seq.inversion_time_ms = o.get<double>("inversion_time_ms");
  o.finish();
  seq.validate();
  return seq;
}

// Grid sidecar written next to a dictionary tensor.
inline json grid_to_json(const Dictionary& dict) {
  std::vector<double> norms(dict.norms.data(), dict.norms.data() + dict.norms.size());
  return json{{"t1_axis_ms", dict.t1_axis}, {"t2_axis_ms", dict.t2_axis}, {"order", "t2-fastest"},
              {"norms", norms}};
}

inline void grid_from_json(const json& j, Dictionary& dict) {
  StrictObject o(j, "grid");
  dict.t1_axis = o.get<std::vector<double>>("t1_axis_ms");
  dict.t2_axis = o.get<std::vector<double>>("t2_axis_ms");
  require(o.get<std::string>("order") == "t2-fastest", ErrorCode::config, "grid.order must be t2-fastest");
  const auto norms = o.get<std::vector<double>>("norms");
  o.finish();
  check_axis(dict.t1_axis, "T1");
  check_axis(dict.t2_axis, "T2");
  dict.grid.clear();
  for (double t1 : dict.t1_axis)
    for (double t2 : dict.t2_axis) dict.grid.push_back({t1, t2});
  require(norms.size() == dict.grid.size(), ErrorCode::config, "grid.norms length mismatch");
  dict.norms = Eigen::Map<const RVector>(norms.data(), static_cast<Index>(norms.size()));
}

inline void save_dictionary(const std::filesystem::path& tensor_path, const std::filesystem::path& grid_path,
                            const Dictionary& dict) {
  write_tensor(tensor_path, tensor_from(dict.atoms));
  write_json(grid_path, grid_to_json(dict));
}

inline Dictionary load_dictionary(const std::filesystem::path& tensor_path, const std::filesystem::path& grid_path) {
  Dictionary dict;
  dict.atoms = to_cmatrix(read_tensor(tensor_path));
  grid_from_json(read_json(grid_path), dict);
  require(static_cast<Index>(dict.grid.size()) == dict.atoms.cols(), ErrorCode::shape_mismatch,
          "dictionary tensor and grid sidecar disagree on atom count");
  return dict;
}

}  // namespace qmri
