#pragma once

// Single-coil Cartesian acquisition operator A = F_Omega (identity coil
// sensitivity) acting on subspace-compressed image time-series, its adjoint,
// sampling masks, and k-space noise.
//
// The 2D DFT is unitary (scaled by 1/sqrt(H W) both ways), so ||A|| <= 1.

#include "qmri/core.hpp"
#include "qmri/io.hpp"
#include "qmri/subspace.hpp"

#include <unsupported/Eigen/FFT>

#include <cmath>
#include <limits>
#include <random>

namespace qmri {

// Dimension-reduced time-series of magnetisation images: s rows, one image
// (row-major H x W) per subspace component.
struct Tsmi {
  CMatrix coeffs;
  Index height = 0;
  Index width = 0;

  Index voxels() const { return height * width; }
  Index rank() const { return coeffs.rows(); }

  static Tsmi zeros(Index s, Index h, Index w) { return {CMatrix::Zero(s, h * w), h, w}; }
};

enum class SamplingScheme { uniform_random, variable_density };

inline SamplingScheme parse_scheme(const std::string& s) {
  if (s == "uniform-random") return SamplingScheme::uniform_random;
  if (s == "variable-density") return SamplingScheme::variable_density;
  throw Error(ErrorCode::config, "unknown sampling scheme '" + s + "'");
}

inline std::string to_string(SamplingScheme s) {
  return s == SamplingScheme::uniform_random ? "uniform-random" : "variable-density";
}

struct SamplingPattern {
  Index height = 0;
  Index width = 0;
  std::vector<std::vector<Index>> frames;  // sorted sampled k-space indices per frame
  std::uint64_t seed = 0;
  SamplingScheme scheme = SamplingScheme::uniform_random;
  double requested_fraction = 1.0;
  double undersampling = 1.0;  // realised mean mask density

  Index voxels() const { return height * width; }
  Index frame_count() const { return static_cast<Index>(frames.size()); }

  Index total_samples() const {
    Index n = 0;
    for (const auto& f : frames) n += static_cast<Index>(f.size());
    return n;
  }

  std::vector<std::uint8_t> mask(Index t) const {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(voxels()), 0);
    for (Index k : frames[static_cast<std::size_t>(t)]) m[static_cast<std::size_t>(k)] = 1;
    return m;
  }

  bool operator==(const SamplingPattern& o) const {
    return height == o.height && width == o.width && frames == o.frames;
  }
};

struct KspaceData {
  SamplingPattern pattern;
  CVector samples;      // frame-ordered concatenation of masked samples
  std::vector<Index> offsets;  // start of each frame in `samples`, plus the end
  std::optional<double> snr_db;

  Index frame_count() const { return pattern.frame_count(); }
};

inline std::vector<Index> frame_offsets(const SamplingPattern& p) {
  std::vector<Index> off{0};
  for (const auto& f : p.frames) off.push_back(off.back() + static_cast<Index>(f.size()));
  return off;
}

// Signed DFT frequency of index k on an axis of length n.
inline double signed_frequency(Index k, Index n) {
  return static_cast<double>(k < (n + 1) / 2 ? k : k - n);
}

inline SamplingPattern make_pattern(Index height, Index width, Index frames, double fraction,
                                    SamplingScheme scheme, std::uint64_t seed,
                                    double density_sigma = 0.3) {
  require(height >= 1 && width >= 1 && frames >= 1, ErrorCode::invalid_argument, "empty sampling grid");
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::invalid_argument, "fraction must be in (0, 1]");
  const Index n = height * width;
  const auto count = static_cast<Index>(std::llround(fraction * static_cast<double>(n)));
  require(count >= 1, ErrorCode::invalid_argument, "fraction yields zero samples per frame");

  SamplingPattern p;
  p.height = height;
  p.width = width;
  p.seed = seed;
  p.scheme = scheme;
  p.requested_fraction = fraction;
  p.frames.resize(static_cast<std::size_t>(frames));

  // Gaussian radial density in units of the Nyquist radius
  std::vector<double> weight(static_cast<std::size_t>(n), 1.0);
  if (scheme == SamplingScheme::variable_density) {
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x) {
        const double fy = signed_frequency(y, height) / (0.5 * static_cast<double>(height));
        const double fx = signed_frequency(x, width) / (0.5 * static_cast<double>(width));
        const double r2 = fx * fx + fy * fy;
        weight[static_cast<std::size_t>(y * width + x)] = std::exp(-r2 / (2.0 * density_sigma * density_sigma));
      }
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<std::pair<double, Index>> keys(static_cast<std::size_t>(n));
  for (auto& frame : p.frames) {
    // Efraimidis-Spirakis weighted sampling without replacement; DC always kept.
    for (Index k = 0; k < n; ++k) {
      const double u = uni(rng);
      const double w = weight[static_cast<std::size_t>(k)];
      keys[static_cast<std::size_t>(k)] = {k == 0 ? std::numeric_limits<double>::infinity()
                                                  : std::log(std::max(u, 1e-300)) / w,
                                           k};
    }
    std::partial_sort(keys.begin(), keys.begin() + count, keys.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    frame.resize(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) frame[static_cast<std::size_t>(i)] = keys[static_cast<std::size_t>(i)].second;
    std::sort(frame.begin(), frame.end());
  }
  p.undersampling = static_cast<double>(p.total_samples()) / static_cast<double>(n * frames);
  return p;
}

// Unitary 2D DFT on row-major H x W images.
class Fft2 {
 public:
  Fft2(Index height, Index width) : h_(height), w_(width), row_(width), col_(height), tmp_(height) {
    fft_.SetFlag(Eigen::FFT<double>::Unscaled);
    scale_ = 1.0 / std::sqrt(static_cast<double>(height * width));
  }

  void forward(const cdouble* in, cdouble* out) { run(in, out, false); }
  void inverse(const cdouble* in, cdouble* out) { run(in, out, true); }

 private:
  void run(const cdouble* in, cdouble* out, bool inv) {
    for (Index y = 0; y < h_; ++y) {
      std::copy(in + y * w_, in + (y + 1) * w_, row_.begin());
      if (inv)
        fft_.inv(tmp_row_, row_);
      else
        fft_.fwd(tmp_row_, row_);
      std::copy(tmp_row_.begin(), tmp_row_.end(), out + y * w_);
    }
    for (Index x = 0; x < w_; ++x) {
      for (Index y = 0; y < h_; ++y) col_[static_cast<std::size_t>(y)] = out[y * w_ + x];
      if (inv)
        fft_.inv(tmp_, col_);
      else
        fft_.fwd(tmp_, col_);
      for (Index y = 0; y < h_; ++y) out[y * w_ + x] = tmp_[static_cast<std::size_t>(y)] * scale_;
    }
  }

  Index h_, w_;
  double scale_ = 1.0;
  Eigen::FFT<double> fft_;
  std::vector<cdouble> row_, tmp_row_, col_, tmp_;
};

namespace detail {
inline void check_tsmi_pattern(const SubspaceModel& v, const Tsmi& x, const SamplingPattern& p) {
  require(x.height == p.height && x.width == p.width, ErrorCode::shape_mismatch,
          "TSMI spatial grid does not match sampling pattern");
  require(x.coeffs.cols() == x.voxels(), ErrorCode::shape_mismatch, "TSMI column count != H*W");
  require(x.rank() == v.rank(), ErrorCode::shape_mismatch, "TSMI rank does not match subspace");
  require(p.frame_count() == v.frames(), ErrorCode::shape_mismatch,
          "pattern frame count does not match subspace length");
}
}  // namespace detail

// Masked unitary DFT of each frame of the T x n image series.
inline CVector sample_frames(const CMatrix& images, const SamplingPattern& pattern,
                             const std::vector<Index>& offsets) {
  require(images.rows() == pattern.frame_count() && images.cols() == pattern.voxels(),
          ErrorCode::shape_mismatch, "image series does not match pattern");
  const Index n = pattern.voxels();
  CVector out(offsets.back());
  // row-major copy so each frame is contiguous
  const Eigen::Matrix<cdouble, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> frames = images;
  parallel_for(pattern.frame_count(), [&](Index b, Index e) {
    Fft2 fft(pattern.height, pattern.width);
    std::vector<cdouble> k(static_cast<std::size_t>(n));
    for (Index t = b; t < e; ++t) {
      fft.forward(frames.row(t).data(), k.data());
      Index o = offsets[static_cast<std::size_t>(t)];
      for (Index idx : pattern.frames[static_cast<std::size_t>(t)]) out[o++] = k[static_cast<std::size_t>(idx)];
    }
  });
  return out;
}

// Zero-filled inverse DFT of every frame: T x n images.
inline CMatrix backproject_frames(const CVector& samples, const SamplingPattern& p,
                                  const std::vector<Index>& offsets) {
  require(offsets.size() == p.frames.size() + 1 && samples.size() == offsets.back(),
          ErrorCode::shape_mismatch, "k-space samples inconsistent with pattern");
  const Index n = p.voxels();
  Eigen::Matrix<cdouble, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> frames(p.frame_count(), n);
  parallel_for(p.frame_count(), [&](Index b, Index e) {
    Fft2 fft(p.height, p.width);
    std::vector<cdouble> k(static_cast<std::size_t>(n));
    for (Index t = b; t < e; ++t) {
      std::fill(k.begin(), k.end(), cdouble(0.0));
      Index o = offsets[static_cast<std::size_t>(t)];
      for (Index idx : p.frames[static_cast<std::size_t>(t)]) k[static_cast<std::size_t>(idx)] = samples[o++];
      fft.inverse(k.data(), frames.row(t).data());
    }
  });
  return frames;
}

inline KspaceData sample_images(const CMatrix& images, const SamplingPattern& pattern) {
  KspaceData out;
  out.pattern = pattern;
  out.offsets = frame_offsets(pattern);
  out.samples = sample_frames(images, pattern, out.offsets);
  return out;
}

inline CMatrix backproject_images(const KspaceData& data) {
  return backproject_frames(data.samples, data.pattern, data.offsets);
}

// A(V .) and V^H A^H(.) on raw sample vectors, bound to one subspace and pattern.
class Acquisition {
 public:
  Acquisition(const SubspaceModel& v, const SamplingPattern& p)
      : v_(v), p_(p), offsets_(frame_offsets(p)) {
    require(p.frame_count() == v.frames(), ErrorCode::shape_mismatch,
            "pattern frame count does not match subspace length");
  }

  CVector forward(const CMatrix& coeffs) const { return sample_frames(expand(v_, coeffs), p_, offsets_); }
  CMatrix adjoint(const CVector& samples) const { return compress(v_, backproject_frames(samples, p_, offsets_)); }

  const SamplingPattern& pattern() const { return p_; }

 private:
  const SubspaceModel& v_;
  const SamplingPattern& p_;
  std::vector<Index> offsets_;
};

inline KspaceData apply_forward(const SubspaceModel& v, const Tsmi& x, const SamplingPattern& pattern) {
  detail::check_tsmi_pattern(v, x, pattern);
  return sample_images(expand(v, x.coeffs), pattern);
}

// V^H A^H (Y)
inline Tsmi apply_adjoint(const SubspaceModel& v, const KspaceData& data) {
  require(data.pattern.frame_count() == v.frames(), ErrorCode::shape_mismatch,
          "pattern frame count does not match subspace length");
  return {compress(v, backproject_images(data)), data.pattern.height, data.pattern.width};
}

inline KspaceData with_samples(const KspaceData& like, CVector samples) {
  KspaceData out;
  out.pattern = like.pattern;
  out.offsets = like.offsets;
  out.samples = std::move(samples);
  out.snr_db = like.snr_db;
  return out;
}

// Adds complex white Gaussian noise rescaled so that 20 log10(||Y|| / ||xi||)
// equals snr_db for the realised noise vector. Infinite SNR is a no-op.
inline KspaceData add_noise(const KspaceData& data, double snr_db, std::uint64_t seed) {
  require(data.samples.size() > 0, ErrorCode::invalid_argument, "no k-space samples");
  if (std::isinf(snr_db) && snr_db > 0) return data;
  const double signal = data.samples.norm();
  require(signal > 0.0, ErrorCode::invalid_argument, "zero-energy k-space data");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  CVector noise(data.samples.size());
  for (Index i = 0; i < noise.size(); ++i) {
    const double re = g(rng);
    const double im = g(rng);
    noise[i] = cdouble(re, im);
  }
  noise *= signal / (noise.norm() * std::pow(10.0, snr_db / 20.0));
  KspaceData out = with_samples(data, data.samples + noise);
  out.snr_db = snr_db;
  return out;
}

// ---- persistence -----------------------------------------------------------

// Masks are bit-packed 32 per f64 entry (each entry holds an exact uint32): T x ceil(n/32).
inline Tensor pack_masks(const SamplingPattern& p) {
  const Index words = (p.voxels() + 31) / 32;
  RMatrix packed = RMatrix::Zero(p.frame_count(), words);
  for (Index t = 0; t < p.frame_count(); ++t) {
    std::vector<std::uint32_t> w(static_cast<std::size_t>(words), 0u);
    for (Index k : p.frames[static_cast<std::size_t>(t)])
      w[static_cast<std::size_t>(k / 32)] |= (1u << (k % 32));
    for (Index i = 0; i < words; ++i) packed(t, i) = static_cast<double>(w[static_cast<std::size_t>(i)]);
  }
  return tensor_from(packed);
}

inline void unpack_masks(const Tensor& t, SamplingPattern& p) {
  const RMatrix packed = to_rmatrix(t);
  const Index words = (p.voxels() + 31) / 32;
  require(packed.cols() == words, ErrorCode::shape_mismatch, "packed mask width mismatch");
  p.frames.assign(static_cast<std::size_t>(packed.rows()), {});
  for (Index f = 0; f < packed.rows(); ++f)
    for (Index i = 0; i < words; ++i) {
      const double v = packed(f, i);
      require(v >= 0.0 && v <= 4294967295.0 && v == std::floor(v), ErrorCode::invalid_argument,
              "corrupt packed mask word");
      const auto w = static_cast<std::uint32_t>(v);
      for (Index b = 0; b < 32; ++b)
        if (w & (1u << b)) {
          const Index k = i * 32 + b;
          require(k < p.voxels(), ErrorCode::invalid_argument, "mask bit beyond grid");
          p.frames[static_cast<std::size_t>(f)].push_back(k);
        }
    }
  p.undersampling = static_cast<double>(p.total_samples()) /
                    static_cast<double>(std::max<Index>(1, p.voxels() * p.frame_count()));
}

inline void save_pattern(const std::filesystem::path& json_path, const SamplingPattern& p) {
  auto mask_path = json_path;
  mask_path.replace_extension(".masks.tnsr");
  write_tensor(mask_path, pack_masks(p));
  write_json(json_path, json{{"height_px", p.height},
                             {"width_px", p.width},
                             {"frames_count", p.frame_count()},
                             {"fraction_ratio", p.requested_fraction},
                             {"undersampling_ratio", p.undersampling},
                             {"scheme", to_string(p.scheme)},
                             {"seed", p.seed},
                             {"masks_file", mask_path.filename().string()}});
}

inline SamplingPattern load_pattern(const std::filesystem::path& json_path) {
  const json j = read_json(json_path);
  StrictObject o(j, "pattern");
  SamplingPattern p;
  p.height = o.get<Index>("height_px");
  p.width = o.get<Index>("width_px");
  const auto frames = o.get<Index>("frames_count");
  p.requested_fraction = o.get<double>("fraction_ratio");
  o.get<double>("undersampling_ratio");
  p.scheme = parse_scheme(o.get<std::string>("scheme"));
  p.seed = o.get<std::uint64_t>("seed");
  const auto file = o.get<std::string>("masks_file");
  o.finish();
  unpack_masks(read_tensor(json_path.parent_path() / file), p);
  require(p.frame_count() == frames, ErrorCode::shape_mismatch, "pattern frame count mismatch");
  return p;
}

inline KspaceData kspace_from_samples(const SamplingPattern& p, const CVector& samples) {
  KspaceData d;
  d.pattern = p;
  d.offsets = frame_offsets(p);
  require(samples.size() == d.offsets.back(), ErrorCode::shape_mismatch,
          "sample count does not match pattern popcount");
  d.samples = samples;
  return d;
}

// TSMIs are stored as s x H x W tensors.
inline Tensor tsmi_tensor(const Tsmi& x) {
  Tensor t = tensor_from(x.coeffs);
  t.dims = {static_cast<std::uint64_t>(x.rank()), static_cast<std::uint64_t>(x.height),
            static_cast<std::uint64_t>(x.width)};
  return t;
}

inline Tsmi tsmi_from_tensor(const Tensor& t) {
  require(t.dims.size() == 3, ErrorCode::shape_mismatch, "TSMI tensor must have dims s x H x W");
  return {to_cmatrix(t), static_cast<Index>(t.dims[1]), static_cast<Index>(t.dims[2])};
}

}  // namespace qmri
