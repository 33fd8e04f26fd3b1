#pragma once

// TensorFile binary format and strict JSON reading helpers.
//
// Layout (little-endian throughout):
//   bytes 0..7   magic "QMRITNSR"
//   u16          version (currently 1)
//   u8           dtype: 0 = f64, 1 = c128
//   u8           ndim
//   u64 x ndim   dims
//   payload      row-major values; c128 as interleaved (re, im) f64 pairs

#include "qmri/core.hpp"

#include <json.hpp>

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

namespace qmri {

using json = nlohmann::json;

enum class DType : std::uint8_t { f64 = 0, c128 = 1 };

inline constexpr std::array<char, 8> kTensorMagic{'Q', 'M', 'R', 'I', 'T', 'N', 'S', 'R'};
inline constexpr std::uint16_t kTensorVersion = 1;

inline std::size_t dtype_size(DType t) { return t == DType::f64 ? 8 : 16; }

struct Tensor {
  DType dtype = DType::f64;
  std::vector<std::uint64_t> dims;
  std::vector<double> real;    // used when dtype == f64
  std::vector<cdouble> cplx;   // used when dtype == c128

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  bool operator==(const Tensor& o) const {
    if (dtype != o.dtype || dims != o.dims) return false;
    // bitwise comparison, so NaN payloads and signed zeros round-trip too
    if (dtype == DType::f64)
      return real.size() == o.real.size() &&
             std::memcmp(real.data(), o.real.data(), real.size() * sizeof(double)) == 0;
    return cplx.size() == o.cplx.size() &&
           std::memcmp(cplx.data(), o.cplx.data(), cplx.size() * sizeof(cdouble)) == 0;
  }
};

inline Tensor tensor_from(const CMatrix& m) {
  Tensor t;
  t.dtype = DType::c128;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.cplx.resize(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) t.cplx[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return t;
}

inline Tensor tensor_from(const RMatrix& m) {
  Tensor t;
  t.dtype = DType::f64;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.real.resize(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) t.real[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  return t;
}

inline Tensor tensor_from(const CVector& v) {
  Tensor t;
  t.dtype = DType::c128;
  t.dims = {static_cast<std::uint64_t>(v.size())};
  t.cplx.assign(v.data(), v.data() + v.size());
  return t;
}

inline Tensor tensor_from(const RVector& v) {
  Tensor t;
  t.dtype = DType::f64;
  t.dims = {static_cast<std::uint64_t>(v.size())};
  t.real.assign(v.data(), v.data() + v.size());
  return t;
}

// Treats a 1-D tensor as a column; higher ranks collapse trailing axes into columns.
inline std::pair<Index, Index> matrix_shape(const Tensor& t) {
  require(!t.dims.empty(), ErrorCode::shape_mismatch, "tensor has no dimensions");
  const auto rows = static_cast<Index>(t.dims[0]);
  const auto cols = static_cast<Index>(t.numel() / t.dims[0]);
  return {rows, cols};
}

inline CMatrix to_cmatrix(const Tensor& t) {
  auto [rows, cols] = matrix_shape(t);
  CMatrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      const auto k = static_cast<std::size_t>(r * cols + c);
      m(r, c) = t.dtype == DType::c128 ? t.cplx[k] : cdouble(t.real[k], 0.0);
    }
  return m;
}

inline RMatrix to_rmatrix(const Tensor& t) {
  require(t.dtype == DType::f64, ErrorCode::invalid_argument, "expected an f64 tensor");
  auto [rows, cols] = matrix_shape(t);
  RMatrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = t.real[static_cast<std::size_t>(r * cols + c)];
  return m;
}

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v, int bytes = 8) {
  for (int i = 0; i < bytes; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p, int bytes = 8) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f64(std::string& buf, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, 8);
  put_u64(buf, bits);
}

inline double get_f64(const unsigned char* p) {
  const std::uint64_t bits = get_u64(p);
  double x;
  std::memcpy(&x, &bits, 8);
  return x;
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  require(!t.dims.empty() && t.dims.size() <= 255, ErrorCode::invalid_argument,
          "tensor rank must be in [1, 255]");
  std::uint64_t n = 1;
  for (auto d : t.dims) {
    require(d >= 1, ErrorCode::invalid_argument, "tensor dims must be >= 1");
    require(n <= std::numeric_limits<std::uint64_t>::max() / d, ErrorCode::invalid_argument,
            "dimension overflow");
    n *= d;
  }
  require(n <= std::numeric_limits<std::uint64_t>::max() / dtype_size(t.dtype),
          ErrorCode::invalid_argument, "dimension overflow");
  const std::size_t have = t.dtype == DType::f64 ? t.real.size() : t.cplx.size();
  require(have == n, ErrorCode::shape_mismatch, "payload length does not match dims");

  std::string buf;
  buf.reserve(12 + 8 * t.dims.size() + n * dtype_size(t.dtype));
  buf.append(kTensorMagic.data(), kTensorMagic.size());
  detail::put_u64(buf, kTensorVersion, 2);
  buf.push_back(static_cast<char>(t.dtype));
  buf.push_back(static_cast<char>(t.dims.size()));
  for (auto d : t.dims) detail::put_u64(buf, d);
  if (t.dtype == DType::f64) {
    for (double x : t.real) detail::put_f64(buf, x);
  } else {
    for (const auto& z : t.cplx) {
      detail::put_f64(buf, z.real());
      detail::put_f64(buf, z.imag());
    }
  }
  return buf;
}

inline Tensor decode_tensor(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t size = bytes.size();
  require(size >= 8, ErrorCode::truncated, "file shorter than magic");
  require(std::memcmp(p, kTensorMagic.data(), 8) == 0, ErrorCode::bad_magic, "not a QMRITNSR file");
  require(size >= 12, ErrorCode::truncated, "header truncated");
  const auto version = static_cast<std::uint16_t>(detail::get_u64(p + 8, 2));
  require(version == kTensorVersion, ErrorCode::unsupported_version,
          "tensor version " + std::to_string(version));
  const std::uint8_t dt = p[10];
  require(dt <= 1, ErrorCode::invalid_argument, "unknown dtype " + std::to_string(dt));
  Tensor t;
  t.dtype = static_cast<DType>(dt);
  const std::size_t ndim = p[11];
  require(ndim >= 1, ErrorCode::invalid_argument, "tensor rank 0");
  require(size >= 12 + 8 * ndim, ErrorCode::truncated, "dims truncated");
  std::uint64_t n = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const auto d = detail::get_u64(p + 12 + 8 * i);
    require(d >= 1, ErrorCode::invalid_argument, "zero-length axis");
    require(n <= std::numeric_limits<std::uint64_t>::max() / d / dtype_size(t.dtype),
            ErrorCode::invalid_argument, "dimension overflow");
    n *= d;
    t.dims.push_back(d);
  }
  const std::size_t off = 12 + 8 * ndim;
  const std::uint64_t payload = n * dtype_size(t.dtype);
  require(size - off >= payload, ErrorCode::truncated, "payload truncated");
  require(size - off == payload, ErrorCode::invalid_argument, "trailing bytes after payload");
  const unsigned char* q = p + off;
  if (t.dtype == DType::f64) {
    t.real.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) t.real[i] = detail::get_f64(q + 8 * i);
  } else {
    t.cplx.resize(n);
    for (std::uint64_t i = 0; i < n; ++i)
      t.cplx[i] = cdouble(detail::get_f64(q + 16 * i), detail::get_f64(q + 16 * i + 8));
  }
  return t;
}

inline void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorCode::io, "cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(os), ErrorCode::io, "write failed: " + path.string());
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_bytes(path, encode_tensor(t));
}

inline Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_bytes(path)); }

inline void write_json(const std::filesystem::path& path, const json& j) {
  write_bytes(path, j.dump(2) + "\n");
}

inline json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_bytes(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::config, path.string() + ": " + e.what());
  }
}

// Reads one JSON object, tracking consumed keys so that leftovers can be rejected.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), ErrorCode::config, path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key) {
    seen_.insert(key);
    require(j_.contains(key), ErrorCode::config, "missing required key " + where(key));
    return convert<T>(key);
  }

  template <class T>
  T get_or(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(key);
  }

  StrictObject child(const std::string& key) {
    seen_.insert(key);
    require(j_.contains(key), ErrorCode::config, "missing required section " + where(key));
    return StrictObject(j_.at(key), where(key));
  }

  std::optional<StrictObject> child_opt(const std::string& key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return StrictObject(j_.at(key), where(key));
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    require(j_.contains(key), ErrorCode::config, "missing required key " + where(key));
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      require(seen_.count(it.key()) != 0, ErrorCode::config, "unknown key " + where(it.key()));
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  template <class T>
  T convert(const std::string& key) const {
    try {
      const json& v = j_.at(key);
      if constexpr (std::is_arithmetic_v<T> && !std::is_same_v<T, bool>) {
        require(v.is_number(), ErrorCode::config, "expected a number at " + where(key));
        if constexpr (std::is_integral_v<T>) {
          require(v.is_number_integer(), ErrorCode::config, "expected an integer at " + where(key));
          if constexpr (std::is_unsigned_v<T>)
            require(v.get<long long>() >= 0 || v.is_number_unsigned(), ErrorCode::config,
                    "expected a nonnegative integer at " + where(key));
        }
      }
      if constexpr (std::is_same_v<T, bool>)
        require(v.is_boolean(), ErrorCode::config, "expected a boolean at " + where(key));
      if constexpr (std::is_same_v<T, std::string>)
        require(v.is_string(), ErrorCode::config, "expected a string at " + where(key));
      return v.get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::config, "bad value at " + where(key) + ": " + e.what());
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace qmri
