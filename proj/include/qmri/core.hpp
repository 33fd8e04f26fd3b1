#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <complex>
#include <cstdint>
#include <exception>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace qmri {

using cdouble = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;
using RMatrix = Eigen::MatrixXd;
using RVector = Eigen::VectorXd;
using Index = Eigen::Index;

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  io,
  bad_magic,
  truncated,
  unsupported_version,
  config,
  numerical,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_argument: return "InvalidArgument";
    case ErrorCode::shape_mismatch: return "ShapeMismatch";
    case ErrorCode::io: return "Io";
    case ErrorCode::bad_magic: return "BadMagic";
    case ErrorCode::truncated: return "Truncated";
    case ErrorCode::unsupported_version: return "UnsupportedVersion";
    case ErrorCode::config: return "Config";
    case ErrorCode::numerical: return "Numerical";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

// SplitMix64 step. Used to expand a master seed into independent stage seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// k-th output of the SplitMix64 stream seeded with `master`.
inline std::uint64_t derive_seed(std::uint64_t master, unsigned stage) {
  std::uint64_t state = master;
  std::uint64_t out = 0;
  for (unsigned i = 0; i <= stage; ++i) out = splitmix64(state);
  return out;
}

namespace detail {
inline unsigned& thread_count() {
  static unsigned n = 1;
  return n;
}
}  // namespace detail

inline void set_threads(unsigned n) { detail::thread_count() = std::max(1u, n); }
inline unsigned threads() { return detail::thread_count(); }

// Static contiguous partition of [0, n). Each index is visited exactly once, so
// results that depend only on the index are independent of the thread count.
inline void parallel_for(Index n, const std::function<void(Index, Index)>& body) {
  const Index nt = std::min<Index>(threads(), std::max<Index>(n, 1));
  if (nt <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nt));
  const Index chunk = (n + nt - 1) / nt;
  for (Index t = 0; t < nt; ++t) {
    const Index b = t * chunk;
    const Index e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&body, &errors, t, b, e] {
      try {
        body(b, e);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& ep : errors)
    if (ep) std::rethrow_exception(ep);
}

inline bool all_finite(const CMatrix& m) { return m.allFinite(); }

}  // namespace qmri
