#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ktrace {

inline constexpr double kLog2Pi = 1.8378770664093454836;
inline constexpr double kProbEps = 1e-12;

/// Logistic function with overflow-safe branches for |x| > 30.
inline double sigmoid(double x) {
  if (x > 30.0) return 1.0 - std::exp(-x);
  if (x < -30.0) return std::exp(x);
  return 1.0 / (1.0 + std::exp(-x));
}

/// log(1 + e^x) without overflow.
inline double softplus(double x) {
  if (x > 30.0) return x + std::exp(-x);
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

/// log sigmoid(x) = -softplus(-x).
inline double log_sigmoid(double x) { return -softplus(-x); }

/// Bernoulli log-likelihood of outcome y under logit z.
inline double bernoulli_log_prob(int y, double z) {
  return y ? -softplus(-z) : -softplus(z);
}

/// log N(x | mean, var) for scalar Gaussians.
inline double gaussian_log_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (kLog2Pi + std::log(var) + d * d / var);
}

inline bool is_finite(double x) { return std::isfinite(x); }

// ---------------------------------------------------------------------------
// Deterministic random number generation.
//
// All randomness in the library flows from a single top-level seed through
// named sub-streams, so that runs reproduce byte-for-byte and per-learner
// work can be farmed out to threads without coordination.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// FNV-1a over a string; used to derive named sub-stream seeds.
inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed of the sub-stream `name` under the top-level `seed`.
inline std::uint64_t substream(std::uint64_t seed, std::string_view name) {
  std::uint64_t s = seed ^ hash_name(name);
  return splitmix64(s);
}

/// Seed of an indexed sub-stream, e.g. one per learner or per MC sample.
inline std::uint64_t substream(std::uint64_t seed, std::string_view name,
                               std::uint64_t index) {
  std::uint64_t s = substream(seed, name) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
  return splitmix64(s);
}

/// Small counter-based generator. Stateful but cheap to construct, so a fresh
/// stream per (learner, sample, step) gives common random numbers across
/// epochs for free.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform in (0, 1); never returns 0 or 1 exactly.
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (implementation-independent, hence
  /// reproducible across standard libraries).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Bernoulli draw with success probability p.
  int bernoulli(double p) { return uniform() < p ? 1 : 0; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ktrace
