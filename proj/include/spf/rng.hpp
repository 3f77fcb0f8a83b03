#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "spf/common.hpp"

namespace spf {

// Deterministic RNG with self-contained distribution code. We never use
// std::*_distribution: their internal state and algorithms are
// implementation-defined, which would break bit-reproducible runs and
// checkpoint round-trips. mt19937_64 itself has a standardized text
// serialization, so full rng state travels with checkpoints.
class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    SPF_CHECK(n > 0, "uniform_int: n must be positive");
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  int index(std::size_t n) { return static_cast<int>(uniform_int(n)); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; the spare value is part of the serialized state.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Index sampled proportionally to non-negative weights.
  int weighted(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
      SPF_CHECK(w >= 0.0 && std::isfinite(w), "weighted: weights must be finite and non-negative");
      total += w;
    }
    SPF_CHECK(total > 0.0, "weighted: all weights are zero");
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  std::string save_state() const {
    std::ostringstream oss;
    oss << gen_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
    oss.precision(17);
    oss << spare_;
    return oss.str();
  }

  void load_state(const std::string& s) {
    std::istringstream iss(s);
    int hs = 0;
    iss >> gen_ >> hs >> spare_;
    SPF_CHECK(!iss.fail(), "Rng::load_state: malformed state string");
    has_spare_ = hs != 0;
  }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace spf
