#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace calib {

// Deterministic random stream. Uniform and normal transforms are coded
// explicitly (not via std::*_distribution, whose algorithms differ between
// standard libraries) so that a seed reproduces the same draws everywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ull)
      : engine_(seed), seed_tag_(seed) {}

  // [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the second draw of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t bits() { return engine_(); }

  // Independent child stream keyed by `stream`; the parent is not advanced.
  Rng spawn(std::uint64_t stream) const {
    return Rng(mix(seed_tag_, stream));
  }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined key
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // State round-trip for checkpoint/resume. The spare normal is dropped,
  // which is fine as long as save points sit between logical draw blocks.
  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void restore_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw std::runtime_error("Rng: bad saved state");
    has_spare_ = false;
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_tag_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace calib
