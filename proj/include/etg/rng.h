#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>

namespace etg {

// xoshiro256++ seeded through splitmix64. Self-contained so streams are
// bit-identical across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
    have_gauss_ = false;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

  // standard normal via Box-Muller (cached pair)
  double normal() {
    if (have_gauss_) {
      have_gauss_ = false;
      return gauss_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    gauss_ = r * std::sin(a);
    have_gauss_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // independent child stream, e.g. one per identity or per module
  Rng fork(uint64_t salt) {
    uint64_t x = next_u64() ^ (salt * 0x9e3779b97f4a7c15ull);
    return Rng(splitmix64(x));
  }

  // full state, for bitwise-reproducible checkpoint resume
  std::array<uint64_t, 6> save_state() const {
    uint64_t gauss_bits;
    static_assert(sizeof(gauss_bits) == sizeof(gauss_));
    std::memcpy(&gauss_bits, &gauss_, 8);
    return {s_[0], s_[1], s_[2], s_[3], gauss_bits,
            have_gauss_ ? 1ull : 0ull};
  }
  void restore_state(const std::array<uint64_t, 6>& st) {
    for (int i = 0; i < 4; ++i) s_[i] = st[i];
    std::memcpy(&gauss_, &st[4], 8);
    have_gauss_ = st[5] != 0;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  double gauss_ = 0.0;
  bool have_gauss_ = false;
};

}  // namespace etg
