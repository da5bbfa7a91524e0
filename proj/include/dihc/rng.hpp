#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace dihc {

// Deterministic, platform-independent RNG. std::mt19937 sequences are
// portable but the standard distributions are not, so all draws here are
// derived from raw 64-bit splitmix output.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

  // [0, 1)
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

  // [0, n)
  int next_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  bool next_bool() { return (next_u64() & 1) != 0; }

  float normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-12) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    has_spare_ = true;
    return static_cast<float>(r * std::cos(a));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[next_int(i + 1)]);
    }
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  float spare_ = 0.f;
};

// Derives an independent stream from a base seed and a list of tags, so
// components (weight init, sampler, augmentation) never share draws.
inline Rng derive_rng(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t h = seed ^ 0xD1B54A32D192ED03ULL;
  for (uint64_t t : tags) {
    h ^= t + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    Rng mix(h);
    h = mix.next_u64();
  }
  return Rng(h);
}

}  // namespace dihc
