#pragma once

#include <cmath>
#include <cstdint>

namespace parsearch {

// Counter-based generator: the value at (seed, stream, counter) is a pure
// function of its key, so how draws are split across shards or call sites
// never changes what is drawn.
class CounterRng {
 public:
  CounterRng() = default;
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ULL))) {}

  CounterRng fork(std::uint64_t stream) const {
    CounterRng r;
    r.key_ = mix(key_ ^ mix(stream + 0xbf58476d1ce4e5b9ULL));
    return r;
  }

  std::uint64_t bits(std::uint64_t counter) const { return mix(key_ + mix(counter)); }

  // Uniform in the open interval (0, 1).
  double uniform(std::uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal(std::uint64_t counter) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
  }

  // Sequential helpers over an internal counter.
  double next_uniform() { return uniform(counter_++); }
  double next_normal() { return normal(counter_++); }
  std::uint64_t next_bits() { return bits(counter_++); }
  std::uint64_t counter() const { return counter_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace parsearch
