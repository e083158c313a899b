#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace mpvcrop {

/// Purposes for which independent random streams are derived from a master seed.
/// Keeping streams separate means adding or removing work in one place (say,
/// disabling the MPV-Net) never shifts the draws seen anywhere else.
enum class Stream : std::uint64_t {
  data_labeled = 1,
  data_unlabeled,
  data_val,
  data_test,
  init_composer,
  init_mpv_encoder,
  init_mpv_head,
  batch,
  augment,
  mpv_jitter,
  policy,
  eval_policy,
  annotation,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Hash a master seed, a purpose and any number of indices into a child seed.
inline std::uint64_t derive_seed(std::uint64_t master, Stream purpose,
                                 std::initializer_list<std::uint64_t> indices = {}) {
  std::uint64_t h = splitmix64(master ^ splitmix64(static_cast<std::uint64_t>(purpose)));
  for (auto i : indices) h = splitmix64(h ^ splitmix64(i + 0x632be59bd9b4e019ULL));
  return h;
}

/// Seeded random stream. Distributions are computed here rather than through
/// <random> distributions so that draws are identical across standard libraries.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }
  std::uint64_t next() { return engine_(); }

private:
  std::mt19937_64 engine_;
};

} // namespace mpvcrop
