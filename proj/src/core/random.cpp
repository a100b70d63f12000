#include "etm/core/random.hpp"

#include <vector>

namespace ETM_NS {

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  for (auto t : tags) {
    words.push_back(static_cast<std::uint32_t>(t));
    words.push_back(static_cast<std::uint32_t>(t >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) { return Rng(derive_seed(seed, tags)); }

Tensor normal_tensor(Shape shape, real stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<real> dist(0.0f, stddev);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor uniform_tensor(Shape shape, real lo, real hi, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<real> dist(lo, hi);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace etm
