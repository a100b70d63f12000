#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "etm/core/tensor.hpp"

namespace ETM_NS {

using Rng = std::mt19937_64;

/// Independent stream for a (seed, tag...) tuple.
Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> tags = {});
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

Tensor normal_tensor(Shape shape, real stddev, Rng& rng);
Tensor uniform_tensor(Shape shape, real lo, real hi, Rng& rng);

}  // namespace etm
