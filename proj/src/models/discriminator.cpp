#include "etm/models/discriminator.hpp"

#include <stdexcept>

#include <fmt/format.h>

namespace ETM_NS::models {

Discriminator::Discriminator(int in_channels, const DiscriminatorConfig& config, std::uint64_t seed,
                             const std::string& name)
    : in_channels_(in_channels), slope_(config.leaky_slope) {
  if (in_channels < 1 || config.base_channels < 1) throw std::invalid_argument("Discriminator: invalid widths");
  Rng rng = make_rng(seed, {0xd15c});
  int in = in_channels;
  for (std::size_t i = 0; i < body_.size(); ++i) {
    const int out = config.base_channels << i;
    body_[i] = Conv2d(fmt::format("{}.conv{}", name, i + 1), in, out, 3, {2, 1, 1}, he_stddev(in, 3), rng);
    in = out;
  }
  score_ = Conv2d(name + ".score", in, 1, 3, {1, 1, 1}, he_stddev(in, 3), rng);
}

Var Discriminator::forward(const Var& p) const {
  if (p.value().rank() != 4 || p.dim(1) != in_channels_) {
    throw std::invalid_argument(
        fmt::format("discriminator expects {} input channels, got shape {}", in_channels_, shape_str(p.shape())));
  }
  Var h = p;
  for (const auto& conv : body_) h = ops::leaky_relu(conv(h), slope_);
  return score_(h);
}

std::vector<Var> Discriminator::parameters() const {
  std::vector<Var> out;
  for (const auto& conv : body_) conv.append_parameters(out);
  score_.append_parameters(out);
  return out;
}

void Discriminator::set_requires_grad(bool flag) {
  for (auto& conv : body_) conv.set_requires_grad(flag);
  score_.set_requires_grad(flag);
}

}  // namespace etm::models
