#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "etm/models/conv.hpp"

namespace ETM_NS::models {

struct DiscriminatorConfig {
  int base_channels = 16;  // widths base, 2x, 4x, 8x
  real leaky_slope = 0.2f;
};

/// Fully convolutional patch discriminator: four stride-2 3x3 convolutions with
/// leaky ReLU and a linear 3x3 scoring layer. Scores are raw (no sigmoid).
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(int in_channels, const DiscriminatorConfig& config, std::uint64_t seed,
                const std::string& name = "disc");

  /// p: [B,C,h,w] -> [B,1,ceil(h/16),ceil(w/16)]
  Var forward(const Var& p) const;

  std::vector<Var> parameters() const;
  void set_requires_grad(bool flag);
  int in_channels() const { return in_channels_; }
  Conv2d& score_layer() { return score_; }

 private:
  int in_channels_ = 0;
  real slope_ = 0.2f;
  std::array<Conv2d, 4> body_;
  Conv2d score_;
};

}  // namespace etm::models
