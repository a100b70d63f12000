#pragma once

#include <string>
#include <vector>

#include "etm/core/ops.hpp"
#include "etm/core/random.hpp"

namespace ETM_NS::models {

/// Convolution layer owning its parameters. Copies are deep: a copied layer
/// gets fresh parameter nodes holding the same values.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, ops::Conv2dOptions options,
         real init_stddev, Rng& rng, bool with_bias = true);

  Conv2d(const Conv2d& other);
  Conv2d& operator=(const Conv2d& other);
  Conv2d(Conv2d&&) noexcept = default;
  Conv2d& operator=(Conv2d&&) noexcept = default;

  Var operator()(const Var& x) const { return ops::conv2d(x, weight_, bias_, options_); }

  Var& weight() { return weight_; }
  Var& bias() { return bias_; }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }
  const ops::Conv2dOptions& options() const { return options_; }
  int in_channels() const { return static_cast<int>(weight_.dim(1)); }
  int out_channels() const { return static_cast<int>(weight_.dim(0)); }

  void append_parameters(std::vector<Var>& out) const;
  void set_requires_grad(bool flag);

 private:
  Var weight_;
  Var bias_;
  ops::Conv2dOptions options_;
};

/// He-normal standard deviation for a kernel with the given fan-in.
real he_stddev(int in_channels, int kernel);

}  // namespace etm::models
