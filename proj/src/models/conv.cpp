#include "etm/models/conv.hpp"

#include <cmath>
#include <stdexcept>

namespace ETM_NS::models {

namespace {

Var clone_var(const Var& v) {
  if (!v.defined()) return Var();
  return Var(v.value(), v.requires_grad(), v.name());
}

}  // namespace

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, ops::Conv2dOptions options,
               real init_stddev, Rng& rng, bool with_bias)
    : options_(options) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1) throw std::invalid_argument("Conv2d: non-positive size");
  weight_ = Var::parameter(normal_tensor({out_channels, in_channels, kernel, kernel}, init_stddev, rng),
                           name + ".weight");
  if (with_bias) bias_ = Var::parameter(Tensor({out_channels}, 0.0f), name + ".bias");
}

Conv2d::Conv2d(const Conv2d& other)
    : weight_(clone_var(other.weight_)), bias_(clone_var(other.bias_)), options_(other.options_) {}

Conv2d& Conv2d::operator=(const Conv2d& other) {
  if (this != &other) {
    weight_ = clone_var(other.weight_);
    bias_ = clone_var(other.bias_);
    options_ = other.options_;
  }
  return *this;
}

void Conv2d::append_parameters(std::vector<Var>& out) const {
  out.push_back(weight_);
  if (bias_.defined()) out.push_back(bias_);
}

void Conv2d::set_requires_grad(bool flag) {
  weight_.set_requires_grad(flag);
  if (bias_.defined()) bias_.set_requires_grad(flag);
}

real he_stddev(int in_channels, int kernel) {
  return std::sqrt(2.0f / static_cast<real>(in_channels * kernel * kernel));
}

}  // namespace etm::models
