#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "etm/core/autograd.hpp"

namespace ETM_NS {

/// Named set of trainable tensors sharing one learning-rate multiplier.
struct ParameterGroup {
  std::string name;
  std::vector<Var> tensors;
  real lr_scale = 1.0f;
};

/// Element count over all tensors of the group. Throws on an empty group.
std::int64_t param_count(const ParameterGroup& group);
std::int64_t param_count(std::span<const ParameterGroup> groups);

/// Checks lr_scale > 0, non-empty tensor lists and unique group names.
void validate_groups(std::span<const ParameterGroup> groups);

void zero_grad(ParameterGroup& group);

struct SgdState {
  real momentum = 0.0f;
  real weight_decay = 0.0f;
  std::vector<Tensor> velocity;  // allocated on the first step
};

struct AdamState {
  real beta1 = 0.9f;
  real beta2 = 0.999f;
  real eps = 1e-8f;
  std::int64_t step_count = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// g' = g + wd*p;  v <- momentum*v + g';  p <- p - base_lr*lr_scale*v
void sgd_step(ParameterGroup& group, SgdState& state, real base_lr);

/// Bias-corrected Adam; increments step_count by one.
void adam_step(ParameterGroup& group, AdamState& state, real base_lr);

}  // namespace etm
