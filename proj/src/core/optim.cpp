#include "etm/core/optim.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

namespace ETM_NS {

namespace {

std::string param_label(const ParameterGroup& group, std::size_t index) {
  const auto& name = group.tensors[index].name();
  return name.empty() ? fmt::format("{}[{}]", group.name, index) : name;
}

const Tensor& checked_grad(const ParameterGroup& group, std::size_t index) {
  const Var& p = group.tensors[index];
  if (!p.has_grad()) throw std::runtime_error(fmt::format("parameter {} has no gradient", param_label(group, index)));
  if (!p.grad().all_finite()) {
    throw std::runtime_error(fmt::format("parameter {} has a non-finite gradient", param_label(group, index)));
  }
  return p.grad();
}

void ensure_buffers(std::vector<Tensor>& buffers, const ParameterGroup& group) {
  if (buffers.empty()) {
    for (const auto& p : group.tensors) buffers.emplace_back(p.shape(), 0.0f);
  }
  if (buffers.size() != group.tensors.size()) throw std::logic_error("optimizer state does not match parameter group");
}

}  // namespace

std::int64_t param_count(const ParameterGroup& group) {
  if (group.tensors.empty()) throw std::invalid_argument(fmt::format("parameter group '{}' is empty", group.name));
  std::int64_t n = 0;
  for (const auto& t : group.tensors) n += t.numel();
  return n;
}

std::int64_t param_count(std::span<const ParameterGroup> groups) {
  std::int64_t n = 0;
  for (const auto& g : groups) n += param_count(g);
  return n;
}

void validate_groups(std::span<const ParameterGroup> groups) {
  std::set<std::string> names;
  for (const auto& g : groups) {
    if (!(g.lr_scale > 0.0f)) throw std::invalid_argument(fmt::format("group '{}' has lr_scale <= 0", g.name));
    if (g.tensors.empty()) throw std::invalid_argument(fmt::format("group '{}' is empty", g.name));
    if (!names.insert(g.name).second) throw std::invalid_argument(fmt::format("duplicate group name '{}'", g.name));
  }
}

void zero_grad(ParameterGroup& group) {
  for (auto& p : group.tensors) p.zero_grad();
}

void sgd_step(ParameterGroup& group, SgdState& state, real base_lr) {
  if (state.momentum < 0.0f || state.momentum >= 1.0f) throw std::invalid_argument("sgd momentum must be in [0,1)");
  ensure_buffers(state.velocity, group);
  for (std::size_t i = 0; i < group.tensors.size(); ++i) checked_grad(group, i);

  const real lr = base_lr * group.lr_scale;
  for (std::size_t i = 0; i < group.tensors.size(); ++i) {
    Var& p = group.tensors[i];
    const Tensor& g = p.grad();
    Tensor& value = p.mutable_value();
    Tensor& v = state.velocity[i];
    for (std::int64_t j = 0; j < value.numel(); ++j) {
      const real gj = g[j] + state.weight_decay * value[j];
      v[j] = state.momentum * v[j] + gj;
      value[j] -= lr * v[j];
    }
  }
}

void adam_step(ParameterGroup& group, AdamState& state, real base_lr) {
  if (state.beta1 < 0.0f || state.beta1 >= 1.0f || state.beta2 < 0.0f || state.beta2 >= 1.0f || !(state.eps > 0.0f)) {
    throw std::invalid_argument("invalid Adam hyperparameters");
  }
  ensure_buffers(state.m, group);
  ensure_buffers(state.v, group);
  for (std::size_t i = 0; i < group.tensors.size(); ++i) checked_grad(group, i);

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(static_cast<double>(state.beta1), t);
  const double correction2 = 1.0 - std::pow(static_cast<double>(state.beta2), t);
  const double lr = static_cast<double>(base_lr) * group.lr_scale;
  for (std::size_t i = 0; i < group.tensors.size(); ++i) {
    Var& p = group.tensors[i];
    const Tensor& g = p.grad();
    Tensor& value = p.mutable_value();
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::int64_t j = 0; j < value.numel(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0f - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0f - state.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      value[j] -= static_cast<real>(lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

}  // namespace etm
