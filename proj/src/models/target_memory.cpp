#include "etm/models/target_memory.hpp"

#include <stdexcept>

#include <fmt/format.h>

#include "etm/core/optim.hpp"

namespace ETM_NS::models {

TargetMemory::TargetMemory(int c_in, int c_out, int domain_index, std::uint64_t seed, TmBranches branches,
                           const std::string& name)
    : c_in_(c_in), c_out_(c_out), domain_index_(domain_index) {
  if (c_in < 1 || c_out < 1) throw std::invalid_argument("TargetMemory: channel counts must be positive");
  if (!branches.conv && !branches.pool) throw std::invalid_argument("TargetMemory: at least one branch required");
  Rng rng = make_rng(seed, {0x7a3, static_cast<std::uint64_t>(domain_index)});
  if (branches.conv) conv_branch_.emplace(name + ".conv", c_in, c_out, 1, ops::Conv2dOptions{}, kInitStddev, rng);
  if (branches.pool) pool_branch_.emplace(name + ".pool", c_in, c_out, 1, ops::Conv2dOptions{}, kInitStddev, rng);
}

Var TargetMemory::forward(const Var& h_prev) const {
  if (h_prev.value().rank() != 4 || h_prev.dim(1) != c_in_) {
    throw std::invalid_argument(
        fmt::format("TM expects {} input channels, got shape {}", c_in_, shape_str(h_prev.shape())));
  }
  Var out;
  if (conv_branch_) out = (*conv_branch_)(h_prev);
  if (pool_branch_) {
    Var pooled = ops::relu((*pool_branch_)(ops::global_avg_pool(h_prev)));
    Var context = ops::upsample_nearest(pooled, h_prev.dim(2), h_prev.dim(3));
    out = out.defined() ? ops::add(out, context) : context;
  }
  return out;
}

std::vector<Var> TargetMemory::parameters() const {
  std::vector<Var> out;
  if (conv_branch_) conv_branch_->append_parameters(out);
  if (pool_branch_) pool_branch_->append_parameters(out);
  return out;
}

void TargetMemory::freeze() {
  if (conv_branch_) conv_branch_->set_requires_grad(false);
  if (pool_branch_) pool_branch_->set_requires_grad(false);
  frozen_ = true;
}

TargetMemory tm_init(int c_in, int c_out, int domain_index, std::uint64_t seed, TmBranches branches) {
  return TargetMemory(c_in, c_out, domain_index, seed, branches, fmt::format("tm{}", domain_index));
}

std::vector<Var> TmPair::parameters() const {
  auto out = level1.parameters();
  auto second = level2.parameters();
  out.insert(out.end(), second.begin(), second.end());
  return out;
}

void TmPair::freeze() {
  level1.freeze();
  level2.freeze();
}

TmPair make_tm_pair(const SegNet& net, int domain_index, std::uint64_t seed, TmBranches branches) {
  const int c = net.num_classes();
  TmPair pair{TargetMemory(net.mid_channels(), c, domain_index, derive_seed(seed, {1}), branches,
                       fmt::format("tm{}.level1", domain_index)),
          TargetMemory(net.top_channels(), c, domain_index, derive_seed(seed, {2}), branches,
                       fmt::format("tm{}.level2", domain_index))};
  const auto tm_params = param_count(ParameterGroup{"tm", pair.parameters()});
  const auto net_params = param_count(ParameterGroup{"segnet", net.parameters()});
  if (static_cast<double>(tm_params) >= kMaxTmFraction * static_cast<double>(net_params)) {
    throw std::invalid_argument(fmt::format("TM pair has {} parameters, not below {} of the network's {}", tm_params,
                                            kMaxTmFraction, net_params));
  }
  return pair;
}

void TmStore::store(int domain_index, TmPair pair) {
  if (pairs_.count(domain_index)) throw std::logic_error(fmt::format("TM for domain {} already stored", domain_index));
  pair.freeze();
  pairs_.emplace(domain_index, std::move(pair));
}

const TmPair& TmStore::at(int domain_index) const {
  auto it = pairs_.find(domain_index);
  if (it == pairs_.end()) throw std::out_of_range(fmt::format("no stored TM for domain {}", domain_index));
  return it->second;
}

std::vector<int> TmStore::domains() const {
  std::vector<int> out;
  for (const auto& [k, v] : pairs_) out.push_back(k);
  return out;
}

FusedOutputs fused_forward(const SegNet& net, const TmPair* tms, const Var& x) {
  FusedOutputs out;
  out.base = net.forward(x);
  if (!tms) {
    out.plus1 = out.base.logits1;
    out.plus2 = out.base.logits2;
    return out;
  }
  if (tms->level1.c_in() != net.mid_channels() || tms->level2.c_in() != net.top_channels() ||
      tms->level1.c_out() != net.num_classes() || tms->level2.c_out() != net.num_classes()) {
    throw std::invalid_argument("fused_forward: TM dimensions do not match the network");
  }
  out.plus1 = ops::add(out.base.logits1, tms->level1.forward(out.base.feat_mid));
  out.plus2 = ops::add(out.base.logits2, tms->level2.forward(out.base.feat_top));
  return out;
}

}  // namespace etm::models
