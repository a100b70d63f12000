#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "etm/models/segnet.hpp"

namespace ETM_NS::models {

/// Which TM branches exist. Both on is the full module; the single-branch
/// variants back the module ablation.
struct TmBranches {
  bool conv = true;
  bool pool = true;
};

/// Per-domain memory: 1x1 conv branch plus a global-average-pool -> 1x1 conv ->
/// ReLU branch broadcast back over the map. Output is the sum of the branches.
class TargetMemory {
 public:
  static constexpr real kInitStddev = 0.01f;

  TargetMemory() = default;
  TargetMemory(int c_in, int c_out, int domain_index, std::uint64_t seed, TmBranches branches = {},
               const std::string& name = "tm");

  Var forward(const Var& h_prev) const;

  std::vector<Var> parameters() const;
  void freeze();
  bool frozen() const { return frozen_; }
  int domain_index() const { return domain_index_; }
  int c_in() const { return c_in_; }
  int c_out() const { return c_out_; }
  TmBranches branches() const { return {conv_branch_.has_value(), pool_branch_.has_value()}; }

  std::optional<Conv2d>& conv_branch() { return conv_branch_; }
  std::optional<Conv2d>& pool_branch() { return pool_branch_; }

 private:
  int c_in_ = 0;
  int c_out_ = 0;
  int domain_index_ = 0;
  bool frozen_ = false;
  std::optional<Conv2d> conv_branch_;
  std::optional<Conv2d> pool_branch_;
};

/// Fresh TM: normal(0, 0.01) weights, zero biases, trainable.
TargetMemory tm_init(int c_in, int c_out, int domain_index, std::uint64_t seed, TmBranches branches = {});

/// TMs for both head levels of one domain.
struct TmPair {
  TargetMemory level1;  // attached to head1 (mid features)
  TargetMemory level2;  // attached to head2 (top features)

  std::vector<Var> parameters() const;
  void freeze();
};

/// TM pairs must stay a small fraction of the segmentation network's size.
inline constexpr double kMaxTmFraction = 0.05;

/// Throws if the pair would reach kMaxTmFraction of the network's parameters.
TmPair make_tm_pair(const SegNet& net, int domain_index, std::uint64_t seed, TmBranches branches = {});

/// Finished domains' memories keyed by domain index. Every entry is frozen.
class TmStore {
 public:
  void store(int domain_index, TmPair pair);
  bool contains(int domain_index) const { return pairs_.count(domain_index) != 0; }
  const TmPair& at(int domain_index) const;
  std::vector<int> domains() const;
  std::size_t size() const { return pairs_.size(); }

 private:
  std::map<int, TmPair> pairs_;
};

struct FusedOutputs {
  SegNetOutputs base;
  Var plus1;  // logits1 + TM1(feat_mid)
  Var plus2;  // logits2 + TM2(feat_top), the final prediction
};

/// Segnet forward with a TM pair attached at both heads. A null pair gives the
/// bare network (plus == logits).
FusedOutputs fused_forward(const SegNet& net, const TmPair* tms, const Var& x);

}  // namespace etm::models
