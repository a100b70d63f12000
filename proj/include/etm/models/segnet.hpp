#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "etm/models/conv.hpp"

namespace ETM_NS::models {

struct SegNetConfig {
  int num_classes = 4;
  std::array<int, 4> encoder_channels{32, 64, 128, 128};
  int head_channels = 32;
  int head_dilation = 4;
};

struct SegNetOutputs {
  Var feat_mid;  // stride 4, after encoder block 3
  Var feat_top;  // stride 8, after encoder block 4
  Var logits1;   // head1(feat_mid)
  Var logits2;   // head2(feat_top)
};

/// Two parallel 3x3 convolutions (dilation 1 and d) summed, ReLU, then a 1x1
/// classifier.
class AsppHead {
 public:
  AsppHead() = default;
  AsppHead(const std::string& name, int in_channels, int mid_channels, int num_classes, int dilation, Rng& rng);

  Var operator()(const Var& x) const;
  void append_parameters(std::vector<Var>& out) const;
  Conv2d& classifier() { return classifier_; }

 private:
  Conv2d local_;
  Conv2d dilated_;
  Conv2d classifier_;
};

/// Segmentation network f: a four-block conv encoder with a classifier head on
/// the mid-level and top-level feature maps.
class SegNet {
 public:
  static constexpr int kMidStride = 4;
  static constexpr int kTopStride = 8;

  SegNet() = default;
  SegNet(const SegNetConfig& config, std::uint64_t seed);

  /// x: [B,3,H,W] with H, W divisible by 8.
  SegNetOutputs forward(const Var& x) const;

  const SegNetConfig& config() const { return config_; }
  int num_classes() const { return config_.num_classes; }
  int mid_channels() const { return config_.encoder_channels[2]; }
  int top_channels() const { return config_.encoder_channels[3]; }

  std::vector<Var> encoder_parameters() const;
  std::vector<Var> head1_parameters() const;
  std::vector<Var> head2_parameters() const;
  /// Encoder, head1, head2, in that order.
  std::vector<Var> parameters() const;

  void set_requires_grad(bool flag);
  AsppHead& head1() { return head1_; }
  AsppHead& head2() { return head2_; }

 private:
  SegNetConfig config_;
  std::array<Conv2d, 4> encoder_;
  AsppHead head1_;
  AsppHead head2_;
};

}  // namespace etm::models
