#include "etm/models/segnet.hpp"

#include <stdexcept>

#include <fmt/format.h>

namespace ETM_NS::models {

AsppHead::AsppHead(const std::string& name, int in_channels, int mid_channels, int num_classes, int dilation,
                   Rng& rng)
    : local_(name + ".local", in_channels, mid_channels, 3, {1, 1, 1}, he_stddev(in_channels, 3), rng),
      dilated_(name + ".dilated", in_channels, mid_channels, 3, {1, dilation, dilation}, he_stddev(in_channels, 3),
               rng),
      classifier_(name + ".classifier", mid_channels, num_classes, 1, {}, 0.01f, rng) {}

Var AsppHead::operator()(const Var& x) const {
  return classifier_(ops::relu(ops::add(local_(x), dilated_(x))));
}

void AsppHead::append_parameters(std::vector<Var>& out) const {
  local_.append_parameters(out);
  dilated_.append_parameters(out);
  classifier_.append_parameters(out);
}

SegNet::SegNet(const SegNetConfig& config, std::uint64_t seed) : config_(config) {
  if (config.num_classes < 2) throw std::invalid_argument("SegNet needs at least 2 classes");
  Rng rng = make_rng(seed, {0x5e9});
  int in = 3;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const int out = config.encoder_channels[i];
    const int stride = i == 0 ? 1 : 2;
    encoder_[i] = Conv2d(fmt::format("encoder.block{}", i + 1), in, out, 3, {stride, 1, 1}, he_stddev(in, 3), rng);
    in = out;
  }
  head1_ = AsppHead("head1", mid_channels(), config.head_channels, config.num_classes, config.head_dilation, rng);
  head2_ = AsppHead("head2", top_channels(), config.head_channels, config.num_classes, config.head_dilation, rng);
}

SegNetOutputs SegNet::forward(const Var& x) const {
  if (x.value().rank() != 4 || x.dim(1) != 3) {
    throw std::invalid_argument(fmt::format("SegNet expects [B,3,H,W], got {}", shape_str(x.shape())));
  }
  if (x.dim(2) % kTopStride != 0 || x.dim(3) % kTopStride != 0) {
    throw std::invalid_argument(
        fmt::format("input size {}x{} is not divisible by the network stride {}", x.dim(2), x.dim(3), kTopStride));
  }
  Var h = ops::relu(encoder_[0](x));
  h = ops::relu(encoder_[1](h));
  Var mid = ops::relu(encoder_[2](h));
  Var top = ops::relu(encoder_[3](mid));
  return {mid, top, head1_(mid), head2_(top)};
}

std::vector<Var> SegNet::encoder_parameters() const {
  std::vector<Var> out;
  for (const auto& conv : encoder_) conv.append_parameters(out);
  return out;
}

std::vector<Var> SegNet::head1_parameters() const {
  std::vector<Var> out;
  head1_.append_parameters(out);
  return out;
}

std::vector<Var> SegNet::head2_parameters() const {
  std::vector<Var> out;
  head2_.append_parameters(out);
  return out;
}

std::vector<Var> SegNet::parameters() const {
  auto out = encoder_parameters();
  head1_.append_parameters(out);
  head2_.append_parameters(out);
  return out;
}

void SegNet::set_requires_grad(bool flag) {
  for (auto& p : parameters()) p.set_requires_grad(flag);
}

}  // namespace etm::models
