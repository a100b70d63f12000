#pragma once

#include <array>
#include <string_view>

#include "etm/core/autograd.hpp"
#include "etm/core/int_tensor.hpp"

namespace ETM_NS::losses {

inline constexpr int kIgnoreIndex = 255;

/// Sum reproduces the literal per-map sums; Mean divides by the element count
/// and is what training uses so loss weights do not depend on resolution.
enum class Reduction { Sum, Mean };

enum class AdversarialKind { DHA, GAN, GeoGAN };

AdversarialKind parse_adversarial_kind(std::string_view name);
std::string_view to_string(AdversarialKind kind);

/// Double hinge discriminator loss: (1 - z_s)+ + (1 + z_t)+ over all positions.
Var dha_discriminator_loss(const Var& z_s, const Var& z_t, Reduction reduction = Reduction::Sum);

/// ReLU-gated generator loss: (z_s - z_t)+ over all positions.
Var dha_adversarial_loss(const Var& z_s, const Var& z_t, Reduction reduction = Reduction::Sum);

/// Cross-entropy over non-ignored pixels (always a mean). Logits [B,C,h,w] are
/// bilinearly resized to the label size [B,H,W] first.
Var segmentation_loss(const Var& logits, const IntTensor& labels, int ignore_index = kIgnoreIndex);

/// Per-pixel softened cross-entropy -sum_c softmax(old/T)_c log softmax(new/T)_c,
/// averaged over pixels. The teacher logits take no gradient.
Var distillation_loss(const Var& logits_new, const Tensor& logits_old, real temperature);

/// Discriminator-side and generator-side losses for one adversarial family.
/// GAN scores are logits through a stable sigmoid cross-entropy.
Var discriminator_loss(AdversarialKind kind, const Var& z_s, const Var& z_t, Reduction reduction);
Var adversarial_loss(AdversarialKind kind, const Var& z_s, const Var& z_t, Reduction reduction);

struct AdversarialLosses {
  Var disc;
  Var adv;
};

/// GAN: disc = BCE(z_s->1) + BCE(z_t->0), adv = BCE(z_t->1).
/// GeoGAN: disc = double hinge, adv = -sum z_t.
AdversarialLosses baseline_adversarial_losses(AdversarialKind kind, const Var& z_s, const Var& z_t,
                                              Reduction reduction = Reduction::Sum);

/// Per-level loss weights; index 0 is the mid-level head, 1 the top head.
struct LossWeights {
  std::array<real, 2> seg{0.1f, 1.0f};
  std::array<real, 2> adv{0.0002f, 0.001f};
  std::array<real, 2> distill{0.02f, 0.2f};
  real temperature = 2.0f;
};

void validate(const LossWeights& weights);

struct LossBundle {
  std::array<double, 2> seg{};
  std::array<double, 2> adv{};
  std::array<double, 2> distill{};
  std::array<double, 2> disc{};
  double weighted_total_generator = 0.0;

  bool all_finite() const;
};

double weighted_generator_total(const LossWeights& weights, const LossBundle& bundle);

}  // namespace etm::losses
