#include "etm/losses/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <fmt/format.h>

#include "etm/core/ops.hpp"

namespace ETM_NS::losses {

namespace {

Tensor* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs.at(i);
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(
        fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()), shape_str(b.shape())));
  }
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Elementwise loss over paired score maps. term(s, t) returns {value, d/ds, d/dt}.
struct PairTerm {
  double value, d_source, d_target;
};

template <typename Term>
Var paired_loss(const Var& z_s, const Var& z_t, Reduction reduction, const char* op, Term term) {
  require_same_shape(z_s, z_t, op);
  const std::int64_t n = z_s.numel();
  const double norm = reduction == Reduction::Mean ? 1.0 / static_cast<double>(n) : 1.0;
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) total += term(z_s.value()[i], z_t.value()[i]).value;
  return make_result(Tensor({1}, {static_cast<real>(total * norm)}), {z_s, z_t}, [term, n, norm](Node& self) {
    Tensor* gs = input_grad(self, 0);
    Tensor* gt = input_grad(self, 1);
    const Tensor& s = self.inputs[0]->value;
    const Tensor& t = self.inputs[1]->value;
    const double g = self.grad[0] * norm;
    for (std::int64_t i = 0; i < n; ++i) {
      const PairTerm r = term(s[i], t[i]);
      if (gs) (*gs)[i] += static_cast<real>(g * r.d_source);
      if (gt) (*gt)[i] += static_cast<real>(g * r.d_target);
    }
  });
}

PairTerm double_hinge(real s, real t) {
  const double a = 1.0 - s;
  const double b = 1.0 + t;
  return {(a > 0.0 ? a : 0.0) + (b > 0.0 ? b : 0.0), a > 0.0 ? -1.0 : 0.0, b > 0.0 ? 1.0 : 0.0};
}

PairTerm gated_difference(real s, real t) {
  const double d = static_cast<double>(s) - t;
  return d > 0.0 ? PairTerm{d, 1.0, -1.0} : PairTerm{0.0, 0.0, 0.0};
}

PairTerm gan_discriminator(real s, real t) {
  // BCE(s -> 1) = softplus(-s), BCE(t -> 0) = softplus(t)
  return {softplus(-s) + softplus(t), sigmoid(s) - 1.0, sigmoid(t)};
}

PairTerm gan_generator(real, real t) { return {softplus(-t), 0.0, sigmoid(t) - 1.0}; }

PairTerm geogan_generator(real, real t) { return {-static_cast<double>(t), 0.0, -1.0}; }

}  // namespace

AdversarialKind parse_adversarial_kind(std::string_view name) {
  if (name == "DHA") return AdversarialKind::DHA;
  if (name == "GAN") return AdversarialKind::GAN;
  if (name == "GeoGAN") return AdversarialKind::GeoGAN;
  throw std::invalid_argument(fmt::format("unknown adversarial loss '{}' (expected DHA, GAN or GeoGAN)", name));
}

std::string_view to_string(AdversarialKind kind) {
  switch (kind) {
    case AdversarialKind::DHA: return "DHA";
    case AdversarialKind::GAN: return "GAN";
    case AdversarialKind::GeoGAN: return "GeoGAN";
  }
  throw std::invalid_argument("unknown adversarial kind");
}

Var dha_discriminator_loss(const Var& z_s, const Var& z_t, Reduction reduction) {
  return paired_loss(z_s, z_t, reduction, "dha_discriminator_loss", double_hinge);
}

Var dha_adversarial_loss(const Var& z_s, const Var& z_t, Reduction reduction) {
  return paired_loss(z_s, z_t, reduction, "dha_adversarial_loss", gated_difference);
}

Var discriminator_loss(AdversarialKind kind, const Var& z_s, const Var& z_t, Reduction reduction) {
  switch (kind) {
    case AdversarialKind::DHA:
    case AdversarialKind::GeoGAN: return dha_discriminator_loss(z_s, z_t, reduction);
    case AdversarialKind::GAN: return paired_loss(z_s, z_t, reduction, "gan_discriminator_loss", gan_discriminator);
  }
  throw std::invalid_argument("unknown adversarial kind");
}

Var adversarial_loss(AdversarialKind kind, const Var& z_s, const Var& z_t, Reduction reduction) {
  switch (kind) {
    case AdversarialKind::DHA: return dha_adversarial_loss(z_s, z_t, reduction);
    case AdversarialKind::GAN: return paired_loss(z_s, z_t, reduction, "gan_adversarial_loss", gan_generator);
    case AdversarialKind::GeoGAN:
      return paired_loss(z_s, z_t, reduction, "geogan_adversarial_loss", geogan_generator);
  }
  throw std::invalid_argument("unknown adversarial kind");
}

AdversarialLosses baseline_adversarial_losses(AdversarialKind kind, const Var& z_s, const Var& z_t,
                                              Reduction reduction) {
  if (kind == AdversarialKind::DHA) throw std::invalid_argument("baseline losses are GAN or GeoGAN");
  return {discriminator_loss(kind, z_s, z_t, reduction), adversarial_loss(kind, z_s, z_t, reduction)};
}

Var segmentation_loss(const Var& logits, const IntTensor& labels, int ignore_index) {
  if (logits.value().rank() != 4 || labels.rank() != 3 || labels.dim(0) != logits.dim(0)) {
    throw std::invalid_argument(fmt::format("segmentation_loss: logits {} incompatible with labels {}",
                                            shape_str(logits.shape()), shape_str(labels.shape())));
  }
  const std::int64_t b = logits.dim(0), c = logits.dim(1), h = labels.dim(1), w = labels.dim(2), hw = h * w;
  Var resized = (logits.dim(2) == h && logits.dim(3) == w) ? logits : ops::resize_bilinear(logits, h, w);
  Var logp = ops::log_softmax_channels(resized);

  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    const std::int32_t label = labels[i];
    if (label == ignore_index) continue;
    if (label < 0 || label >= c) {
      throw std::invalid_argument(fmt::format("segmentation_loss: label {} out of range [0,{})", label, c));
    }
    ++valid;
  }
  if (valid == 0) throw std::invalid_argument("segmentation_loss: no valid pixels");

  double total = 0.0;
  for (std::int64_t n = 0; n < b; ++n) {
    for (std::int64_t p = 0; p < hw; ++p) {
      const std::int32_t label = labels[n * hw + p];
      if (label != ignore_index) total -= logp.value()[n * c * hw + label * hw + p];
    }
  }
  const double norm = 1.0 / static_cast<double>(valid);
  return make_result(Tensor({1}, {static_cast<real>(total * norm)}), {logp},
                     [labels, b, c, hw, norm, ignore_index](Node& self) {
                       Tensor* g = input_grad(self, 0);
                       if (!g) return;
                       const auto gv = static_cast<real>(-self.grad[0] * norm);
                       for (std::int64_t n = 0; n < b; ++n) {
                         for (std::int64_t p = 0; p < hw; ++p) {
                           const std::int32_t label = labels[n * hw + p];
                           if (label != ignore_index) (*g)[n * c * hw + label * hw + p] += gv;
                         }
                       }
                     });
}

Var distillation_loss(const Var& logits_new, const Tensor& logits_old, real temperature) {
  if (!(temperature > 0.0f)) throw std::invalid_argument("distillation_loss: temperature must be positive");
  if (logits_new.shape() != logits_old.shape() || logits_new.value().rank() != 4) {
    throw std::invalid_argument(fmt::format("distillation_loss: shape mismatch {} vs {}",
                                            shape_str(logits_new.shape()), shape_str(logits_old.shape())));
  }
  const std::int64_t b = logits_new.dim(0), c = logits_new.dim(1), hw = logits_new.dim(2) * logits_new.dim(3);
  const double inv_t = 1.0 / temperature;

  // Softened distributions, per pixel over classes.
  auto soften = [&](const Tensor& logits, Tensor& prob, Tensor* logprob) {
    for (std::int64_t n = 0; n < b; ++n) {
      for (std::int64_t p = 0; p < hw; ++p) {
        const std::int64_t base = n * c * hw + p;
        double mx = logits[base] * inv_t;
        for (std::int64_t k = 1; k < c; ++k) mx = std::max(mx, logits[base + k * hw] * inv_t);
        double denom = 0.0;
        for (std::int64_t k = 0; k < c; ++k) denom += std::exp(logits[base + k * hw] * inv_t - mx);
        const double log_denom = std::log(denom);
        for (std::int64_t k = 0; k < c; ++k) {
          const double lp = logits[base + k * hw] * inv_t - mx - log_denom;
          prob[base + k * hw] = static_cast<real>(std::exp(lp));
          if (logprob) (*logprob)[base + k * hw] = static_cast<real>(lp);
        }
      }
    }
  };
  Tensor teacher(logits_old.shape());
  Tensor student(logits_old.shape());
  Tensor student_log(logits_old.shape());
  soften(logits_old, teacher, nullptr);
  soften(logits_new.value(), student, &student_log);

  double total = 0.0;
  for (std::int64_t i = 0; i < teacher.numel(); ++i) total -= static_cast<double>(teacher[i]) * student_log[i];
  const double pixels = static_cast<double>(b * hw);
  return make_result(Tensor({1}, {static_cast<real>(total / pixels)}), {logits_new},
                     [teacher = std::move(teacher), student = std::move(student), inv_t, pixels](Node& self) {
                       Tensor* g = input_grad(self, 0);
                       if (!g) return;
                       const double scale = self.grad[0] * inv_t / pixels;
                       for (std::int64_t i = 0; i < g->numel(); ++i) {
                         (*g)[i] += static_cast<real>(scale * (static_cast<double>(student[i]) - teacher[i]));
                       }
                     });
}

void validate(const LossWeights& weights) {
  for (std::size_t n = 0; n < 2; ++n) {
    if (weights.seg[n] < 0.0f || weights.adv[n] < 0.0f || weights.distill[n] < 0.0f) {
      throw std::invalid_argument("loss weights must be non-negative");
    }
  }
  if (!(weights.temperature > 0.0f)) throw std::invalid_argument("distillation temperature must be positive");
}

bool LossBundle::all_finite() const {
  for (std::size_t n = 0; n < 2; ++n) {
    if (!std::isfinite(seg[n]) || !std::isfinite(adv[n]) || !std::isfinite(distill[n]) || !std::isfinite(disc[n])) {
      return false;
    }
  }
  return std::isfinite(weighted_total_generator);
}

double weighted_generator_total(const LossWeights& weights, const LossBundle& bundle) {
  double total = 0.0;
  for (std::size_t n = 0; n < 2; ++n) {
    total += weights.seg[n] * bundle.seg[n] + weights.adv[n] * bundle.adv[n] + weights.distill[n] * bundle.distill[n];
  }
  return total;
}

}  // namespace etm::losses
