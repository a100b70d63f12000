#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <fmt/format.h>

#include "criteria.hpp"
#include "etm/core/gradcheck.hpp"
#include "etm/core/random.hpp"
#include "etm/losses/losses.hpp"

static_assert(sizeof(etm::real) == 8, "the gradient suite needs the double-precision core");

namespace acceptance {

using namespace etm;
using losses::AdversarialKind;
using losses::Reduction;

namespace {

constexpr int kPoints = 20;
constexpr double kStep = 1e-4;
constexpr double kTolerance = 1e-3;
constexpr double kMargin = 0.1;

// Scores whose hinge arguments 1 - z and 1 + z stay kMargin away from zero.
Tensor hinge_safe(Shape shape, Rng& rng) {
  Tensor t = normal_tensor(std::move(shape), 1.5, rng);
  for (auto& v : t.data()) {
    for (real kink : {real(-1), real(1)}) {
      if (std::abs(v - kink) < kMargin) v = kink + (v < kink ? -1.5 : 1.5) * kMargin;
    }
  }
  return t;
}

// z_t such that every z_s - z_t is kMargin away from zero.
Tensor gap_safe(const Tensor& zs, Rng& rng) {
  Tensor zt = normal_tensor(zs.shape(), 1.5, rng);
  for (std::int64_t i = 0; i < zt.numel(); ++i) {
    if (std::abs(zs[i] - zt[i]) < kMargin) zt[i] = zs[i] + (zt[i] < zs[i] ? -1.5 : 1.5) * kMargin;
  }
  return zt;
}

struct Check {
  std::string name;
  // Returns the worst relative error at one random point drawn from rng.
  std::function<double(Rng&)> at_point;
};

}  // namespace

Outcome gradient_suite() {
  const Shape score_shape{2, 1, 4, 4};
  auto disc_wrt = [&](AdversarialKind kind, Reduction r) {
    return [=](Rng& rng) {
      const Tensor zs = hinge_safe(score_shape, rng), zt = hinge_safe(score_shape, rng);
      return std::max(
          finite_difference_gradcheck([&](const Var& v) { return losses::discriminator_loss(kind, v, Var(zt), r); },
                                      zs, kStep),
          finite_difference_gradcheck([&](const Var& v) { return losses::discriminator_loss(kind, Var(zs), v, r); },
                                      zt, kStep));
    };
  };
  auto adv_wrt = [&](AdversarialKind kind, Reduction r) {
    return [=](Rng& rng) {
      const Tensor zs = hinge_safe(score_shape, rng);
      const Tensor zt = gap_safe(zs, rng);
      double worst = finite_difference_gradcheck(
          [&](const Var& v) { return losses::adversarial_loss(kind, Var(zs), v, r); }, zt, kStep);
      if (kind == AdversarialKind::DHA) {
        worst = std::max(worst, finite_difference_gradcheck(
                                    [&](const Var& v) { return losses::adversarial_loss(kind, v, Var(zt), r); }, zs,
                                    kStep));
      }
      return worst;
    };
  };

  std::vector<Check> checks;
  for (Reduction r : {Reduction::Sum, Reduction::Mean}) {
    const std::string suffix = r == Reduction::Sum ? "sum" : "mean";
    checks.push_back({"DHA disc/" + suffix, disc_wrt(AdversarialKind::DHA, r)});
    checks.push_back({"DHA adv/" + suffix, adv_wrt(AdversarialKind::DHA, r)});
    checks.push_back({"GAN disc/" + suffix, disc_wrt(AdversarialKind::GAN, r)});
    checks.push_back({"GAN adv/" + suffix, adv_wrt(AdversarialKind::GAN, r)});
    checks.push_back({"GeoGAN disc/" + suffix, disc_wrt(AdversarialKind::GeoGAN, r)});
    checks.push_back({"GeoGAN adv/" + suffix, adv_wrt(AdversarialKind::GeoGAN, r)});
  }
  checks.push_back({"segmentation CE", [](Rng& rng) {
                      IntTensor labels({2, 12, 16}, std::vector<std::int32_t>(384));
                      for (auto& l : labels.data()) l = static_cast<std::int32_t>(rng() % 4);
                      labels.data()[rng() % 384] = losses::kIgnoreIndex;
                      const Tensor logits = normal_tensor({2, 4, 3, 4}, 2.0, rng);
                      return finite_difference_gradcheck(
                          [&](const Var& v) { return losses::segmentation_loss(v, labels); }, logits, kStep);
                    }});
  for (real t : {real(1), real(2), real(4)}) {
    checks.push_back({fmt::format("distillation T'={}", t), [t](Rng& rng) {
                        const Tensor old_logits = normal_tensor({2, 4, 3, 3}, 2.0, rng);
                        const Tensor new_logits = normal_tensor({2, 4, 3, 3}, 2.0, rng);
                        return finite_difference_gradcheck(
                            [&](const Var& v) { return losses::distillation_loss(v, old_logits, t); }, new_logits,
                            kStep);
                      }});
  }

  Outcome out{true, ""};
  std::uint64_t stream = 0;
  for (const auto& c : checks) {
    double worst = 0.0;
    for (int p = 0; p < kPoints; ++p) {
      Rng rng(derive_seed(2024, {stream, static_cast<std::uint64_t>(p)}));
      worst = std::max(worst, c.at_point(rng));
    }
    ++stream;
    const bool ok = worst < kTolerance;
    out.pass = out.pass && ok;
    out.detail += fmt::format("    {:<22} max rel err {:.2e} over {} points{}\n", c.name, worst, kPoints,
                              ok ? "" : "  <-- above 1e-3");
  }
  return out;
}

}  // namespace acceptance
