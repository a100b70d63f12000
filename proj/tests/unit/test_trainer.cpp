#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "etm/core/ops.hpp"
#include "etm/data/domain.hpp"
#include "etm/trainer/trainer.hpp"

using namespace etm;
using namespace etm::trainer;

namespace {

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.iter_max = 4;
  cfg.source_iters = 3;
  cfg.segnet.encoder_channels = {8, 8, 16, 16};
  cfg.segnet.head_channels = 8;
  cfg.discriminator.base_channels = 4;
  cfg.eval_batch = 4;
  cfg.seed = 5;
  return cfg;
}

DomainData small_domain(int which, std::uint64_t seed = 11) {
  auto spec = data::etm_toy_preset()[static_cast<std::size_t>(which)];
  spec.height = spec.width = 32;
  spec.train_samples = 6;
  spec.val_samples = 4;
  return {data::generate_domain(spec, seed + which, data::Split::Train),
          data::generate_domain(spec, seed + which, data::Split::Val)};
}

struct Fixture {
  DomainData source = small_domain(0);
  std::vector<DomainData> targets{small_domain(1), small_domain(2)};
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::vector<Tensor> values(const std::vector<Var>& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.value());
  return out;
}

bool same(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!bitwise_equal(a[i], b[i])) return false;
  }
  return true;
}

TrainBatch first_batch(const Fixture& f, int target) {
  const std::vector<std::int64_t> idx{0, 1};
  return {f.source.train.image_batch(idx), f.source.train.label_batch(idx),
          f.targets[static_cast<std::size_t>(target - 1)].train.image_batch(idx)};
}

// State positioned at the start of target `index` with a network that has seen
// some source training.
ContinualState state_at(const TrainConfig& cfg, int index) {
  ContinualState s;
  s.segnet = models::SegNet(cfg.segnet, 3);
  train_source_only(cfg, fixture().source.train, s.segnet);
  s.completed = index - 1;
  s.current.emplace(begin_domain(cfg, s.segnet, index));
  return s;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(validate(small_config()));
  auto bad = small_config();
  bad.iter_max = 0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = small_config();
  bad.base_lr_disc = 0.0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = small_config();
  bad.ablation.branches = {false, false};
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad.ablation.use_tm = false;
  CHECK_NOTHROW(validate(bad));
}

TEST_CASE("run_continual rejects an empty target list and unlabelled sources") {
  const auto& f = fixture();
  CHECK_THROWS_AS(run_continual(small_config(), f.source, {}), std::invalid_argument);
  DomainData unlabelled = f.source;
  unlabelled.train.labels.reset();
  CHECK_THROWS_AS(run_continual(small_config(), unlabelled, f.targets), std::invalid_argument);
}

TEST_CASE("a single target never distils") {
  const auto& f = fixture();
  int steps = 0;
  RunHooks hooks;
  hooks.on_step = [&](int, int, const losses::LossBundle& b) {
    ++steps;
    CHECK(b.distill[0] == 0.0);
    CHECK(b.distill[1] == 0.0);
  };
  const auto state = run_continual(small_config(), f.source, {f.targets[0]}, hooks);
  CHECK(steps == small_config().iter_max);
  CHECK(state.tm_store.domains() == std::vector<int>{1});
}

TEST_CASE("two targets: store holds both frozen TMs and no discriminator survives") {
  const auto& f = fixture();
  std::vector<Tensor> tm1_at_finish;
  std::vector<std::string> lines;
  RunHooks hooks;
  hooks.on_domain_complete = [&](const ContinualState& s) {
    CHECK_FALSE(s.current.has_value());
    if (s.completed == 1) tm1_at_finish = values(s.tm_store.at(1).parameters());
  };
  hooks.on_metrics_line = [&](const std::string& l) { lines.push_back(l); };
  hooks.on_step = [&](int d, int, const losses::LossBundle& b) {
    if (d == 2) CHECK(b.distill[1] > 0.0);
  };
  const auto state = run_continual(small_config(), f.source, f.targets, hooks);

  CHECK(state.tm_store.domains() == std::vector<int>{1, 2});
  CHECK(state.tm_store.at(1).level1.frozen());
  CHECK(state.tm_store.at(2).level2.frozen());
  CHECK_FALSE(state.current.has_value());
  CHECK(state.completed == 2);

  // The first TM was never touched while adapting to the second target.
  CHECK(same(values(state.tm_store.at(1).parameters()), tm1_at_finish));
  for (const auto& p : state.tm_store.at(1).parameters()) CHECK_FALSE(p.has_grad());

  const auto& h = state.history;
  CHECK(h.domains == std::vector<std::string>{"source", "T1", "T2"});
  for (auto [j, d] : {std::pair{0, 0}, {1, 0}, {1, 1}, {2, 0}, {2, 1}, {2, 2}}) CHECK(h.has(j, d));
  CHECK(h.source_only.size() == 2);

  // One log line per evaluation: 1 + 2 + 3.
  REQUIRE(lines.size() == 6);
  CHECK(lines[0].starts_with("0\t3\tsource\t"));
  CHECK(lines[5].starts_with("2\t4\tT2\t"));
}

TEST_CASE("identical config and seed give identical runs") {
  const auto& f = fixture();
  const auto a = run_continual(small_config(), f.source, f.targets);
  const auto b = run_continual(small_config(), f.source, f.targets);
  CHECK(a.history.entries == b.history.entries);
  CHECK(a.history.source_only == b.history.source_only);
  CHECK(same(values(a.segnet.parameters()), values(b.segnet.parameters())));
  CHECK(metrics::history_to_csv(a.history) == metrics::history_to_csv(b.history));

  auto other = small_config();
  other.seed = 6;
  const auto c = run_continual(other, f.source, f.targets);
  CHECK_FALSE(same(values(a.segnet.parameters()), values(c.segnet.parameters())));
}

TEST_CASE("resuming after a finished domain reproduces the uninterrupted run") {
  const auto& f = fixture();
  const auto cfg = small_config();
  std::optional<ContinualState> saved;
  RunHooks hooks;
  hooks.on_domain_complete = [&](const ContinualState& s) {
    if (s.completed != 1) return;
    ContinualState copy;
    copy.segnet = s.segnet;
    for (int d : s.tm_store.domains()) copy.tm_store.store(d, s.tm_store.at(d));
    copy.completed = s.completed;
    copy.history = s.history;
    saved = std::move(copy);
  };
  const auto full = run_continual(cfg, f.source, f.targets, hooks);
  REQUIRE(saved.has_value());
  const auto resumed = run_continual(cfg, f.source, f.targets, {}, std::move(saved));
  CHECK(resumed.history.entries == full.history.entries);
  CHECK(same(values(resumed.segnet.parameters()), values(full.segnet.parameters())));
  CHECK(same(values(resumed.tm_store.at(2).parameters()), values(full.tm_store.at(2).parameters())));
}

TEST_CASE("learning-rate groups") {
  const models::SegNet net(small_config().segnet, 1);
  const auto tms = models::make_tm_pair(net, 1, 2);
  const auto first = make_param_groups(net, &tms, 1);
  REQUIRE(first.size() == 3);
  CHECK(first[0].name == "encoder");
  CHECK(first[0].lr_scale == doctest::Approx(0.1));
  CHECK(first[1].name == "heads");
  CHECK(first[1].lr_scale == doctest::Approx(1.0));
  CHECK(first[2].lr_scale == doctest::Approx(1.0));
  CHECK(param_count(first) == static_cast<std::int64_t>(param_count(ParameterGroup{"all", net.parameters(), 1}) +
                                                         param_count(ParameterGroup{"tm", tms.parameters(), 1})));

  const auto later = make_param_groups(net, &tms, 2);
  CHECK(later[0].lr_scale == doctest::Approx(0.1));
  CHECK(later[1].lr_scale == doctest::Approx(0.1));
  CHECK(later[2].lr_scale == doctest::Approx(1.0));

  CHECK(make_param_groups(net, nullptr, 3).size() == 2);
  CHECK_THROWS_AS(make_param_groups(net, &tms, 0), std::invalid_argument);
}

TEST_CASE("teacher snapshot") {
  auto cfg = small_config();
  auto state = state_at(cfg, 2);
  REQUIRE(state.current->teacher.has_value());
  const auto& teacher = *state.current->teacher;
  for (const auto& p : teacher.parameters()) CHECK_FALSE(p.requires_grad());

  const Var x(first_batch(fixture(), 2).source_images);
  const auto at_snapshot = teacher.forward(x).logits2.value();
  CHECK(bitwise_equal(at_snapshot, state.segnet.forward(x).logits2.value()));

  const auto teacher_params = values(teacher.parameters());
  for (int i = 0; i < 100; ++i) train_domain_step(state, first_batch(fixture(), 2), cfg, i + 1);
  CHECK(same(values(teacher.parameters()), teacher_params));
  CHECK(bitwise_equal(teacher.forward(x).logits2.value(), at_snapshot));
  CHECK_FALSE(bitwise_equal(state.segnet.forward(x).logits2.value(), at_snapshot));

  // Student equal to teacher: the distillation term sits at the softened entropy floor.
  const auto out = teacher.forward(x);
  const real t = cfg.loss_weights.temperature;
  const double d = losses::distillation_loss(out.logits2, out.logits2.value(), t).value().item();
  const Tensor p = ops::softmax_channels(ops::scale(out.logits2, 1 / t)).value();
  const Tensor logp = ops::log_softmax_channels(ops::scale(out.logits2, 1 / t)).value();
  double entropy = 0.0;
  for (std::int64_t i = 0; i < p.numel(); ++i) entropy -= static_cast<double>(p[i]) * logp[i];
  entropy /= static_cast<double>(p.numel() / p.dim(1));
  CHECK(d == doctest::Approx(entropy).epsilon(1e-5));
}

TEST_CASE("distillation never reaches the TM") {
  // Paired runs from identical states, one with distillation weighted and one without.
  auto with = small_config();
  auto without = small_config();
  without.loss_weights.distill = {0.0f, 0.0f};
  auto a = state_at(with, 2);
  auto b = state_at(without, 2);
  REQUIRE(same(values(a.current->tms->parameters()), values(b.current->tms->parameters())));

  // Right after the snapshot the student equals the teacher and the
  // distillation gradient vanishes, so the second step is the informative one.
  const auto batch = first_batch(fixture(), 2);
  train_domain_step(a, batch, with, 1);
  train_domain_step(b, batch, without, 1);
  CHECK(same(values(a.segnet.parameters()), values(b.segnet.parameters())));
  const auto la = train_domain_step(a, batch, with, 2);
  train_domain_step(b, batch, without, 2);
  CHECK(la.distill[1] > 0.0);
  CHECK(same(values(a.current->tms->parameters()), values(b.current->tms->parameters())));
  CHECK_FALSE(same(values(a.segnet.encoder_parameters()), values(b.segnet.encoder_parameters())));
}

TEST_CASE("generator and discriminator phases alternate") {
  const auto cfg = small_config();
  auto state = state_at(cfg, 1);
  auto& run = *state.current;
  const auto batch = first_batch(fixture(), 1);

  std::vector<Var> disc_params;
  for (const auto& d : run.discs) {
    for (const auto& p : d.parameters()) disc_params.push_back(p);
  }
  std::vector<Var> gen_params = state.segnet.parameters();
  for (const auto& p : run.tms->parameters()) gen_params.push_back(p);

  const auto disc_before = values(disc_params);
  const auto gen_before = values(gen_params);
  losses::LossBundle bundle;
  const auto outputs = generator_phase(state, batch, cfg, bundle);
  CHECK(same(values(disc_params), disc_before));
  for (const auto& p : disc_params) CHECK_FALSE(p.has_grad());
  CHECK_FALSE(same(values(gen_params), gen_before));
  CHECK(bundle.seg[1] > 0.0);

  const auto gen_mid = values(gen_params);
  discriminator_phase(state, outputs, cfg, bundle);
  CHECK(same(values(gen_params), gen_mid));
  CHECK_FALSE(same(values(disc_params), disc_before));
  CHECK(bundle.all_finite());
}

TEST_CASE("without adversarial and distillation weights the step is supervised only") {
  auto cfg = small_config();
  cfg.loss_weights.adv = {0.0f, 0.0f};
  cfg.loss_weights.distill = {0.0f, 0.0f};
  auto state = state_at(cfg, 2);
  const auto batch = first_batch(fixture(), 2);

  // Reference: the same update computed by hand from the segmentation terms.
  auto ref_net = state.segnet;
  auto ref_tms = *state.current->tms;
  auto groups = make_param_groups(ref_net, &ref_tms, 2);
  {
    const auto out = models::fused_forward(ref_net, &ref_tms, Var(batch.source_images));
    const Var total = ops::add(ops::scale(losses::segmentation_loss(out.plus1, batch.source_labels), cfg.loss_weights.seg[0]),
                               ops::scale(losses::segmentation_loss(out.plus2, batch.source_labels), cfg.loss_weights.seg[1]));
    total.backward();
    for (auto& g : groups) {
      SgdState s{static_cast<real>(cfg.momentum), static_cast<real>(cfg.weight_decay), {}};
      sgd_step(g, s, static_cast<real>(cfg.base_lr_seg));
    }
  }
  train_domain_step(state, batch, cfg, 1);
  CHECK(same(values(state.segnet.parameters()), values(ref_net.parameters())));
  CHECK(same(values(state.current->tms->parameters()), values(ref_tms.parameters())));
}

TEST_CASE("no-TM mode skips TM creation") {
  const auto& f = fixture();
  auto cfg = small_config();
  cfg.ablation.use_tm = false;
  cfg.ablation.adv_loss = losses::AdversarialKind::GAN;
  const auto run = begin_domain(cfg, models::SegNet(cfg.segnet, 1), 1);
  CHECK_FALSE(run.tms.has_value());
  CHECK(run.groups.size() == 2);
  const auto state = run_continual(cfg, f.source, f.targets);
  CHECK(state.tm_store.size() == 0);
  CHECK(state.history.has(2, 1));
  CHECK(eval_tms(state, 1) == nullptr);
}

TEST_CASE("missing teacher and non-finite losses are reported") {
  auto no_distill = small_config();
  no_distill.ablation.distill = false;
  auto state = state_at(no_distill, 2);
  CHECK_FALSE(state.current->teacher.has_value());
  CHECK_NOTHROW(train_domain_step(state, first_batch(fixture(), 2), no_distill, 1));
  CHECK_THROWS_AS(train_domain_step(state, first_batch(fixture(), 2), small_config(), 2), std::logic_error);

  state.segnet.head1().classifier().bias().mutable_value()[0] = std::numeric_limits<real>::quiet_NaN();
  try {
    train_domain_step(state, first_batch(fixture(), 2), no_distill, 7);
    FAIL("expected divergence");
  } catch (const TrainingDivergence& e) {
    CHECK(e.iteration == 7);
    CHECK(e.domain == 2);
    CHECK(e.term == "seg1");
    CHECK(std::string(e.what()).find("iteration 7") != std::string::npos);
  }
}

TEST_CASE("source training with zero iterations leaves the network untouched") {
  auto cfg = small_config();
  cfg.source_iters = 0;
  models::SegNet net(cfg.segnet, 9);
  const auto before = values(net.parameters());
  CHECK(train_source_only(cfg, fixture().source.train, net).empty());
  CHECK(same(values(net.parameters()), before));
}

TEST_CASE("prediction and evaluation") {
  const models::SegNet net(small_config().segnet, 4);
  const auto& val = fixture().source.val;
  const IntTensor pred = predict(net, nullptr, val.images, val.height(), val.width());
  CHECK(pred.shape() == Shape{val.size(), val.height(), val.width()});
  for (auto v : pred.data()) CHECK((v >= 0 && v < 4));

  const auto one = evaluate_confusion(net, nullptr, val, 1, 1);
  CHECK(one == evaluate_confusion(net, nullptr, val, 3, 2));
  CHECK(one.total() == val.size() * val.height() * val.width());
  CHECK(evaluate_miou(net, nullptr, val, 4) == metrics::miou(one).miou);
  CHECK_THROWS_AS(evaluate_confusion(net, nullptr, fixture().targets[0].train, 4), std::invalid_argument);
}

TEST_CASE("source training on the benchmark converges" * doctest::timeout(300)) {
  // Calibration of the synthetic benchmark: 1000 supervised iterations at the
  // default learning rate must clear 0.8 mIoU on the held-out source split.
  const auto spec = data::etm_toy_preset()[0];
  const auto train = data::generate_domain(spec, 7, data::Split::Train);
  const auto val = data::generate_domain(spec, 7, data::Split::Val);
  TrainConfig cfg;
  models::SegNet net(cfg.segnet, 1);
  const auto trace = train_source_only(cfg, train, net);
  REQUIRE(trace.size() == 1000);

  std::vector<double> windows;
  for (std::size_t w = 0; w < trace.size(); w += 200) {
    windows.push_back(std::accumulate(trace.begin() + static_cast<std::ptrdiff_t>(w),
                                      trace.begin() + static_cast<std::ptrdiff_t>(w + 200), 0.0) /
                      200.0);
  }
  for (std::size_t w = 1; w < windows.size(); ++w) CHECK(windows[w] < windows[w - 1]);
  const double m = evaluate_miou(net, nullptr, val, 10, 1);
  MESSAGE("source mIoU after 1000 iterations: " << m);
  CHECK(m > 0.8);
}
