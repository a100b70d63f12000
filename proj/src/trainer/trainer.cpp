#include "etm/trainer/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include <fmt/format.h>

#include "etm/core/ops.hpp"
#include "etm/core/random.hpp"

namespace etm::trainer {

namespace {

enum Purpose : std::uint64_t {
  kNetInit = 0x6e6574,
  kTmInit = 0x746d,
  kDiscInit = 0x64697363,
  kSourceBatches = 0x737263,
  kTargetBatches = 0x746774,
};

constexpr real kEncoderScale = 0.1f;
constexpr real kLaterHeadScale = 0.1f;

void check_finite(double value, int domain, int iteration, const std::string& term) {
  if (!std::isfinite(value)) throw TrainingDivergence(domain, iteration, term);
}

void zero_all(std::span<ParameterGroup> groups) {
  for (auto& g : groups) zero_grad(g);
}

Var weighted_sum(const std::vector<std::pair<real, Var>>& terms) {
  Var total;
  for (const auto& [w, v] : terms) {
    if (w == 0.0f) continue;
    Var t = ops::scale(v, w);
    total = total.defined() ? ops::add(total, t) : t;
  }
  return total;
}

void emit(const RunHooks& hooks, int domain, int iteration, const std::string& eval_domain, double value) {
  if (hooks.on_metrics_line) hooks.on_metrics_line(fmt::format("{}\t{}\t{}\t{:.17g}", domain, iteration, eval_domain, value));
}

void check_inputs(const TrainConfig& cfg, const DomainData& source, const std::vector<DomainData>& targets) {
  validate(cfg);
  if (targets.empty()) throw std::invalid_argument("run_continual: at least one target domain is required");
  if (!source.train.labels) throw std::invalid_argument(fmt::format("source domain {} has no labels", source.train.name));
  auto check_val = [&](const DomainData& d) {
    if (!d.val.labels) throw std::invalid_argument(fmt::format("validation split of {} has no labels", d.val.name));
    if (d.train.num_classes != cfg.segnet.num_classes || d.val.num_classes != cfg.segnet.num_classes) {
      throw std::invalid_argument(fmt::format("domain {} has {} classes, the network predicts {}", d.train.name,
                                              d.train.num_classes, cfg.segnet.num_classes));
    }
  };
  check_val(source);
  for (const auto& t : targets) check_val(t);
}

}  // namespace

TrainingDivergence::TrainingDivergence(int d, int it, const std::string& t)
    : std::runtime_error(fmt::format("non-finite {} loss at domain {}, iteration {}", t, d, it)),
      domain(d),
      iteration(it),
      term(t) {}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t purpose, int domain) {
  return derive_seed(seed, {purpose, static_cast<std::uint64_t>(domain)});
}

void validate(const TrainConfig& cfg) {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (cfg.iter_max <= 0) fail("iter_max must be positive");
  if (cfg.source_iters < 0) fail("source_iters must be non-negative");
  if (cfg.batch_size <= 0) fail("batch_size must be positive");
  if (!(cfg.base_lr_seg > 0.0) || !(cfg.base_lr_disc > 0.0)) fail("learning rates must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) fail("momentum must be in [0, 1)");
  if (!(cfg.weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (cfg.eval_every < 0) fail("eval_every must be non-negative");
  if (cfg.eval_batch <= 0) fail("eval_batch must be positive");
  if (cfg.ablation.use_tm && !cfg.ablation.branches.conv && !cfg.ablation.branches.pool) {
    fail("a TM needs at least one branch");
  }
  losses::validate(cfg.loss_weights);
}

std::vector<ParameterGroup> make_param_groups(const models::SegNet& net, const models::TmPair* tms,
                                              int domain_index) {
  if (domain_index < 1) throw std::invalid_argument("make_param_groups: target domains are numbered from 1");
  std::vector<ParameterGroup> groups;
  groups.push_back({"encoder", net.encoder_parameters(), kEncoderScale});
  auto heads = net.head1_parameters();
  for (auto& p : net.head2_parameters()) heads.push_back(p);
  groups.push_back({"heads", std::move(heads), domain_index == 1 ? real(1) : kLaterHeadScale});
  if (tms) groups.push_back({fmt::format("tm{}", domain_index), tms->parameters(), real(1)});
  validate_groups(groups);
  return groups;
}

models::SegNet snapshot_teacher(const models::SegNet& net) {
  models::SegNet teacher = net;
  teacher.set_requires_grad(false);
  return teacher;
}

DomainRun begin_domain(const TrainConfig& cfg, const models::SegNet& net, int index) {
  DomainRun run;
  run.index = index;
  if (cfg.ablation.use_tm) {
    run.tms = models::make_tm_pair(net, index, stream_seed(cfg.seed, kTmInit, index), cfg.ablation.branches);
  }
  const int c = net.num_classes();
  const std::uint64_t disc_seed = stream_seed(cfg.seed, kDiscInit, index);
  run.discs = {models::Discriminator(c, cfg.discriminator, derive_seed(disc_seed, {1}), "disc1"),
               models::Discriminator(c, cfg.discriminator, derive_seed(disc_seed, {2}), "disc2")};
  if (index > 1 && cfg.ablation.distill) run.teacher = snapshot_teacher(net);

  run.groups = make_param_groups(net, run.tms ? &*run.tms : nullptr, index);
  for (std::size_t g = 0; g < run.groups.size(); ++g) {
    run.sgd.push_back({static_cast<real>(cfg.momentum), static_cast<real>(cfg.weight_decay), {}});
  }
  for (int n = 0; n < 2; ++n) {
    run.disc_groups[n] = {fmt::format("disc{}", n + 1), run.discs[n].parameters(), real(1)};
  }
  return run;
}

GeneratorOutputs generator_phase(ContinualState& state, const TrainBatch& batch, const TrainConfig& cfg,
                                 losses::LossBundle& bundle, int iteration) {
  if (!state.current) throw std::logic_error("generator_phase: no domain in progress");
  DomainRun& run = *state.current;
  const auto& w = cfg.loss_weights;
  const bool needs_teacher = run.index > 1 && cfg.ablation.distill && (w.distill[0] > 0 || w.distill[1] > 0);
  if (needs_teacher && !run.teacher) {
    throw std::logic_error(fmt::format("domain {}: distillation is enabled but no teacher was recorded", run.index));
  }

  for (auto& d : run.discs) d.set_requires_grad(false);
  const models::TmPair* tms = run.tms ? &*run.tms : nullptr;
  const Var xs(batch.source_images);
  const Var xt(batch.target_images);
  const auto out_s = models::fused_forward(state.segnet, tms, xs);
  const auto out_t = models::fused_forward(state.segnet, tms, xt);
  const std::array<Var, 2> plus_s{out_s.plus1, out_s.plus2};
  const std::array<Var, 2> plus_t{out_t.plus1, out_t.plus2};
  const std::array<Var, 2> bare_s{out_s.base.logits1, out_s.base.logits2};

  std::optional<models::SegNetOutputs> old;
  if (needs_teacher) {
    NoGradGuard guard;
    old = run.teacher->forward(xs);
  }

  std::vector<std::pair<real, Var>> terms;
  GeneratorOutputs outputs;
  for (int n = 0; n < 2; ++n) {
    const Var seg = losses::segmentation_loss(plus_s[n], batch.source_labels);
    const Var p_s = ops::softmax_channels(plus_s[n]);
    const Var p_t = ops::softmax_channels(plus_t[n]);
    const Var adv = losses::adversarial_loss(cfg.ablation.adv_loss, run.discs[n].forward(p_s),
                                             run.discs[n].forward(p_t), losses::Reduction::Mean);
    bundle.seg[n] = seg.value().item();
    bundle.adv[n] = adv.value().item();
    check_finite(bundle.seg[n], run.index, iteration, fmt::format("seg{}", n + 1));
    check_finite(bundle.adv[n], run.index, iteration, fmt::format("adv{}", n + 1));
    terms.emplace_back(w.seg[n], seg);
    terms.emplace_back(w.adv[n], adv);
    if (old) {
      const Tensor& teacher_logits = n == 0 ? old->logits1.value() : old->logits2.value();
      const Var distill = losses::distillation_loss(bare_s[n], teacher_logits, w.temperature);
      bundle.distill[n] = distill.value().item();
      check_finite(bundle.distill[n], run.index, iteration, fmt::format("distill{}", n + 1));
      terms.emplace_back(w.distill[n], distill);
    } else {
      bundle.distill[n] = 0.0;
    }
    outputs.source_prob[n] = p_s.detach();
    outputs.target_prob[n] = p_t.detach();
  }
  bundle.weighted_total_generator = losses::weighted_generator_total(w, bundle);

  zero_all(run.groups);
  const Var total = weighted_sum(terms);
  if (total.defined()) {
    total.backward();
    for (const auto& g : run.groups) {
      for (const auto& t : g.tensors) {
        if (t.has_grad() && !t.grad().all_finite()) throw TrainingDivergence(run.index, iteration, "gradient");
      }
    }
    for (std::size_t g = 0; g < run.groups.size(); ++g) {
      sgd_step(run.groups[g], run.sgd[g], static_cast<real>(cfg.base_lr_seg));
    }
  }
  for (auto& d : run.discs) d.set_requires_grad(true);
  return outputs;
}

void discriminator_phase(ContinualState& state, const GeneratorOutputs& outputs, const TrainConfig& cfg,
                         losses::LossBundle& bundle, int iteration) {
  if (!state.current) throw std::logic_error("discriminator_phase: no domain in progress");
  DomainRun& run = *state.current;
  for (int n = 0; n < 2; ++n) {
    zero_grad(run.disc_groups[n]);
    const Var loss = losses::discriminator_loss(cfg.ablation.adv_loss, run.discs[n].forward(outputs.source_prob[n]),
                                                run.discs[n].forward(outputs.target_prob[n]), losses::Reduction::Mean);
    bundle.disc[n] = loss.value().item();
    check_finite(bundle.disc[n], run.index, iteration, fmt::format("disc{}", n + 1));
    loss.backward();
    adam_step(run.disc_groups[n], run.adam[n], static_cast<real>(cfg.base_lr_disc));
  }
}

losses::LossBundle train_domain_step(ContinualState& state, const TrainBatch& batch, const TrainConfig& cfg,
                                     int iteration) {
  losses::LossBundle bundle;
  const auto outputs = generator_phase(state, batch, cfg, bundle, iteration);
  discriminator_phase(state, outputs, cfg, bundle, iteration);
  return bundle;
}

std::vector<double> train_source_only(const TrainConfig& cfg, const data::DomainDataset& source,
                                      models::SegNet& net) {
  if (!source.labels) throw std::invalid_argument(fmt::format("source domain {} has no labels", source.name));
  std::vector<double> trace;
  if (cfg.source_iters == 0) return trace;
  ParameterGroup group{"segnet", net.parameters(), real(1)};
  SgdState sgd{static_cast<real>(cfg.momentum), static_cast<real>(cfg.weight_decay), {}};
  data::BatchIterator it(source, cfg.batch_size, stream_seed(cfg.seed, kSourceBatches, 0), true);
  const auto& w = cfg.loss_weights;
  trace.reserve(static_cast<std::size_t>(cfg.source_iters));
  for (int i = 1; i <= cfg.source_iters; ++i) {
    const auto batch = it.next();
    const auto out = net.forward(Var(batch.images));
    const Var seg1 = losses::segmentation_loss(out.logits1, *batch.labels);
    const Var seg2 = losses::segmentation_loss(out.logits2, *batch.labels);
    check_finite(seg1.value().item(), 0, i, "seg1");
    check_finite(seg2.value().item(), 0, i, "seg2");
    const Var total = weighted_sum({{w.seg[0], seg1}, {w.seg[1], seg2}});
    zero_grad(group);
    total.backward();
    sgd_step(group, sgd, static_cast<real>(cfg.base_lr_seg));
    trace.push_back(total.value().item());
  }
  return trace;
}

IntTensor predict(const models::SegNet& net, const models::TmPair* tms, const Tensor& images, std::int64_t out_h,
                  std::int64_t out_w) {
  NoGradGuard guard;
  const auto out = models::fused_forward(net, tms, Var(images));
  const Tensor logits = ops::resize_bilinear(out.plus2, out_h, out_w).value();
  const std::int64_t b = logits.dim(0), c = logits.dim(1), hw = out_h * out_w;
  IntTensor pred({b, out_h, out_w});
  for (std::int64_t n = 0; n < b; ++n) {
    const real* base = logits.ptr() + n * c * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      int best = 0;
      real best_v = base[p];
      for (std::int64_t k = 1; k < c; ++k) {
        if (base[k * hw + p] > best_v) {
          best_v = base[k * hw + p];
          best = static_cast<int>(k);
        }
      }
      pred[n * hw + p] = best;
    }
  }
  return pred;
}

metrics::ConfusionMatrix evaluate_confusion(const models::SegNet& net, const models::TmPair* tms,
                                            const data::DomainDataset& ds, int eval_batch, int threads) {
  if (!ds.labels) throw std::invalid_argument(fmt::format("cannot evaluate on {}: no labels", ds.name));
  if (eval_batch <= 0) throw std::invalid_argument("evaluate: eval_batch must be positive");
  const std::int64_t n = ds.size();
  const std::int64_t chunks = (n + eval_batch - 1) / eval_batch;
  std::vector<metrics::ConfusionMatrix> parts(static_cast<std::size_t>(chunks),
                                              metrics::ConfusionMatrix(ds.num_classes));
  std::atomic<std::int64_t> next{0};
  auto work = [&] {
    for (std::int64_t c = next++; c < chunks; c = next++) {
      std::vector<std::int64_t> idx;
      for (std::int64_t i = c * eval_batch; i < std::min(n, (c + 1) * eval_batch); ++i) idx.push_back(i);
      const IntTensor pred = predict(net, tms, ds.image_batch(idx), ds.height(), ds.width());
      parts[static_cast<std::size_t>(c)] = metrics::confusion_matrix(pred, ds.label_batch(idx), ds.num_classes);
    }
  };
  const int workers = static_cast<int>(std::clamp<std::int64_t>(threads, 1, std::max<std::int64_t>(chunks, 1)));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  }
  metrics::ConfusionMatrix total(ds.num_classes);
  for (const auto& p : parts) total += p;
  return total;
}

double evaluate_miou(const models::SegNet& net, const models::TmPair* tms, const data::DomainDataset& ds,
                     int eval_batch, int threads) {
  return metrics::miou(evaluate_confusion(net, tms, ds, eval_batch, threads)).miou;
}

const models::TmPair* eval_tms(const ContinualState& state, int domain) {
  if (domain == 0) return nullptr;
  if (state.tm_store.contains(domain)) return &state.tm_store.at(domain);
  if (state.current && state.current->index == domain && state.current->tms) return &*state.current->tms;
  return nullptr;
}

ContinualState run_source_stage(const TrainConfig& cfg, const DomainData& source,
                                const std::vector<DomainData>& targets, const RunHooks& hooks) {
  check_inputs(cfg, source, targets);
  ContinualState state;
  state.segnet = models::SegNet(cfg.segnet, stream_seed(cfg.seed, kNetInit, 0));
  state.history.method = cfg.method;
  state.history.domains.push_back(source.train.name);
  for (const auto& t : targets) state.history.domains.push_back(t.train.name);
  train_source_only(cfg, source.train, state.segnet);
  const double m = evaluate_miou(state.segnet, nullptr, source.val, cfg.eval_batch, hooks.eval_threads);
  state.history.set(0, 0, m);
  emit(hooks, 0, cfg.source_iters, source.val.name, m);
  for (std::size_t j = 0; j < targets.size(); ++j) {
    state.history.source_only[static_cast<int>(j) + 1] =
        evaluate_miou(state.segnet, nullptr, targets[j].val, cfg.eval_batch, hooks.eval_threads);
  }
  state.completed = 0;
  if (hooks.on_domain_complete) hooks.on_domain_complete(state);
  return state;
}

ContinualState run_continual(const TrainConfig& cfg, const DomainData& source, const std::vector<DomainData>& targets,
                             const RunHooks& hooks, std::optional<ContinualState> resume) {
  check_inputs(cfg, source, targets);
  const int num_targets = static_cast<int>(targets.size());
  auto val_of = [&](int d) -> const data::DomainDataset& { return d == 0 ? source.val : targets[d - 1].val; };

  ContinualState state;
  if (resume && resume->completed >= 0) {
    state = std::move(*resume);
    state.current.reset();
    if (state.completed > num_targets) throw std::invalid_argument("resume state is past the last target domain");
    if (state.segnet.num_classes() != cfg.segnet.num_classes) {
      throw std::invalid_argument("resume state predicts a different number of classes");
    }
  } else {
    state = run_source_stage(cfg, source, targets, hooks);
  }

  for (int i = state.completed + 1; i <= num_targets; ++i) {
    state.current.emplace(begin_domain(cfg, state.segnet, i));
    data::BatchIterator src_it(source.train, cfg.batch_size, stream_seed(cfg.seed, kSourceBatches, i), true);
    data::BatchIterator tgt_it(targets[i - 1].train, cfg.batch_size, stream_seed(cfg.seed, kTargetBatches, i), false);
    for (int it = 1; it <= cfg.iter_max; ++it) {
      auto bs = src_it.next();
      auto bt = tgt_it.next();
      const TrainBatch batch{std::move(bs.images), std::move(*bs.labels), std::move(bt.images)};
      const auto bundle = train_domain_step(state, batch, cfg, it);
      if (hooks.on_step) hooks.on_step(i, it, bundle);
      if (cfg.eval_every > 0 && it % cfg.eval_every == 0 && it < cfg.iter_max) {
        for (int d = 0; d <= i; ++d) {
          emit(hooks, i, it, val_of(d).name,
               evaluate_miou(state.segnet, eval_tms(state, d), val_of(d), cfg.eval_batch, hooks.eval_threads));
        }
      }
    }
    DomainRun run = std::move(*state.current);
    state.current.reset();
    for (auto& g : run.groups) zero_grad(g);
    if (run.tms) state.tm_store.store(i, std::move(*run.tms));
    for (int d = 0; d <= i; ++d) {
      const double m = evaluate_miou(state.segnet, eval_tms(state, d), val_of(d), cfg.eval_batch, hooks.eval_threads);
      state.history.set(i, d, m);
      emit(hooks, i, cfg.iter_max, val_of(d).name, m);
    }
    state.completed = i;
    if (hooks.on_domain_complete) hooks.on_domain_complete(state);
  }
  return state;
}

}  // namespace etm::trainer
