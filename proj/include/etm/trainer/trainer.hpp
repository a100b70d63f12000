#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "etm/core/optim.hpp"
#include "etm/data/batch_iterator.hpp"
#include "etm/losses/losses.hpp"
#include "etm/metrics/metrics.hpp"
#include "etm/models/discriminator.hpp"
#include "etm/models/target_memory.hpp"

namespace etm::trainer {

/// Switches behind the component and TM-module ablations.
struct Ablation {
  bool use_tm = true;
  models::TmBranches branches;
  losses::AdversarialKind adv_loss = losses::AdversarialKind::DHA;
  bool distill = true;
};

struct TrainConfig {
  std::string method = "ETM";
  int iter_max = 1500;      // iterations per target domain
  int source_iters = 1000;  // supervised source iterations before the first target
  int batch_size = 1;
  double base_lr_seg = 2.5e-3;
  double base_lr_disc = 1e-4;
  double momentum = 0.97;
  double weight_decay = 5e-4;
  losses::LossWeights loss_weights;
  std::uint64_t seed = 0;
  int eval_every = 0;  // 0: evaluate only when a domain finishes
  int eval_batch = 10;
  Ablation ablation;
  models::SegNetConfig segnet;
  models::DiscriminatorConfig discriminator;
};

/// Throws std::invalid_argument on the first invalid field.
void validate(const TrainConfig& cfg);

/// Training split plus the labelled validation split used for evaluation.
struct DomainData {
  data::DomainDataset train;
  data::DomainDataset val;
};

/// Thrown when a loss becomes non-finite.
class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(int domain, int iteration, const std::string& term);
  int domain;
  int iteration;
  std::string term;
};

/// Everything that exists only while one target domain is being adapted.
/// Parameter groups alias the network, TM and discriminator nodes, so a run
/// can be moved but not copied.
struct DomainRun {
  DomainRun() = default;
  DomainRun(const DomainRun&) = delete;
  DomainRun& operator=(const DomainRun&) = delete;
  DomainRun(DomainRun&&) = default;
  DomainRun& operator=(DomainRun&&) = default;

  int index = 0;
  std::optional<models::TmPair> tms;
  std::array<models::Discriminator, 2> discs;
  std::optional<models::SegNet> teacher;
  std::vector<ParameterGroup> groups;  // encoder, heads, [tm]
  std::vector<SgdState> sgd;
  std::array<AdamState, 2> adam;
  std::array<ParameterGroup, 2> disc_groups;
};

struct ContinualState {
  models::SegNet segnet;
  models::TmStore tm_store;
  std::optional<DomainRun> current;
  int completed = -1;  // last finished domain; 0 once source training is done
  metrics::RunHistory history;
};

/// Parameter groups for adapting to target `domain_index` (1-based): encoder at
/// 0.1, heads at 1 on the first target and 0.1 afterwards, TM at 1.
std::vector<ParameterGroup> make_param_groups(const models::SegNet& net, const models::TmPair* tms, int domain_index);

/// Deep copy with gradients disabled.
models::SegNet snapshot_teacher(const models::SegNet& net);

/// Fresh TMs (unless disabled), discriminators, teacher (from domain 2 on,
/// when distillation is enabled) and optimiser state for target `index`.
DomainRun begin_domain(const TrainConfig& cfg, const models::SegNet& net, int index);

struct TrainBatch {
  Tensor source_images;
  IntTensor source_labels;
  Tensor target_images;
};

/// Generator update: segmentation and adversarial losses on the TM-augmented
/// outputs plus distillation on the bare outputs, one SGD step on every group.
/// Discriminator parameters are held fixed. Fills seg/adv/distill in `bundle`
/// and returns the detached class-probability maps for the discriminator phase.
struct GeneratorOutputs {
  std::array<Var, 2> source_prob;
  std::array<Var, 2> target_prob;
};
GeneratorOutputs generator_phase(ContinualState& state, const TrainBatch& batch, const TrainConfig& cfg,
                                 losses::LossBundle& bundle, int iteration = 0);

/// Discriminator update on detached probability maps, one Adam step per level.
void discriminator_phase(ContinualState& state, const GeneratorOutputs& outputs, const TrainConfig& cfg,
                         losses::LossBundle& bundle, int iteration = 0);

/// One alternating iteration. Throws TrainingDivergence on a non-finite term.
losses::LossBundle train_domain_step(ContinualState& state, const TrainBatch& batch, const TrainConfig& cfg,
                                     int iteration = 0);

/// Supervised source training of `net` for cfg.source_iters iterations, with the
/// per-level segmentation weights on both heads. Returns the per-iteration loss.
std::vector<double> train_source_only(const TrainConfig& cfg, const data::DomainDataset& source,
                                      models::SegNet& net);

/// Per-pixel class prediction: argmax of plus2 after bilinear resize to the
/// label size, ties going to the lowest class.
IntTensor predict(const models::SegNet& net, const models::TmPair* tms, const Tensor& images, std::int64_t out_h,
                  std::int64_t out_w);

/// Confusion matrix over a labelled dataset; runs batches on up to
/// `threads` threads with a fixed reduction order.
metrics::ConfusionMatrix evaluate_confusion(const models::SegNet& net, const models::TmPair* tms,
                                            const data::DomainDataset& ds, int eval_batch, int threads = 1);
double evaluate_miou(const models::SegNet& net, const models::TmPair* tms, const data::DomainDataset& ds,
                     int eval_batch, int threads = 1);

/// TMs used to evaluate domain d: the stored pair for a target, none for the source.
const models::TmPair* eval_tms(const ContinualState& state, int domain);

struct RunHooks {
  /// Called after source training (completed = 0) and after each target.
  std::function<void(const ContinualState&)> on_domain_complete;
  /// Tab-separated "domain_index iteration eval_domain miou" lines.
  std::function<void(const std::string&)> on_metrics_line;
  std::function<void(int domain, int iteration, const losses::LossBundle&)> on_step;
  int eval_threads = 1;
};

/// Source training from a fresh network, then evaluation on the source and
/// (as the source-only baseline) on every target. Leaves completed = 0.
ContinualState run_source_stage(const TrainConfig& cfg, const DomainData& source,
                                const std::vector<DomainData>& targets, const RunHooks& hooks = {});

/// Source training, then sequential adaptation to each target. When `resume` holds a
/// state with completed >= 0, training continues after its last finished domain.
ContinualState run_continual(const TrainConfig& cfg, const DomainData& source, const std::vector<DomainData>& targets,
                             const RunHooks& hooks = {}, std::optional<ContinualState> resume = std::nullopt);

/// Pseudo-random streams used by the trainer, one per purpose and domain.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t purpose, int domain);

}  // namespace etm::trainer
