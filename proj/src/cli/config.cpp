#include "etm/cli/config.hpp"

#include <fstream>

#include <fmt/format.h>
#include <zlib.h>

#include "etm/core/random.hpp"
#include "etm/data/json_util.hpp"

namespace etm::cli {

namespace {

using nlohmann::json;

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_pair(const json& j, const char* key, std::array<real, 2>& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw std::invalid_argument(fmt::format("loss_weights.{} must be [level1, level2]", key));
  out = {v[0].get<real>(), v[1].get<real>()};
}

std::string mode_name(TrainMode m) { return m == TrainMode::Continual ? "continual" : "source_only"; }

TrainMode parse_mode(const std::string& name) {
  if (name == "continual") return TrainMode::Continual;
  if (name == "source_only") return TrainMode::SourceOnly;
  throw std::invalid_argument(fmt::format("train.mode must be continual or source_only, got '{}'", name));
}

ExperimentConfig parse_unchecked(const json& j) {
  require_known_keys(j, {"method", "seed", "data_seed", "preset", "domains", "train", "loss_weights", "ablation", "model"},
                     "config");
  ExperimentConfig cfg = default_experiment();
  auto& t = cfg.train;
  read(j, "method", t.method);
  read(j, "seed", t.seed);
  read(j, "data_seed", cfg.data_seed);

  if (j.contains("preset") && j.contains("domains")) throw std::invalid_argument("config: give either preset or domains");
  if (j.contains("preset")) {
    const auto name = j.at("preset").get<std::string>();
    if (name != "etm-toy") throw std::invalid_argument(fmt::format("config: unknown preset '{}'", name));
    cfg.domains = data::etm_toy_preset();
  }
  if (j.contains("domains")) cfg.domains = j.at("domains").get<std::vector<data::DomainSpec>>();

  if (j.contains("train")) {
    const auto& tr = j.at("train");
    require_known_keys(tr, {"mode", "iter_max", "source_iters", "batch_size", "base_lr_seg", "base_lr_disc", "momentum",
                            "weight_decay", "eval_every", "eval_batch"},
                       "train");
    if (tr.contains("mode")) cfg.mode = parse_mode(tr.at("mode").get<std::string>());
    read(tr, "iter_max", t.iter_max);
    read(tr, "source_iters", t.source_iters);
    read(tr, "batch_size", t.batch_size);
    read(tr, "base_lr_seg", t.base_lr_seg);
    read(tr, "base_lr_disc", t.base_lr_disc);
    read(tr, "momentum", t.momentum);
    read(tr, "weight_decay", t.weight_decay);
    read(tr, "eval_every", t.eval_every);
    read(tr, "eval_batch", t.eval_batch);
  }
  if (j.contains("loss_weights")) {
    const auto& lw = j.at("loss_weights");
    require_known_keys(lw, {"seg", "adv", "distill", "temperature"}, "loss_weights");
    read_pair(lw, "seg", t.loss_weights.seg);
    read_pair(lw, "adv", t.loss_weights.adv);
    read_pair(lw, "distill", t.loss_weights.distill);
    read(lw, "temperature", t.loss_weights.temperature);
  }
  if (j.contains("ablation")) {
    const auto& ab = j.at("ablation");
    require_known_keys(ab, {"use_tm", "tm_conv_branch", "tm_pool_branch", "adv_loss", "distill"}, "ablation");
    read(ab, "use_tm", t.ablation.use_tm);
    read(ab, "tm_conv_branch", t.ablation.branches.conv);
    read(ab, "tm_pool_branch", t.ablation.branches.pool);
    if (ab.contains("adv_loss")) t.ablation.adv_loss = losses::parse_adversarial_kind(ab.at("adv_loss").get<std::string>());
    read(ab, "distill", t.ablation.distill);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    require_known_keys(m, {"encoder_channels", "head_channels", "head_dilation", "disc_base_channels"}, "model");
    read(m, "encoder_channels", t.segnet.encoder_channels);
    read(m, "head_channels", t.segnet.head_channels);
    read(m, "head_dilation", t.segnet.head_dilation);
    read(m, "disc_base_channels", t.discriminator.base_channels);
  }
  if (!cfg.domains.empty()) t.segnet.num_classes = cfg.domains.front().num_classes;
  return cfg;
}

}  // namespace

ExperimentConfig default_experiment() {
  ExperimentConfig cfg;
  cfg.domains = data::etm_toy_preset();
  cfg.train.segnet.num_classes = cfg.domains.front().num_classes;
  return cfg;
}

void validate(const ExperimentConfig& cfg) {
  try {
    if (cfg.domains.size() < 2) throw std::invalid_argument("config: need a source and at least one target domain");
    if (cfg.domains.front().role != data::Role::Source) throw std::invalid_argument("config: the first domain must be the source");
    for (std::size_t i = 0; i < cfg.domains.size(); ++i) {
      const auto& d = cfg.domains[i];
      data::validate(d);
      if (i > 0 && d.role != data::Role::Target) {
        throw std::invalid_argument(fmt::format("config: domain {} must be a target", d.name));
      }
      if (d.num_classes != cfg.train.segnet.num_classes) {
        throw std::invalid_argument(fmt::format("config: domain {} has {} classes, expected {}", d.name, d.num_classes,
                                                cfg.train.segnet.num_classes));
      }
      if (d.height % models::SegNet::kTopStride != 0 || d.width % models::SegNet::kTopStride != 0) {
        throw std::invalid_argument(fmt::format("config: image size of {} must be divisible by {}", d.name,
                                                models::SegNet::kTopStride));
      }
      for (std::size_t k = 0; k < i; ++k) {
        if (cfg.domains[k].name == d.name) throw std::invalid_argument(fmt::format("config: duplicate domain {}", d.name));
      }
    }
    trainer::validate(cfg.train);
    // The TM budget is a construction-time check; probe it once here.
    if (cfg.train.ablation.use_tm) {
      const models::SegNet probe(cfg.train.segnet, 0);
      models::make_tm_pair(probe, 1, 0, cfg.train.ablation.branches);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  try {
    cfg = parse_unchecked(j);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config {}", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return parse_config(j);
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  const auto& t = cfg.train;
  const auto& lw = t.loss_weights;
  return {{"method", t.method},
          {"seed", t.seed},
          {"data_seed", cfg.data_seed},
          {"domains", cfg.domains},
          {"train",
           {{"mode", mode_name(cfg.mode)},
            {"iter_max", t.iter_max},
            {"source_iters", t.source_iters},
            {"batch_size", t.batch_size},
            {"base_lr_seg", t.base_lr_seg},
            {"base_lr_disc", t.base_lr_disc},
            {"momentum", t.momentum},
            {"weight_decay", t.weight_decay},
            {"eval_every", t.eval_every},
            {"eval_batch", t.eval_batch}}},
          {"loss_weights",
           {{"seg", lw.seg}, {"adv", lw.adv}, {"distill", lw.distill}, {"temperature", lw.temperature}}},
          {"ablation",
           {{"use_tm", t.ablation.use_tm},
            {"tm_conv_branch", t.ablation.branches.conv},
            {"tm_pool_branch", t.ablation.branches.pool},
            {"adv_loss", std::string(losses::to_string(t.ablation.adv_loss))},
            {"distill", t.ablation.distill}}},
          {"model",
           {{"encoder_channels", t.segnet.encoder_channels},
            {"head_channels", t.segnet.head_channels},
            {"head_dilation", t.segnet.head_dilation},
            {"disc_base_channels", t.discriminator.base_channels}}}};
}

std::uint32_t crc32_of(const void* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* bytes = static_cast<const Bytef*>(data);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, bytes, chunk);
    bytes += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  return fmt::format("{:08x}", crc32_of(text.data(), text.size()));
}

std::uint64_t domain_seed(const ExperimentConfig& cfg, int index) {
  return derive_seed(cfg.data_seed, {0x646f6d, static_cast<std::uint64_t>(index)});
}

}  // namespace etm::cli
