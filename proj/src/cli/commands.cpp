#include "etm/cli/commands.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "etm/cli/checkpoint.hpp"
#include "etm/cli/config.hpp"
#include "etm/data/io.hpp"
#include "etm/trainer/trainer.hpp"

namespace etm::cli {

namespace fs = std::filesystem;

namespace {

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read {}", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
}

data::DomainDataset load_split(const fs::path& data_dir, const std::string& name, const std::string& split) {
  try {
    return data::load_directory_dataset(data_dir / name / split);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
}

// Runs `body`, mapping failures to exit codes with one message on `err`.
template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const trainer::TrainingDivergence& e) {
    err << "error: training diverged: " << e.what() << '\n';
    return kDiverged;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  }
}

std::string histogram_line(const data::DomainDataset& train, const data::DomainDataset& val) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(val.num_classes), 0);
  std::int64_t total = 0;
  for (const auto* ds : {&train, &val}) {
    if (!ds->labels) continue;
    for (auto v : ds->labels->data()) {
      if (v >= 0 && v < val.num_classes) {
        ++counts[static_cast<std::size_t>(v)];
        ++total;
      }
    }
  }
  std::string line;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (c) line += " | ";
    line += fmt::format("{} {:.2f}%", data::shape_name(static_cast<int>(c)),
                        total ? 100.0 * static_cast<double>(counts[c]) / static_cast<double>(total) : 0.0);
  }
  return line;
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
}

}  // namespace

const std::vector<data::Rgb>& semantic_palette() {
  static const std::vector<data::Rgb> palette = [] {
    const int table[][3] = {{0, 0, 0},       {230, 25, 75},   {60, 180, 75},  {255, 225, 25}, {0, 130, 200},
                            {245, 130, 48},  {145, 30, 180},  {70, 240, 240}, {240, 50, 230}, {210, 245, 60},
                            {250, 190, 212}, {0, 128, 128},   {170, 110, 40}};
    std::vector<data::Rgb> out;
    for (const auto& c : table) out.push_back({c[0] / 255.0f, c[1] / 255.0f, c[2] / 255.0f});
    return out;
  }();
  return palette;
}

int cmd_generate(const GenerateOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    ExperimentConfig cfg = load_config(opts.config);
    if (opts.seed) cfg.data_seed = *opts.seed;
    ensure_directory(opts.out);
    nlohmann::json names = nlohmann::json::array();
    for (std::size_t i = 0; i < cfg.domains.size(); ++i) {
      const auto& spec = cfg.domains[i];
      const auto seed = domain_seed(cfg, static_cast<int>(i));
      const auto train = data::generate_domain(spec, seed, data::Split::Train);
      const auto val = data::generate_domain(spec, seed, data::Split::Val);
      try {
        data::save_directory_dataset(train, opts.out / spec.name / "train");
        data::save_directory_dataset(val, opts.out / spec.name / "val");
      } catch (const std::exception& e) {
        throw IoError(e.what());
      }
      out << fmt::format("{} ({}, {} train / {} val): {}\n", spec.name, data::to_string(spec.role), train.size(),
                         val.size(), histogram_line(train, val));
      names.push_back(spec.name);
    }
    const nlohmann::json manifest = {
        {"config_hash", config_hash(cfg)}, {"data_seed", cfg.data_seed}, {"domains", names}};
    write_text(opts.out / "manifest.json", manifest.dump(2) + "\n");
    return int{kOk};
  });
}

int cmd_train(const TrainOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    ExperimentConfig cfg = load_config(opts.config);
    if (opts.seed) cfg.train.seed = *opts.seed;
    const std::string hash = config_hash(cfg);

    trainer::DomainData source;
    std::vector<trainer::DomainData> targets;
    for (std::size_t i = 0; i < cfg.domains.size(); ++i) {
      const auto& name = cfg.domains[i].name;
      trainer::DomainData d{load_split(opts.data, name, "train"), load_split(opts.data, name, "val")};
      if (d.train.num_classes != cfg.train.segnet.num_classes || d.val.num_classes != cfg.train.segnet.num_classes) {
        throw ConfigError(fmt::format("data for {} has {} classes, the config expects {}", name, d.train.num_classes,
                                      cfg.train.segnet.num_classes));
      }
      d.train.name = d.val.name = name;
      if (i == 0) {
        source = std::move(d);
      } else {
        targets.push_back(std::move(d));
      }
    }

    ensure_directory(opts.out);
    const fs::path ckpt = opts.out / "checkpoint";
    std::optional<trainer::ContinualState> resume;
    if (fs::exists(ckpt / "manifest.json")) {
      Bundle b = load_bundle(ckpt);
      if (b.config_hash != hash) {
        throw ConfigError(fmt::format("{} holds a run of config {}, this config is {}; use another --out",
                                      ckpt.string(), b.config_hash, hash));
      }
      out << fmt::format("resuming after domain {}\n", b.state.completed);
      resume = std::move(b.state);
    }

    std::ofstream log(opts.out / "metrics.log", resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError(fmt::format("cannot write {}", (opts.out / "metrics.log").string()));
    if (!resume) log << "# config_hash=" << hash << '\n';

    auto write_history = [&](const metrics::RunHistory& h) {
      metrics::RunHistory copy = h;
      copy.config_hash = hash;
      write_text(opts.out / "history.csv", metrics::history_to_csv(copy));
    };

    trainer::RunHooks hooks;
    hooks.eval_threads = resolve_threads(opts.eval_threads);
    hooks.on_metrics_line = [&](const std::string& line) {
      log << line << '\n' << std::flush;
      out << line << '\n' << std::flush;
    };
    hooks.on_domain_complete = [&](const trainer::ContinualState& s) {
      save_bundle(ckpt, s, cfg.train, hash);
      write_history(s.history);
    };

    trainer::ContinualState state;
    try {
      if (cfg.mode == TrainMode::SourceOnly) {
        state = resume ? std::move(*resume) : trainer::run_source_stage(cfg.train, source, targets, hooks);
      } else {
        state = trainer::run_continual(cfg.train, source, targets, hooks, std::move(resume));
      }
    } catch (const trainer::TrainingDivergence&) {
      throw;
    } catch (const IoError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    write_history(state.history);
    if (cfg.mode == TrainMode::Continual) out << metrics::emit_table(state.history, metrics::TableFormat::Text);
    return int{kOk};
  });
}

int cmd_eval(const EvalOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Bundle b = load_bundle(opts.bundle);
    const auto& domains = b.state.history.domains;
    const auto it = std::find(domains.begin(), domains.end(), opts.domain);
    if (it == domains.end()) {
      std::string list;
      for (const auto& d : domains) list += (list.empty() ? "" : ", ") + d;
      throw ConfigError(fmt::format("unknown domain '{}'; available: {}", opts.domain, list));
    }
    const int d = static_cast<int>(it - domains.begin());
    const models::TmPair* tms = nullptr;
    if (d > 0 && b.use_tm) {
      if (!b.state.tm_store.contains(d)) {
        std::string list;
        for (int k : b.state.tm_store.domains()) list += (list.empty() ? "" : ", ") + domains[static_cast<std::size_t>(k)];
        throw ConfigError(fmt::format("no TM stored for domain '{}'; stored: {}", opts.domain,
                                      list.empty() ? std::string("none") : list));
      }
      tms = &b.state.tm_store.at(d);
    }
    const auto val = load_split(opts.data, opts.domain, "val");
    if (val.num_classes != b.segnet_config.num_classes) {
      throw ConfigError(fmt::format("{} has {} classes, the network predicts {}", opts.domain, val.num_classes,
                                    b.segnet_config.num_classes));
    }
    const auto cm = trainer::evaluate_confusion(b.state.segnet, tms, val, 10, resolve_threads(opts.threads));
    const auto r = metrics::miou(cm);
    out << fmt::format("domain {} ({} images, {})\n", opts.domain, val.size(), tms ? "with its TM" : "bare network");
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
      out << fmt::format("  {:>2} {:<12} {}\n", c, data::shape_name(static_cast<int>(c)),
                         r.per_class[c] ? fmt::format("{:.4f}", *r.per_class[c]) : std::string("n/a"));
    }
    out << fmt::format("mIoU {:.17g}\n", r.miou);

    if (opts.emit_maps) {
      ensure_directory(*opts.emit_maps);
      const auto& palette = semantic_palette();
      if (b.segnet_config.num_classes > static_cast<int>(palette.size())) {
        throw ConfigError("too many classes for the semantic palette");
      }
      const std::int64_t hw = val.height() * val.width();
      for (std::int64_t i = 0; i < val.size(); i += 10) {
        std::vector<std::int64_t> idx;
        for (std::int64_t k = i; k < std::min(val.size(), i + 10); ++k) idx.push_back(k);
        const IntTensor pred = trainer::predict(b.state.segnet, tms, val.image_batch(idx), val.height(), val.width());
        for (std::size_t k = 0; k < idx.size(); ++k) {
          std::vector<std::uint8_t> px(static_cast<std::size_t>(hw));
          for (std::int64_t p = 0; p < hw; ++p) {
            px[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(pred[static_cast<std::int64_t>(k) * hw + p]);
          }
          try {
            data::write_indexed_png(*opts.emit_maps / fmt::format("{:05d}.png", idx[k]),
                                    static_cast<int>(val.height()), static_cast<int>(val.width()), px,
                                    std::vector<data::Rgb>(palette.begin(),
                                                           palette.begin() + b.segnet_config.num_classes));
          } catch (const std::runtime_error& e) {
            throw IoError(e.what());
          }
        }
      }
      out << fmt::format("wrote {} maps to {}\n", val.size(), opts.emit_maps->string());
    }
    return int{kOk};
  });
}

int cmd_report(const ReportOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (opts.histories.empty()) throw ConfigError("report needs at least one history file");
    std::vector<metrics::RunHistory> histories;
    for (const auto& path : opts.histories) {
      const std::string text = read_text(path);
      try {
        histories.push_back(metrics::history_from_csv(text));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
      }
    }
    for (std::size_t i = 1; i < histories.size(); ++i) {
      if (histories[i].domains != histories[0].domains) {
        throw ConfigError(fmt::format("{} and {} were run on different domain lists", opts.histories[0].string(),
                                      opts.histories[i].string()));
      }
    }
    std::string text = metrics::emit_table(histories, opts.format);
    if (opts.format == metrics::TableFormat::Text && histories.size() > 1 && histories[0].domains.size() > 2) {
      text += "\n" + metrics::comparison_table(histories);
    }
    out << text;
    if (opts.plot) {
      for (const auto& p : write_plots(histories, *opts.plot)) out << "wrote " << p.string() << '\n';
    }
    return int{kOk};
  });
}

}  // namespace etm::cli
