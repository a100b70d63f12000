#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "etm/data/domain.hpp"
#include "etm/metrics/metrics.hpp"

namespace etm::cli {

enum ExitCode { kOk = 0, kConfigError = 1, kIoError = 2, kDiverged = 3 };

/// Fixed colours for predicted semantic maps, indexed by class.
const std::vector<data::Rgb>& semantic_palette();

struct GenerateOptions {
  std::filesystem::path config;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;  // overrides data_seed
};

/// Writes <out>/<domain>/{train,val} directory datasets and <out>/manifest.json,
/// printing per-domain label histograms.
int cmd_generate(const GenerateOptions& opts, std::ostream& out, std::ostream& err);

struct TrainOptions {
  std::filesystem::path config;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;  // overrides the training seed
  int eval_threads = 0;               // 0: hardware concurrency
};

/// Trains on <data>/<domain>/{train,val}. Writes <out>/checkpoint (after every
/// finished domain), <out>/metrics.log and <out>/history.csv. An existing
/// checkpoint with the same config hash is resumed.
int cmd_train(const TrainOptions& opts, std::ostream& out, std::ostream& err);

struct EvalOptions {
  std::filesystem::path bundle;
  std::filesystem::path data;
  std::string domain;
  std::optional<std::filesystem::path> emit_maps;
  int threads = 0;
};

/// Per-class IoU and mIoU of a saved bundle on <data>/<domain>/val.
int cmd_eval(const EvalOptions& opts, std::ostream& out, std::ostream& err);

struct ReportOptions {
  std::vector<std::filesystem::path> histories;
  metrics::TableFormat format = metrics::TableFormat::Text;
  std::optional<std::filesystem::path> plot;
};

/// Tables for one or more history CSVs; --plot writes mIoU-vs-checkpoint charts.
int cmd_report(const ReportOptions& opts, std::ostream& out, std::ostream& err);

/// One chart per evaluated domain: x = checkpoint, y = mIoU in [0,1], one line
/// per history. Returns the written paths.
std::vector<std::filesystem::path> write_plots(const std::vector<metrics::RunHistory>& histories,
                                               const std::filesystem::path& dir);

}  // namespace etm::cli
