#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "etm/core/int_tensor.hpp"

namespace etm::metrics {

/// counts[a * C + b] = number of pixels labelled a and predicted b.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;

  explicit ConfusionMatrix(int c = 0) : num_classes(c), counts(static_cast<std::size_t>(c) * c, 0) {}
  std::int64_t at(int label, int pred) const { return counts[static_cast<std::size_t>(label * num_classes + pred)]; }
  std::int64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Accumulates same-shaped maps of any rank. Ignored labels are skipped;
/// predictions outside [0,C) and labels outside [0,C) other than `ignore`
/// throw std::invalid_argument.
ConfusionMatrix confusion_matrix(const IntTensor& pred, const IntTensor& label, int num_classes, int ignore = 255);

struct IouResult {
  std::vector<std::optional<double>> per_class;  // empty where the class was skipped
  double miou = 0.0;
};

/// IoU_c = M[c][c] / (row_c + col_c - M[c][c]). With present_only, classes
/// whose union is empty are left out of the mean; otherwise they count as 0.
/// Throws if no class has a non-empty union.
IouResult miou(const ConfusionMatrix& m, bool present_only = true);

/// mIoU for every (checkpoint j, evaluated domain d <= j). Domain 0 is the
/// source; checkpoint 0 is the source-trained network before adaptation.
struct RunHistory {
  std::string method;
  std::vector<std::string> domains;
  std::map<std::pair<int, int>, double> entries;  // (checkpoint, eval_domain) -> mIoU in [0,1]
  std::map<int, double> source_only;              // target domain -> source-only mIoU
  std::string config_hash;

  int final_checkpoint() const { return static_cast<int>(domains.size()) - 1; }
  void set(int checkpoint, int domain, double value);
  double get(int checkpoint, int domain) const;
  bool has(int checkpoint, int domain) const { return entries.count({checkpoint, domain}) != 0; }
  int domain_index(const std::string& name) const;
  std::optional<double> source_only_mean() const;
};

/// Fgt_d = mIoU(after T, d) - mIoU(after d, d). Negative values mean forgetting.
double forgetting(const RunHistory& h, int domain, int final_checkpoint);
double forgetting(const RunHistory& h, int domain);

/// Mean final-checkpoint mIoU over the target domains (1..T).
double mean_miou(const RunHistory& h);

/// mean_miou minus the source-only mean over the same targets.
double gain(const RunHistory& h);

enum class TableFormat { Text, Csv };
TableFormat parse_table_format(const std::string& name);

/// One method's row, e.g. "T1: 40.61 (-1.35) | T2: 46.73 | Mean 43.67 | Gain +4.99".
/// Throws std::invalid_argument listing any missing cells.
std::string format_row(const RunHistory& h);

/// Text: one "<method> | <row>" line per history. CSV: columns method,
/// eval_domain, miou, fgt, mean_miou, gain with one line per target domain;
/// values are fractions at full precision and fgt is blank for the last target.
std::string emit_table(const std::vector<RunHistory>& histories, TableFormat format);
std::string emit_table(const RunHistory& h, TableFormat format);

struct TableRow {
  std::string method;
  std::string eval_domain;
  double miou = 0.0;
  std::optional<double> fgt;
  double mean_miou = 0.0;
  double gain = 0.0;
};

/// Parses emit_table's CSV output. Throws std::invalid_argument naming the row.
std::vector<TableRow> parse_table_csv(const std::string& csv);

/// Forgetting side by side for target domains every history shares (all but
/// the last), one line per domain. Refuses histories with different domain lists.
std::string comparison_table(const std::vector<RunHistory>& histories);

/// History CSV: two "# key=value" header lines (config_hash, domains), then
/// kind,method,checkpoint,eval_domain,miou rows. kind is "eval" or
/// "source_only". Values are printed with 17 significant digits.
std::string history_to_csv(const RunHistory& h);

/// Throws std::invalid_argument with the 1-based line number on malformed input.
RunHistory history_from_csv(const std::string& text);

}  // namespace etm::metrics
