#include "etm/metrics/metrics.hpp"

#include <cmath>
#include <cstdlib>
#include <set>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace etm::metrics {

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

double parse_double(const std::string& s, int line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw std::invalid_argument(fmt::format("row {}: bad number '{}'", line, s));
  return v;
}

int parse_int(const std::string& s, int line) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) throw std::invalid_argument(fmt::format("row {}: bad integer '{}'", line, s));
  return static_cast<int>(v);
}

std::string full(double v) { return fmt::format("{:.17g}", v); }

std::string percent(double v) { return fmt::format("{:.2f}", 100.0 * v); }
std::string signed_percent(double v) { return fmt::format("{:+.2f}", 100.0 * v); }
// Forgetting shows a sign only when positive, as in "(+0.07)" and "(-1.35)".
std::string fgt_percent(double v) { return v > 0.0 ? signed_percent(v) : percent(v); }

void require_complete(const RunHistory& h) {
  std::vector<std::string> missing;
  const int last = h.final_checkpoint();
  if (last < 1) throw std::invalid_argument(fmt::format("history '{}' has no target domains", h.method));
  for (int d = 1; d <= last; ++d) {
    if (!h.has(d, d)) missing.push_back(fmt::format("({}, {})", h.domains[d], h.domains[d]));
    if (d != last && !h.has(last, d)) missing.push_back(fmt::format("({}, {})", h.domains[last], h.domains[d]));
    if (!h.source_only.count(d)) missing.push_back(fmt::format("source-only {}", h.domains[d]));
  }
  if (!missing.empty()) {
    throw std::invalid_argument(
        fmt::format("history '{}' is missing cells (checkpoint, domain): {}", h.method, join(missing, ", ")));
  }
}

}  // namespace

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes != num_classes) throw std::invalid_argument("confusion matrices differ in class count");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

ConfusionMatrix confusion_matrix(const IntTensor& pred, const IntTensor& label, int num_classes, int ignore) {
  if (num_classes < 1) throw std::invalid_argument("confusion_matrix: num_classes must be positive");
  if (pred.shape() != label.shape()) {
    throw std::invalid_argument(
        fmt::format("confusion_matrix: shapes {} and {} differ", shape_str(pred.shape()), shape_str(label.shape())));
  }
  ConfusionMatrix m(num_classes);
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const int p = pred[i];
    if (p < 0 || p >= num_classes) {
      throw std::invalid_argument(fmt::format("confusion_matrix: prediction {} outside [0,{})", p, num_classes));
    }
    const int l = label[i];
    if (l == ignore) continue;
    if (l < 0 || l >= num_classes) {
      throw std::invalid_argument(fmt::format("confusion_matrix: label {} outside [0,{})", l, num_classes));
    }
    ++m.counts[static_cast<std::size_t>(l * num_classes + p)];
  }
  return m;
}

IouResult miou(const ConfusionMatrix& m, bool present_only) {
  const int c = m.num_classes;
  IouResult r;
  r.per_class.resize(static_cast<std::size_t>(c));
  double sum = 0.0;
  int included = 0, nonempty = 0;
  for (int k = 0; k < c; ++k) {
    std::int64_t row = 0, col = 0;
    for (int j = 0; j < c; ++j) {
      row += m.at(k, j);
      col += m.at(j, k);
    }
    const std::int64_t inter = m.at(k, k);
    const std::int64_t uni = row + col - inter;
    if (uni == 0) {
      if (present_only) continue;
      r.per_class[static_cast<std::size_t>(k)] = 0.0;
      ++included;
      continue;
    }
    const double iou = static_cast<double>(inter) / static_cast<double>(uni);
    r.per_class[static_cast<std::size_t>(k)] = iou;
    sum += iou;
    ++included;
    ++nonempty;
  }
  if (nonempty == 0) throw std::invalid_argument("miou: every class is absent from both prediction and label");
  r.miou = sum / included;
  return r;
}

void RunHistory::set(int checkpoint, int domain, double value) {
  if (domain < 0 || domain > checkpoint || checkpoint >= static_cast<int>(domains.size())) {
    throw std::invalid_argument(fmt::format("history entry ({}, {}) outside the {} domains", checkpoint, domain,
                                            domains.size()));
  }
  if (!(value >= 0.0 && value <= 1.0)) throw std::invalid_argument(fmt::format("mIoU {} outside [0,1]", value));
  entries[{checkpoint, domain}] = value;
}

double RunHistory::get(int checkpoint, int domain) const {
  auto it = entries.find({checkpoint, domain});
  if (it == entries.end()) {
    throw std::invalid_argument(fmt::format("history '{}' has no entry for checkpoint {} on domain {}", method,
                                            checkpoint, domain));
  }
  return it->second;
}

int RunHistory::domain_index(const std::string& name) const {
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i] == name) return static_cast<int>(i);
  }
  throw std::invalid_argument(fmt::format("unknown domain '{}' (available: {})", name, join(domains, ", ")));
}

std::optional<double> RunHistory::source_only_mean() const {
  const int last = final_checkpoint();
  if (last < 1) return std::nullopt;
  double sum = 0.0;
  for (int d = 1; d <= last; ++d) {
    auto it = source_only.find(d);
    if (it == source_only.end()) return std::nullopt;
    sum += it->second;
  }
  return sum / last;
}

double forgetting(const RunHistory& h, int domain, int final_checkpoint) {
  return h.get(final_checkpoint, domain) - h.get(domain, domain);
}

double forgetting(const RunHistory& h, int domain) { return forgetting(h, domain, h.final_checkpoint()); }

double mean_miou(const RunHistory& h) {
  const int last = h.final_checkpoint();
  if (last < 1) throw std::invalid_argument("mean_miou: history has no target domains");
  double sum = 0.0;
  for (int d = 1; d <= last; ++d) sum += h.get(last, d);
  return sum / last;
}

double gain(const RunHistory& h) {
  const auto baseline = h.source_only_mean();
  if (!baseline) throw std::invalid_argument(fmt::format("history '{}' has no source-only baseline", h.method));
  return mean_miou(h) - *baseline;
}

TableFormat parse_table_format(const std::string& name) {
  if (name == "text") return TableFormat::Text;
  if (name == "csv") return TableFormat::Csv;
  throw std::invalid_argument(fmt::format("unknown table format '{}' (expected text or csv)", name));
}

std::string format_row(const RunHistory& h) {
  require_complete(h);
  const int last = h.final_checkpoint();
  std::vector<std::string> cells;
  for (int d = 1; d <= last; ++d) {
    std::string cell = fmt::format("{}: {}", h.domains[d], percent(h.get(last, d)));
    if (d != last) cell += fmt::format(" ({})", fgt_percent(forgetting(h, d, last)));
    cells.push_back(cell);
  }
  cells.push_back("Mean " + percent(mean_miou(h)));
  cells.push_back("Gain " + signed_percent(gain(h)));
  return join(cells, " | ");
}

std::string emit_table(const std::vector<RunHistory>& histories, TableFormat format) {
  std::string out;
  if (format == TableFormat::Text) {
    std::size_t width = 0;
    for (const auto& h : histories) width = std::max(width, h.method.size());
    for (const auto& h : histories) out += fmt::format("{:<{}} | {}\n", h.method, width, format_row(h));
    return out;
  }
  out = "method,eval_domain,miou,fgt,mean_miou,gain\n";
  for (const auto& h : histories) {
    require_complete(h);
    const int last = h.final_checkpoint();
    const double mean = mean_miou(h), g = gain(h);
    for (int d = 1; d <= last; ++d) {
      const std::string fgt = d == last ? "" : full(forgetting(h, d, last));
      out += fmt::format("{},{},{},{},{},{}\n", h.method, h.domains[d], full(h.get(last, d)), fgt, full(mean), full(g));
    }
  }
  return out;
}

std::string emit_table(const RunHistory& h, TableFormat format) { return emit_table(std::vector<RunHistory>{h}, format); }

std::vector<TableRow> parse_table_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  int number = 0;
  std::vector<TableRow> rows;
  while (std::getline(in, line)) {
    ++number;
    if (number == 1) {
      if (line != "method,eval_domain,miou,fgt,mean_miou,gain") {
        throw std::invalid_argument("row 1: unexpected table header");
      }
      continue;
    }
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 6) throw std::invalid_argument(fmt::format("row {}: expected 6 fields, got {}", number, f.size()));
    TableRow r{f[0], f[1], parse_double(f[2], number), std::nullopt, parse_double(f[4], number),
               parse_double(f[5], number)};
    if (!f[3].empty()) r.fgt = parse_double(f[3], number);
    rows.push_back(r);
  }
  return rows;
}

std::string comparison_table(const std::vector<RunHistory>& histories) {
  if (histories.empty()) return "";
  for (const auto& h : histories) {
    if (h.domains != histories.front().domains) {
      throw std::invalid_argument(fmt::format("histories '{}' and '{}' have different domain lists",
                                              histories.front().method, h.method));
    }
  }
  const auto& domains = histories.front().domains;
  const int last = static_cast<int>(domains.size()) - 1;
  std::string out = "Fgt";
  for (const auto& h : histories) out += " | " + h.method;
  out += "\n";
  for (int d = 1; d < last; ++d) {
    out += domains[d];
    for (const auto& h : histories) out += " | " + fgt_percent(forgetting(h, d, last));
    out += "\n";
  }
  return out;
}

std::string history_to_csv(const RunHistory& h) {
  std::string out = fmt::format("# config_hash={}\n# domains={}\nkind,method,checkpoint,eval_domain,miou\n",
                                h.config_hash, join(h.domains, ";"));
  for (const auto& [key, value] : h.entries) {
    out += fmt::format("eval,{},{},{},{}\n", h.method, key.first, h.domains.at(static_cast<std::size_t>(key.second)),
                       full(value));
  }
  for (const auto& [d, value] : h.source_only) {
    out += fmt::format("source_only,{},0,{},{}\n", h.method, h.domains.at(static_cast<std::size_t>(d)), full(value));
  }
  return out;
}

RunHistory history_from_csv(const std::string& text) {
  RunHistory h;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  bool header_seen = false, have_domains = false, have_method = false;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::invalid_argument(fmt::format("row {}: malformed header", number));
      const std::string key = line.substr(2, eq - 2), value = line.substr(eq + 1);
      if (key == "config_hash") {
        h.config_hash = value;
      } else if (key == "domains") {
        h.domains = split(value, ';');
        have_domains = !h.domains.empty();
      } else {
        throw std::invalid_argument(fmt::format("row {}: unknown header '{}'", number, key));
      }
      continue;
    }
    if (!header_seen) {
      if (line != "kind,method,checkpoint,eval_domain,miou") {
        throw std::invalid_argument(fmt::format("row {}: expected the column header", number));
      }
      if (!have_domains) throw std::invalid_argument(fmt::format("row {}: missing '# domains=' header", number));
      header_seen = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 5) throw std::invalid_argument(fmt::format("row {}: expected 5 fields, got {}", number, f.size()));
    if (have_method && f[1] != h.method) {
      throw std::invalid_argument(fmt::format("row {}: method '{}' differs from '{}'", number, f[1], h.method));
    }
    h.method = f[1];
    have_method = true;
    const int checkpoint = parse_int(f[2], number);
    int domain = -1;
    for (std::size_t i = 0; i < h.domains.size(); ++i) {
      if (h.domains[i] == f[3]) domain = static_cast<int>(i);
    }
    if (domain < 0) throw std::invalid_argument(fmt::format("row {}: unknown domain '{}'", number, f[3]));
    const double value = parse_double(f[4], number);
    try {
      if (f[0] == "eval") {
        h.set(checkpoint, domain, value);
      } else if (f[0] == "source_only") {
        if (domain == 0 || !(value >= 0.0 && value <= 1.0)) throw std::invalid_argument("bad source-only entry");
        h.source_only[domain] = value;
      } else {
        throw std::invalid_argument(fmt::format("unknown kind '{}'", f[0]));
      }
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(fmt::format("row {}: {}", number, e.what()));
    }
  }
  if (!header_seen) throw std::invalid_argument(fmt::format("row {}: no column header found", number + 1));
  return h;
}

}  // namespace etm::metrics
