#include <numeric>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "etm/metrics/metrics.hpp"

using namespace etm;
using namespace etm::metrics;

namespace {

IntTensor grid(std::int64_t h, std::int64_t w, std::vector<std::int32_t> v) { return IntTensor({h, w}, std::move(v)); }

// Per-pixel counting loop, independent of the library's accumulation.
std::vector<std::vector<std::int64_t>> brute_counts(const IntTensor& pred, const IntTensor& label, int c, int ignore) {
  std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(c), std::vector<std::int64_t>(c, 0));
  for (std::int64_t y = 0; y < label.dim(0); ++y) {
    for (std::int64_t x = 0; x < label.dim(1); ++x) {
      const int l = label[y * label.dim(1) + x];
      if (l == ignore) continue;
      m[static_cast<std::size_t>(l)][static_cast<std::size_t>(pred[y * label.dim(1) + x])] += 1;
    }
  }
  return m;
}

double brute_miou(const std::vector<std::vector<std::int64_t>>& m) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    std::int64_t tp = m[k][k], fn = 0, fp = 0;
    for (std::size_t j = 0; j < m.size(); ++j) {
      if (j == k) continue;
      fn += m[k][j];
      fp += m[j][k];
    }
    if (tp + fn + fp == 0) continue;
    sum += static_cast<double>(tp) / static_cast<double>(tp + fn + fp);
    ++n;
  }
  return sum / n;
}

RunHistory reference_history() {
  RunHistory h;
  h.method = "ETM";
  h.domains = {"source", "T1", "T2"};
  h.set(1, 1, 0.4196);
  h.set(2, 1, 0.4061);
  h.set(2, 2, 0.4673);
  h.source_only = {{1, 0.3868}, {2, 0.3868}};
  return h;
}

}  // namespace

TEST_CASE("confusion matrix examples") {
  const IntTensor label = grid(2, 3, {0, 1, 2, 2, 1, 0});
  const auto m = confusion_matrix(label, label, 3);
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) CHECK(m.at(a, b) == (a == b ? 2 : 0));
  }
  const auto none = confusion_matrix(label, grid(2, 3, std::vector<std::int32_t>(6, 255)), 3);
  CHECK(none.total() == 0);
  CHECK_THROWS_AS(confusion_matrix(grid(1, 2, {0, 3}), grid(1, 2, {0, 1}), 3), std::invalid_argument);
  CHECK_THROWS_AS(confusion_matrix(grid(1, 2, {0, 1}), grid(1, 2, {0, 7}), 3), std::invalid_argument);
  CHECK_THROWS_AS(confusion_matrix(grid(1, 2, {0, 1}), grid(2, 1, {0, 1}), 3), std::invalid_argument);
}

TEST_CASE("confusion matrix and miou match a brute-force loop") {
  std::mt19937_64 rng(12);
  for (int c : {2, 3, 5}) {
    for (int trial = 0; trial < 100; ++trial) {
      IntTensor pred({8, 8}), label({8, 8});
      std::uniform_int_distribution<int> cls(0, c - 1);
      std::bernoulli_distribution ignored(0.1);
      for (std::int64_t i = 0; i < 64; ++i) {
        pred[i] = cls(rng);
        label[i] = ignored(rng) ? 255 : cls(rng);
      }
      const auto m = confusion_matrix(pred, label, c);
      const auto brute = brute_counts(pred, label, c, 255);
      std::int64_t valid = 0;
      for (auto v : label.data()) valid += v != 255;
      CHECK(m.total() == valid);
      for (int a = 0; a < c; ++a) {
        for (int b = 0; b < c; ++b) REQUIRE(m.at(a, b) == brute[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)]);
      }
      CHECK(miou(m).miou == brute_miou(brute));
    }
  }
}

TEST_CASE("miou examples") {
  const auto perfect = miou(confusion_matrix(grid(1, 2, {0, 1}), grid(1, 2, {0, 1}), 2));
  CHECK(*perfect.per_class[0] == 1.0);
  CHECK(*perfect.per_class[1] == 1.0);
  CHECK(perfect.miou == 1.0);

  const auto worked = miou(confusion_matrix(grid(2, 2, {0, 1, 1, 1}), grid(2, 2, {0, 0, 1, 1}), 2));
  CHECK(*worked.per_class[0] == doctest::Approx(0.5));
  CHECK(*worked.per_class[1] == doctest::Approx(2.0 / 3.0));
  CHECK(worked.miou == doctest::Approx(7.0 / 12.0).epsilon(1e-15));

  CHECK(miou(confusion_matrix(grid(1, 2, {1, 0}), grid(1, 2, {0, 1}), 2)).miou == 0.0);

  // An absent class is skipped or counted as zero.
  const auto m = confusion_matrix(grid(1, 2, {0, 1}), grid(1, 2, {0, 1}), 3);
  CHECK(miou(m, true).miou == 1.0);
  CHECK_FALSE(miou(m, true).per_class[2].has_value());
  CHECK(miou(m, false).miou == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(miou(ConfusionMatrix(3)), std::invalid_argument);
}

TEST_CASE("miou is equivariant under class relabelling") {
  std::mt19937_64 rng(5);
  const std::vector<int> perm{2, 0, 3, 1};
  for (int trial = 0; trial < 50; ++trial) {
    IntTensor pred({6, 6}), label({6, 6}), pp({6, 6}), pl({6, 6});
    for (std::int64_t i = 0; i < 36; ++i) {
      pred[i] = static_cast<int>(rng() % 4);
      label[i] = static_cast<int>(rng() % 4);
      pp[i] = perm[static_cast<std::size_t>(pred[i])];
      pl[i] = perm[static_cast<std::size_t>(label[i])];
    }
    const auto a = miou(confusion_matrix(pred, label, 4));
    const auto b = miou(confusion_matrix(pp, pl, 4));
    CHECK(a.miou == doctest::Approx(b.miou).epsilon(1e-12));
    for (int k = 0; k < 4; ++k) CHECK(a.per_class[static_cast<std::size_t>(k)] == b.per_class[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])]);
  }
}

TEST_CASE("forgetting and gain") {
  RunHistory h;
  h.method = "m";
  h.domains = {"source", "A", "B"};
  h.set(1, 1, 0.400);
  h.set(2, 1, 0.385);
  h.set(2, 2, 0.5);
  CHECK(forgetting(h, 1) == doctest::Approx(-0.015));
  CHECK(forgetting(h, 2) == 0.0);
  CHECK_THROWS_AS(forgetting(h, 0), std::invalid_argument);
  CHECK_THROWS_AS(gain(h), std::invalid_argument);

  h.set(2, 1, 0.3);
  h.source_only = {{1, 0.35}, {2, 0.35}};
  CHECK(gain(h) == doctest::Approx(0.05));
  h.source_only = {{1, 0.3}, {2, 0.5}};
  CHECK(gain(h) == doctest::Approx(0.0).scale(1.0));

  // Reference row: 43.67 mean against a 38.68 source-only mean.
  const RunHistory p = reference_history();
  CHECK(gain(p) == doctest::Approx(0.0499));
  CHECK(forgetting(p, 1) == doctest::Approx(-0.0135));
  // 40.61 - (-1.35) recovers the 41.96 measured right after the first target.
  CHECK(100.0 * (p.get(2, 1) - forgetting(p, 1)) == doctest::Approx(41.96));

  CHECK_THROWS_AS(h.set(1, 2, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(h.set(2, 1, 1.5), std::invalid_argument);
}

TEST_CASE("table rendering") {
  const RunHistory p = reference_history();
  CHECK(format_row(p) == "T1: 40.61 (-1.35) | T2: 46.73 | Mean 43.67 | Gain +4.99");
  CHECK(emit_table(p, TableFormat::Text) == "ETM | T1: 40.61 (-1.35) | T2: 46.73 | Mean 43.67 | Gain +4.99\n");

  RunHistory single;
  single.method = "one";
  single.domains = {"src", "only"};
  single.set(1, 1, 0.5);
  single.source_only = {{1, 0.4}};
  CHECK(format_row(single) == "only: 50.00 | Mean 50.00 | Gain +10.00");

  RunHistory improved = p;
  improved.set(1, 1, 0.4061);
  improved.set(2, 1, 0.4068);
  CHECK(format_row(improved).starts_with("T1: 40.68 (+0.07) |"));

  RunHistory incomplete = p;
  incomplete.entries.erase({2, 1});
  incomplete.source_only.erase(2);
  CHECK_THROWS_WITH_AS(format_row(incomplete), doctest::Contains("(T2, T1)"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(format_row(incomplete), doctest::Contains("source-only T2"), std::invalid_argument);
}

TEST_CASE("csv table round trip") {
  RunHistory other = reference_history();
  other.method = "baseline";
  other.set(2, 1, 1.0 / 3.0);
  const auto rows = parse_table_csv(emit_table({reference_history(), other}, TableFormat::Csv));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].method == "ETM");
  CHECK(rows[0].eval_domain == "T1");
  CHECK(rows[0].miou == 0.4061);
  CHECK(*rows[0].fgt == forgetting(reference_history(), 1));
  CHECK_FALSE(rows[1].fgt.has_value());
  CHECK(rows[1].mean_miou == mean_miou(reference_history()));
  CHECK(rows[1].gain == gain(reference_history()));
  CHECK(rows[2].miou == 1.0 / 3.0);
  CHECK_THROWS_AS(parse_table_csv("method,eval_domain,miou,fgt,mean_miou,gain\nx,y,0.5\n"), std::invalid_argument);
}

TEST_CASE("history csv round trip and errors") {
  RunHistory h = reference_history();
  h.config_hash = "0badf00d";
  h.set(0, 0, 0.91);
  h.set(1, 0, 2.0 / 3.0);
  const std::string csv = history_to_csv(h);
  const RunHistory back = history_from_csv(csv);
  CHECK(back.method == h.method);
  CHECK(back.domains == h.domains);
  CHECK(back.entries == h.entries);
  CHECK(back.source_only == h.source_only);
  CHECK(back.config_hash == h.config_hash);
  CHECK(history_to_csv(back) == csv);

  CHECK_THROWS_WITH_AS(history_from_csv("# domains=a;b\nkind,method,checkpoint,eval_domain,miou\neval,m,1,b\n"),
                       doctest::Contains("row 3"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(history_from_csv("# domains=a;b\nkind,method,checkpoint,eval_domain,miou\neval,m,1,c,0.5\n"),
                       doctest::Contains("row 3"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(history_from_csv("# domains=a;b\nkind,method,checkpoint,eval_domain,miou\neval,m,x,b,0.5\n"),
                       doctest::Contains("row 3"), std::invalid_argument);
  CHECK_THROWS_AS(history_from_csv("kind,method,checkpoint,eval_domain,miou\n"), std::invalid_argument);
  CHECK_THROWS_AS(history_from_csv(""), std::invalid_argument);
}

TEST_CASE("comparison table") {
  RunHistory a = reference_history(), b = reference_history();
  b.method = "noTM";
  b.set(2, 1, 0.3455);
  const std::string t = comparison_table({a, b});
  CHECK(t == "Fgt | ETM | noTM\nT1 | -1.35 | -7.41\n");
  b.domains[2] = "IDD";
  CHECK_THROWS_AS(comparison_table({a, b}), std::invalid_argument);
}
