#pragma once

// Confusion matrices, accuracy / COVID sensitivity / COVID positive
// prediction, and side-by-side comparison tables.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cxr/cost.hpp"

namespace cxr {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 3) : n_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw std::invalid_argument("confusion matrix needs at least one class");
  }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
      if (rows[t].size() != rows.size()) throw std::invalid_argument("confusion matrix must be square");
      for (std::size_t p = 0; p < rows.size(); ++p) cm.counts_[t * cm.n_ + p] = rows[t][p];
    }
    return cm;
  }

  std::size_t classes() const noexcept { return n_; }

  void add(std::size_t truth, std::size_t predicted, std::uint64_t count = 1) {
    check(truth);
    check(predicted);
    counts_[truth * n_ + predicted] += count;
  }

  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    check(truth);
    check(predicted);
    return counts_[truth * n_ + predicted];
  }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : counts_) s += v;
    return s;
  }

  std::uint64_t tp(std::size_t c) const { return at(c, c); }

  /// Samples of class c predicted as something else (row off-diagonal).
  std::uint64_t fn(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < n_; ++p) s += p == c ? 0 : at(c, p);
    return s;
  }

  /// Samples predicted as c that belong elsewhere (column off-diagonal).
  std::uint64_t fp(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < n_; ++t) s += t == c ? 0 : at(t, c);
    return s;
  }

  std::uint64_t row_sum(std::size_t t) const { return tp(t) + fn(t); }

  /// Maps every class index through `to` (e.g. {0, 1, 1} merges classes 1
  /// and 2) on both axes.
  ConfusionMatrix merged(const std::vector<std::size_t>& to, std::size_t classes) const {
    if (to.size() != n_) throw std::invalid_argument("merge map must cover every class");
    ConfusionMatrix out(classes);
    for (std::size_t t = 0; t < n_; ++t) {
      for (std::size_t p = 0; p < n_; ++p) out.add(to[t], to[p], at(t, p));
    }
    return out;
  }

  std::string csv(const std::vector<std::string>& names) const {
    if (names.size() != n_) throw std::invalid_argument("one name per class required");
    std::ostringstream os;
    os << "true\\pred";
    for (const auto& n : names) os << ',' << n;
    os << '\n';
    for (std::size_t t = 0; t < n_; ++t) {
      os << names[t];
      for (std::size_t p = 0; p < n_; ++p) os << ',' << at(t, p);
      os << '\n';
    }
    return os.str();
  }

  std::string text(const std::vector<std::string>& names) const {
    if (names.size() != n_) throw std::invalid_argument("one name per class required");
    std::size_t width = 9;
    for (const auto& n : names) width = std::max(width, n.size());
    for (auto v : counts_) width = std::max(width, std::to_string(v).size());
    auto cell = [&](const std::string& s) { return std::string(width + 2 - s.size(), ' ') + s; };
    std::ostringstream os;
    os << cell("true\\pred");
    for (const auto& n : names) os << cell(n);
    os << '\n';
    for (std::size_t t = 0; t < n_; ++t) {
      os << cell(names[t]);
      for (std::size_t p = 0; p < n_; ++p) os << cell(std::to_string(at(t, p)));
      os << '\n';
    }
    return os.str();
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  void check(std::size_t c) const {
    if (c >= n_) throw std::out_of_range("class index " + std::to_string(c) + " out of range");
  }

  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

/// Ratios are empty when their denominator is zero.
struct MetricsReport {
  std::optional<double> accuracy;
  std::optional<double> covid_sensitivity;
  std::optional<double> covid_positive_prediction;
  std::uint64_t samples = 0;
};

inline constexpr std::size_t kCovidIndex = 2;

inline std::optional<double> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

/// Metrics of a 3-class (Normal, Pneumonia, COVID19) matrix.
inline MetricsReport metrics(const ConfusionMatrix& cm) {
  if (cm.classes() != 3) throw std::invalid_argument("metrics expect a 3-class confusion matrix");
  MetricsReport r;
  r.samples = cm.total();
  r.accuracy = ratio(cm.tp(0) + cm.tp(1) + cm.tp(2), r.samples);
  const auto tp = cm.tp(kCovidIndex);
  r.covid_sensitivity = ratio(tp, tp + cm.fn(kCovidIndex));
  r.covid_positive_prediction = ratio(tp, tp + cm.fp(kCovidIndex));
  return r;
}

/// One-decimal percentage, "undefined" for an empty ratio.
inline std::string percent(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", *v * 100.0);
  return buf;
}

inline std::string render(const MetricsReport& r) {
  return "Acc " + percent(r.accuracy) + "  Se_C " + percent(r.covid_sensitivity) + "  +P_C " +
         percent(r.covid_positive_prediction);
}

struct ComparisonRow {
  std::string name;
  MetricsReport metrics;
  CostReport cost;
};

struct ComparisonTable {
  std::string csv;
  std::string text;
};

/// Rows keep the given order.
inline ComparisonTable compare_report(const std::vector<ComparisonRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("compare_report needs at least one row");
  ComparisonTable out;
  std::ostringstream csv;
  csv << "model,accuracy,covid_sensitivity,covid_positive_prediction,params,macs,memory_mib\n";
  auto raw = [](const std::optional<double>& v) {
    if (!v) return std::string("undefined");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> cells{
      {"Model", "Acc", "Se_C", "+P_C", "#Params", "MACs", "Memory (MiB)"}};
  for (const auto& r : rows) {
    char mem[32];
    std::snprintf(mem, sizeof mem, "%.2f", r.cost.memory_mib());
    csv << r.name << ',' << raw(r.metrics.accuracy) << ',' << raw(r.metrics.covid_sensitivity) << ','
        << raw(r.metrics.covid_positive_prediction) << ',' << r.cost.param_count << ','
        << r.cost.mac_count << ',' << mem << '\n';
    cells.push_back({r.name, percent(r.metrics.accuracy), percent(r.metrics.covid_sensitivity),
                     percent(r.metrics.covid_positive_prediction), std::to_string(r.cost.param_count),
                     std::to_string(r.cost.mac_count), mem});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream text;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      const std::string pad(width[i] - row[i].size(), ' ');
      // model names left-aligned, numbers right-aligned
      text << (i == 0 ? row[i] + pad : pad + row[i]) << (i + 1 < row.size() ? "  " : "\n");
    }
  }
  out.csv = csv.str();
  out.text = text.str();
  return out;
}

}  // namespace cxr
