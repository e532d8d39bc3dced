#include "clusterbreak/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "clusterbreak/error.hpp"

namespace clusterbreak::metrics {

namespace {

void check_pair(std::span<const int> pred, std::span<const int> truth, std::size_t min_len) {
  require(pred.size() == truth.size(), ErrorCode::length_mismatch,
          "label vectors differ in length (" + std::to_string(pred.size()) + " vs " + std::to_string(truth.size()) +
              ")");
  require(pred.size() >= min_len, ErrorCode::invalid_parameter,
          "need at least " + std::to_string(min_len) + " labels");
  for (int v : pred) require(v >= 0, ErrorCode::invalid_parameter, "labels must be non-negative");
  for (int v : truth) require(v >= 0, ErrorCode::invalid_parameter, "labels must be non-negative");
}

int label_count(std::span<const int> labels) {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

double entropy(const std::vector<long>& counts, long n) {
  double h = 0.0;
  for (long c : counts)
    if (c > 0) {
      const double p = static_cast<double>(c) / n;
      h -= p * std::log(p);
    }
  return h;
}

double choose2(long x) { return 0.5 * static_cast<double>(x) * static_cast<double>(x - 1); }

}  // namespace

ContingencyTable contingency(std::span<const int> pred, std::span<const int> truth) {
  check_pair(pred, truth, 0);
  ContingencyTable t;
  t.counts.assign(static_cast<std::size_t>(label_count(pred)),
                  std::vector<long>(static_cast<std::size_t>(label_count(truth)), 0));
  for (std::size_t i = 0; i < pred.size(); ++i)
    ++t.counts[static_cast<std::size_t>(pred[i])][static_cast<std::size_t>(truth[i])];
  t.n = static_cast<long>(pred.size());
  return t;
}

double nmi(std::span<const int> pred, std::span<const int> truth) {
  check_pair(pred, truth, 1);
  const ContingencyTable t = contingency(pred, truth);
  std::vector<long> a(static_cast<std::size_t>(t.rows()), 0), b(static_cast<std::size_t>(t.cols()), 0);
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) {
      a[static_cast<std::size_t>(i)] += t.counts[i][j];
      b[static_cast<std::size_t>(j)] += t.counts[i][j];
    }
  const double ha = entropy(a, t.n), hb = entropy(b, t.n);
  if (ha == 0.0 || hb == 0.0) return (ha == 0.0 && hb == 0.0) ? 1.0 : 0.0;
  double mi = 0.0;
  const double n = static_cast<double>(t.n);
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) {
      const long c = t.counts[i][j];
      if (c == 0) continue;
      mi += (c / n) * std::log(n * c / (static_cast<double>(a[static_cast<std::size_t>(i)]) * b[static_cast<std::size_t>(j)]));
    }
  return std::clamp(mi / (0.5 * (ha + hb)), 0.0, 1.0);
}

double ari(std::span<const int> pred, std::span<const int> truth) {
  check_pair(pred, truth, 2);
  const ContingencyTable t = contingency(pred, truth);
  double sum_cells = 0.0, sum_a = 0.0, sum_b = 0.0;
  std::vector<long> b(static_cast<std::size_t>(t.cols()), 0);
  for (int i = 0; i < t.rows(); ++i) {
    long row = 0;
    for (int j = 0; j < t.cols(); ++j) {
      sum_cells += choose2(t.counts[i][j]);
      row += t.counts[i][j];
      b[static_cast<std::size_t>(j)] += t.counts[i][j];
    }
    sum_a += choose2(row);
  }
  for (long c : b) sum_b += choose2(c);
  const double total = choose2(t.n);
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  // Both partitions trivial (one cluster each, or all singletons): perfect agreement.
  if (max_index == expected) return 1.0;
  return (sum_cells - expected) / (max_index - expected);
}

std::vector<int> max_assignment(const std::vector<std::vector<double>>& profit) {
  const int rows = static_cast<int>(profit.size());
  if (rows == 0) return {};
  const int cols = static_cast<int>(profit.front().size());
  require(rows <= 64 && cols <= 64, ErrorCode::invalid_parameter, "assignment limited to 64 x 64");
  const int n = std::max(rows, cols);
  // Hungarian algorithm (potentials form), minimising -profit on a padded square.
  auto cost = [&](int i, int j) { return (i < rows && j < cols) ? -profit[i][j] : 0.0; };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assigned(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) assigned[static_cast<std::size_t>(p[j] - 1)] = j - 1;
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const int j = assigned[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = j < cols ? j : -1;
  }
  return out;
}

AccuracyResult acc(std::span<const int> pred, std::span<const int> truth) {
  check_pair(pred, truth, 1);
  const ContingencyTable t = contingency(pred, truth);
  std::vector<std::vector<double>> profit(static_cast<std::size_t>(t.rows()),
                                          std::vector<double>(static_cast<std::size_t>(t.cols())));
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) profit[i][j] = static_cast<double>(t.counts[i][j]);
  const auto assigned = max_assignment(profit);

  AccuracyResult r;
  r.mapping.k_true = t.cols();
  int spare = t.cols();
  long agree = 0;
  for (int i = 0; i < t.rows(); ++i) {
    const int j = assigned[static_cast<std::size_t>(i)];
    if (j >= 0) {
      r.mapping.assignment.push_back(j);
      agree += t.counts[i][j];
    } else {
      r.mapping.assignment.push_back(spare++);
    }
  }
  r.acc = static_cast<double>(agree) / static_cast<double>(t.n);
  return r;
}

ContingencyTable confusion(std::span<const int> pred, std::span<const int> truth, const ClusterMapping& mapping) {
  check_pair(pred, truth, 0);
  const int k_true = std::max(mapping.k_true, label_count(truth));
  int rows = k_true;
  for (int m : mapping.assignment) rows = std::max(rows, m + 1);
  ContingencyTable t;
  t.counts.assign(static_cast<std::size_t>(rows), std::vector<long>(static_cast<std::size_t>(k_true), 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(pred[i] < static_cast<int>(mapping.assignment.size()), ErrorCode::invalid_parameter,
            "mapping does not cover predicted cluster " + std::to_string(pred[i]));
    ++t.counts[static_cast<std::size_t>(mapping(pred[i]))][static_cast<std::size_t>(truth[i])];
  }
  t.n = static_cast<long>(pred.size());
  return t;
}

MetricsReport report(std::span<const int> pred, std::span<const int> truth) {
  MetricsReport r;
  r.nmi = nmi(pred, truth);
  r.ari = pred.size() >= 2 ? ari(pred, truth) : 1.0;
  auto a = acc(pred, truth);
  r.acc = a.acc;
  r.mapping = std::move(a.mapping);
  r.confusion = confusion(pred, truth, r.mapping);
  return r;
}

double largest_cluster_share(std::span<const int> pred) {
  require(!pred.empty(), ErrorCode::invalid_parameter, "empty label vector");
  std::map<int, long> counts;
  for (int p : pred) ++counts[p];
  long best = 0;
  for (const auto& [_, c] : counts) best = std::max(best, c);
  return static_cast<double>(best) / static_cast<double>(pred.size());
}

nlohmann::json to_json(const ContingencyTable& table) { return table.counts; }

nlohmann::json to_json(const MetricsReport& report) {
  return {{"nmi", report.nmi},
          {"ari", report.ari},
          {"acc", report.acc},
          {"confusion", to_json(report.confusion)},
          {"mapping", report.mapping.assignment}};
}

std::string confusion_csv(const ContingencyTable& table) {
  std::ostringstream os;
  os << "cluster";
  for (int j = 0; j < table.cols(); ++j) os << ",class_" << j;
  os << '\n';
  for (int i = 0; i < table.rows(); ++i) {
    os << i;
    for (int j = 0; j < table.cols(); ++j) os << ',' << table.counts[i][j];
    os << '\n';
  }
  return os.str();
}

}  // namespace clusterbreak::metrics
