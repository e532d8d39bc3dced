#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace clusterbreak::metrics {

/// counts(p, t) = number of samples with predicted cluster p and class t.
struct ContingencyTable {
  std::vector<std::vector<long>> counts;
  long n = 0;

  int rows() const { return static_cast<int>(counts.size()); }
  int cols() const { return counts.empty() ? 0 : static_cast<int>(counts.front().size()); }
};

ContingencyTable contingency(std::span<const int> pred, std::span<const int> truth);

/// Injective map from predicted cluster to class (phi). Clusters beyond the
/// class count map to placeholder indices >= k_true and never agree.
struct ClusterMapping {
  std::vector<int> assignment;
  int k_true = 0;

  int operator()(int cluster) const { return assignment.at(static_cast<std::size_t>(cluster)); }
};

struct MetricsReport {
  double nmi = 0.0;
  double ari = 0.0;
  double acc = 0.0;
  ContingencyTable confusion;
  ClusterMapping mapping;
};

/// Mutual information over the arithmetic mean of the two entropies
/// (natural log). Zero when either partition is a single cluster, unless
/// both are, in which case 1.
double nmi(std::span<const int> pred, std::span<const int> truth);

/// Adjusted Rand index from the contingency table.
double ari(std::span<const int> pred, std::span<const int> truth);

struct AccuracyResult {
  double acc = 0.0;
  ClusterMapping mapping;
};

/// Best agreement over injective cluster-to-class maps (optimal assignment).
AccuracyResult acc(std::span<const int> pred, std::span<const int> truth);

/// Confusion matrix with rows permuted by the mapping so the diagonal holds
/// agreements. Shape (max(k_pred, k_true), k_true).
ContingencyTable confusion(std::span<const int> pred, std::span<const int> truth, const ClusterMapping& mapping);

MetricsReport report(std::span<const int> pred, std::span<const int> truth);

/// Maximising assignment on a rectangular profit matrix (rows <= 64, cols <= 64).
/// Returns, for each row, its assigned column or -1 when rows > cols.
std::vector<int> max_assignment(const std::vector<std::vector<double>>& profit);

nlohmann::json to_json(const ContingencyTable& table);
nlohmann::json to_json(const MetricsReport& report);
std::string confusion_csv(const ContingencyTable& table);

/// Share of samples in the largest predicted cluster.
double largest_cluster_share(std::span<const int> pred);

}  // namespace clusterbreak::metrics
