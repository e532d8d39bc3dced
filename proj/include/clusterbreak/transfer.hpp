#pragma once

// Transferability of adversarial samples across victims, and surrogate
// attacks against label-only album services.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clusterbreak/attack.hpp"
#include "clusterbreak/clustering.hpp"
#include "clusterbreak/data.hpp"
#include "clusterbreak/metrics.hpp"
#include "clusterbreak/mlaas.hpp"

namespace clusterbreak::transfer {

struct NamedModel {
  std::string id;
  std::shared_ptr<const clustering::ClusterModel> model;
};

struct TransferMatrix {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
  /// cells[s][t]; empty when the pair is shape-incompatible.
  std::vector<std::vector<std::optional<metrics::MetricsReport>>> cells;
  /// Clean-set metrics per target; empty when the target cannot read eval_set.
  std::vector<std::optional<metrics::MetricsReport>> pre;
};

/// Feeds generate_adversarial(G_s, eval_set) to every target t. Sources and
/// targets are the same list of victims; generators[s] belongs to victims[s].
TransferMatrix transfer_matrix(const std::vector<NamedModel>& victims,
                               const std::vector<attack::TrainedGenerator>& generators,
                               const data::Dataset& eval_set);

enum class Metric { nmi, ari, acc };
std::string_view to_string(Metric metric);

/// Square CSV with a header row of target ids and a first column of source
/// ids; skipped cells hold "skipped".
std::string matrix_csv(const TransferMatrix& matrix, Metric metric);
/// One row of clean baselines per target.
std::string baseline_csv(const TransferMatrix& matrix);
nlohmann::json to_json(const TransferMatrix& matrix);

struct SurrogateSettings {
  int images_per_identity = 10;
  int resamplings = 10;
  std::uint64_t seed = 0;
};

struct SurrogateRun {
  metrics::MetricsReport pre;
  metrics::MetricsReport post;
  std::vector<int> sample_ids;
};

struct SurrogateResult {
  std::vector<SurrogateRun> runs;
  double mean_pre_nmi = 0.0;
  double mean_post_nmi = 0.0;
  double mean_pre_ari = 0.0;
  double mean_post_ari = 0.0;
  double mean_pre_acc = 0.0;
  double mean_post_acc = 0.0;
  /// Ledger of the attack trained against the surrogate (zero when a
  /// generator was supplied).
  attack::QueryLedger ledger;
};

nlohmann::json to_json(const SurrogateResult& result);

/// Labels for one album built from `images` (clean or adversarial), via the
/// label-only API with retry-once semantics.
std::vector<int> album_labels(mlaas::AlbumApi& service, const data::ImageSet& images);

/// Runs the resampling protocol with a given generator: per resampling pick
/// `images_per_identity` samples of every class, submit the clean and the
/// adversarial album, score both against ground truth.
SurrogateResult surrogate_evaluate(mlaas::AlbumApi& target, const attack::TrainedGenerator& generator,
                                   const data::Dataset& dataset, const SurrogateSettings& settings);

/// Trains the attack against the surrogate on dataset.images(), then runs
/// surrogate_evaluate against the target.
SurrogateResult surrogate_attack(mlaas::AlbumApi& target, const clustering::ClusterModel& surrogate,
                                 const data::Dataset& dataset, const attack::AttackConfig& config,
                                 const SurrogateSettings& settings);

}  // namespace clusterbreak::transfer
