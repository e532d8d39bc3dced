#pragma once

// Config-driven experiment runs and report tables.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clusterbreak/attack.hpp"
#include "clusterbreak/clustering.hpp"
#include "clusterbreak/data.hpp"
#include "clusterbreak/defense.hpp"

namespace clusterbreak::run {

inline constexpr const char* kReportSchema = "clusterbreak.run_report/1";

struct RunConfig {
  std::string kind = "attack";  // train|attack|sweep|transfer|defend|attack-mlaas
  std::string model_id;         // defaults to the victim file stem or "toy"

  // Dataset: "synthetic", "folder:<dir>" or "file:<path>".
  std::string dataset = "synthetic";
  int n_per_class = 600;
  int k_true = 4;
  double class_separation = 5.0;
  int channels = 1;
  int height = 12;
  int width = 12;
  std::uint64_t data_seed = 0;
  double holdout_fraction = 0.3;

  // Clusterer.
  std::string model = "toy";  // toy|kmeans
  int k = 0;                  // 0 = k_true
  clustering::TrainerSettings trainer;

  std::string victim;
  std::vector<std::string> victims;
  std::string generator;
  std::vector<std::string> generators;

  attack::AttackConfig attack;
  std::vector<double> epsilons{0.05, 0.1, 0.2, 0.5};

  // Defense.
  std::string mode = "anomaly";  // anomaly|retrain|pca
  int components = 4;
  double shrinkage = 0.1;
  double target_fpr = 0.05;
  int trials = 10;
  int injection_images = 800;
  defense::RetrainSettings retrain;

  // Service.
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string backend;
  std::uint64_t backend_seed = 2;
  double threshold = 0.9;
  double rate_limit = 0.0;
  std::string storage;
  /// "host:port" of a running service for attack-mlaas; empty uses an
  /// in-process mock.
  std::string service;
  int images_per_identity = 10;
  int resamplings = 10;

  std::string reports;
  std::filesystem::path out = "out";
  std::uint64_t seed = 0;

  /// Sets one field from its flat-file key; throws config-validation naming
  /// the key on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  /// Field-level checks; referenced paths must exist.
  void validate() const;
};

/// Flat "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> read_flat_config(const std::filesystem::path& path);
/// File values first, then overrides (CLI flags win).
RunConfig make_config(const std::map<std::string, std::string>& file_values,
                      const std::map<std::string, std::string>& overrides);

nlohmann::json to_json(const RunConfig& config);

/// Output root from CLUSTERBREAK_OUT when set, else "out".
std::filesystem::path default_out_root();

data::Dataset load_dataset(const RunConfig& config);
/// Deterministic (train, holdout) split derived from the master seed.
std::pair<data::Dataset, data::Dataset> split_dataset(const RunConfig& config, const data::Dataset& dataset);

/// Dispatches on config.kind, writes report.json plus CSV tables into
/// config.out and returns the report.
nlohmann::json run(const RunConfig& config);

/// Trains or loads the grouping backend and serves HTTP until stopped.
void serve(const RunConfig& config);

/// Histogram with `bins` equal-width bins over [0, max].
nlohmann::json histogram(const std::vector<double>& values, int bins = 20);

/// Throws missing-field / schema-mismatch when the report is malformed.
void validate_report(const nlohmann::json& report);

/// Reads every report.json under `report_dir` (recursively) and writes
/// table1.csv, query_complexity.csv, sweep.csv and transfer_*.csv into it.
/// Returns the written paths.
std::vector<std::filesystem::path> render_tables(const std::filesystem::path& report_dir);

/// Serialises without the wall-clock field, for determinism checks.
std::string canonical_dump(const nlohmann::json& report);

}  // namespace clusterbreak::run
