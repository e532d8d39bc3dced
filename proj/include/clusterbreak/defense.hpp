#pragma once

// Defender-side tooling: a feature-space Mahalanobis anomaly detector,
// randomized injection trials, PCA overlap analysis and adversarial
// retraining of the toy clusterer.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "clusterbreak/attack.hpp"
#include "clusterbreak/clustering.hpp"
#include "clusterbreak/data.hpp"
#include "clusterbreak/tensor.hpp"

namespace clusterbreak::defense {

using clustering::FeatureExtractor;

/// Unit-norm embeddings of a trained toy clusterer.
FeatureExtractor encoder_features(std::shared_ptr<const clustering::ToyDeepClusterer> model);
/// Flattened pixels.
FeatureExtractor pixel_features();

struct GaussianComponent {
  Vector mean;
  Matrix covariance;  // already shrunk
};

class AnomalyDetector {
 public:
  /// Throws singular-covariance if any component's covariance is not
  /// positive definite.
  AnomalyDetector(FeatureExtractor extractor, std::vector<GaussianComponent> components, double shrinkage);

  /// min over components of sqrt((f - mu)^T Sigma^-1 (f - mu)).
  std::vector<double> score_features(const Matrix& features) const;
  std::vector<double> score(const Tensor& pixels) const;

  /// A sample is flagged when its score exceeds the threshold.
  std::vector<char> flag(const Tensor& pixels) const;

  const std::vector<GaussianComponent>& components() const { return components_; }
  double shrinkage() const { return shrinkage_; }
  double threshold() const { return threshold_; }
  bool calibrated() const { return calibrated_; }
  void set_threshold(double threshold);

 private:
  FeatureExtractor extractor_;
  std::vector<GaussianComponent> components_;
  std::vector<Matrix> cholesky_;  // lower factors
  double shrinkage_;
  double threshold_ = 0.0;
  bool calibrated_ = false;
};

/// (1 - lambda) * cov + lambda * (trace(cov) / d) * I.
Matrix shrink_covariance(const Matrix& covariance, double shrinkage);

/// k-means with `components` centres on the features, then one shrunk
/// Gaussian per centre.
AnomalyDetector fit_detector_on_features(const Matrix& features, FeatureExtractor extractor, int components,
                                         double shrinkage, std::uint64_t seed = 0);
AnomalyDetector fit_detector(const data::ImageSet& clean, FeatureExtractor extractor, int components,
                             double shrinkage, std::uint64_t seed = 0);

/// The ceil((1 - target_fpr) * n)-th smallest score (1-based).
double quantile_threshold(std::vector<double> scores, double target_fpr);

/// Sets and returns the threshold from a clean holdout of at least 100 samples.
double calibrate_threshold(AnomalyDetector& detector, const data::ImageSet& clean_holdout, double target_fpr);

/// Fraction of samples flagged.
double flag_rate(const AnomalyDetector& detector, const data::ImageSet& images);

struct TrialResult {
  int injected = 0;
  int detected = 0;
  int benign = 0;
  int false_positives = 0;
  double detection_rate = 0.0;
  double false_positive_rate = 0.0;
};

struct DetectionReport {
  int injected = 0;
  int detected = 0;
  int benign = 0;
  int false_positives = 0;
  int trials = 0;
  /// Averages of the per-trial rates.
  double detection_rate = 0.0;
  double false_positive_rate = 0.0;
  double threshold = 0.0;
  std::vector<TrialResult> per_trial;
};

nlohmann::json to_json(const DetectionReport& report);

/// Per trial every sample is independently replaced by its adversarial
/// version with probability `injection_probability`; the calibrated detector
/// then scores the mixed set.
DetectionReport injection_experiment(const AnomalyDetector& detector, const data::ImageSet& clean_set,
                                     const attack::TrainedGenerator& generator, int trials, std::uint64_t seed,
                                     double injection_probability = 0.5);

struct PcaOverlap {
  Matrix clean_coords;        // (n, m)
  Matrix adversarial_coords;  // (n, m)
  Vector explained_variance;  // (m)
  /// Fraction of adversarial points whose nearest other point is clean
  /// (ties count as clean).
  double overlap = 0.0;
};

/// PCA fitted on the union of both sets in pixel space.
PcaOverlap pca_overlap(const data::ImageSet& clean, const data::ImageSet& adversarial, int n_components = 3);

/// Columns sample_id, is_adversarial, pc1..pcm.
std::string pca_csv(const PcaOverlap& result);

struct RetrainSettings {
  int epochs = 1;
  int batch_size = 32;
  double learning_rate = 1e-4;
  /// Weight of KL(P || Q_adv).
  double adversarial_weight = 0.1;
  /// Weight of KL(Q_clean || Q_adv).
  double consistency_weight = 0.05;
  std::uint64_t seed = 0;
};

/// Fine-tunes a copy of the victim on clean and adversarial views of every
/// batch: KL(P || Q_clean) + a * KL(P || Q_adv) + w * KL(Q_clean || Q_adv), with P
/// the sharpened target of the clean memberships, recomputed per epoch.
std::shared_ptr<clustering::ToyDeepClusterer> adversarial_retrain(const clustering::ToyDeepClusterer& victim,
                                                                  const data::ImageSet& images,
                                                                  const attack::TrainedGenerator& generator,
                                                                  const RetrainSettings& settings);

}  // namespace clusterbreak::defense
