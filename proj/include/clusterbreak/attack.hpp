#pragma once

// GAN-based black-box attack on a clustering model.
//
// The generator G maps an image to a same-shape perturbation; the
// discriminator D scores realism. Training solves
//
//   max_D min_G  L - alpha_a * L_attack - alpha_c * L_constraint
//
// with L the minimax GAN loss (clean images real, perturbed fake),
// L_attack the mean Euclidean distance between clean and perturbed
// membership rows and L_constraint = mean min(eps - ||delta||, 0).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "clusterbreak/clustering.hpp"
#include "clusterbreak/data.hpp"
#include "clusterbreak/metrics.hpp"
#include "clusterbreak/nn.hpp"

namespace clusterbreak::attack {

struct AttackConfig {
  double alpha_a = 5.0;
  double alpha_c = 20.0;
  /// Per-sample budget on the Euclidean norm of the flattened perturbation.
  double epsilon = 0.5;
  int batch_size = 32;
  int max_batches = 300;
  double generator_lr = 5e-4;
  double discriminator_lr = 5e-4;
  /// Convergence: relative change between consecutive non-overlapping
  /// length-`window` means of the generator objective below `tau`, checked
  /// every `window` batches, on `patience` consecutive checks.
  int window = 20;
  double tau = 1e-3;
  int patience = 3;
  std::uint64_t seed = 0;
  std::optional<int> target;
  /// Reuse clean memberships after the first query of each sample.
  bool cache_clean_memberships = true;
  /// Channel width of the generator's first layer.
  int generator_width = 16;

  /// Throws config-validation naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const AttackConfig& config);
AttackConfig attack_config_from_json(const nlohmann::json& j);

struct QueryLedger {
  std::uint64_t batch_queries = 0;
  int batch_size = 0;
  std::uint64_t training_batches = 0;
  std::uint64_t cache_hits = 0;
};

nlohmann::json to_json(const QueryLedger& ledger);

/// Frozen perturbation generator; same image in, same perturbation out.
class TrainedGenerator {
 public:
  TrainedGenerator(nn::Sequential network, AttackConfig config, data::SampleShape shape);

  /// Raw perturbations delta = G(x), before adding or clipping.
  Tensor perturbation(const Tensor& pixels) const;

  const AttackConfig& config() const { return config_; }
  data::SampleShape input_shape() const { return shape_; }
  const nn::Sequential& network() const { return network_; }

  void save(const std::filesystem::path& path) const;
  static TrainedGenerator load(const std::filesystem::path& path);

  /// A generator whose output is identically zero.
  static TrainedGenerator identity(data::SampleShape shape, AttackConfig config = {});

 private:
  nn::Sequential network_;
  AttackConfig config_;
  data::SampleShape shape_;
};

/// Encoder-decoder perturbation network with a scaled tanh head bounding each
/// pixel of delta to [-s, s], s = 3 * epsilon / sqrt(c*h*w).
nn::Sequential make_generator_network(data::SampleShape shape, int width, double epsilon, nn::Rng& rng);
/// Small strided convolutional classifier ending in a sigmoid.
nn::Sequential make_discriminator_network(data::SampleShape shape, nn::Rng& rng);

struct AdversarialBatch {
  data::ImageBatch batch;
  /// Pre-clip ||delta_i||_2 per sample.
  std::vector<double> perturbation_norms;
};

/// clip(x + G(x), 0, 1). Never touches a victim model.
AdversarialBatch generate_adversarial(const TrainedGenerator& generator, const data::ImageBatch& batch);

/// Whole-set variant, processed in chunks.
data::ImageSet generate_adversarial_set(const TrainedGenerator& generator, const data::ImageSet& images,
                                        std::vector<double>* norms = nullptr);

// ---------------------------------------------------------------- losses

/// Mean over rows of ||pre_i - post_i||_2.
double attack_loss(const clustering::SoftMembership& pre, const clustering::SoftMembership& post);
double attack_loss(const Matrix& pre, const Matrix& post);
/// d attack_loss / d post. Rows with zero distance get a zero gradient.
Matrix attack_loss_gradient(const Matrix& pre, const Matrix& post);

/// Mean over samples of min(epsilon - ||delta_i||_2, 0).
double constraint_loss(const Tensor& perturbations, double epsilon);
Tensor constraint_loss_gradient(const Tensor& perturbations, double epsilon);

/// Batch mean of log d_real + log(1 - d_fake); scores clamped to [1e-7, 1 - 1e-7].
double gan_loss(std::span<const double> d_real, std::span<const double> d_fake);

/// ||target - post||_2 for a one-hot target row.
double targeted_objective(std::span<const double> target_one_hot, std::span<const double> post_row);
std::vector<double> one_hot(int k, int target);

struct ObjectiveTerms {
  double gan = 0.0;
  double attack = 0.0;
  double constraint = 0.0;
  double total = 0.0;
};

/// Generator-side objective on one batch:
///   untargeted: L - alpha_a * L_attack - alpha_c * L_constraint
///   targeted:   L + alpha_a * L_target - alpha_c * L_constraint
/// `reference` holds the clean memberships (or one-hot target rows).
/// Issues exactly one differentiable victim query. When `grads` is non-null
/// the generator parameter gradients are accumulated into it.
ObjectiveTerms generator_objective(const nn::Sequential& generator, const nn::Sequential& discriminator,
                                   const clustering::ClusterModel& victim, const Tensor& clean,
                                   const Matrix& reference, const AttackConfig& config, nn::Gradients* grads);

struct AttackResult {
  TrainedGenerator generator;
  QueryLedger ledger;
  bool converged = false;
  std::vector<double> objective_history;
};

/// Alternating saddle-point training: one D ascent step then one G descent
/// step per batch. Every victim query is recorded in the ledger.
AttackResult train_attack(const clustering::ClusterModel& victim, const data::ImageSet& images,
                          const AttackConfig& config);

// ---------------------------------------------------------------- evaluation

struct AttackEvaluation {
  metrics::MetricsReport pre;
  metrics::MetricsReport post;
  clustering::LabelVector pre_labels;
  clustering::LabelVector post_labels;
  std::vector<double> perturbation_norms;
  double mean_norm = 0.0;
  double max_norm = 0.0;
  double mean_image_norm = 0.0;
};

/// Scores the victim on clean and on generated adversarial images against
/// the held-out ground truth.
AttackEvaluation evaluate_attack(const clustering::ClusterModel& victim, const TrainedGenerator& generator,
                                 const data::Dataset& eval_set);

struct SweepPoint {
  double epsilon = 0.0;
  double mean_norm = 0.0;
  double max_norm = 0.0;
  metrics::MetricsReport post;
  QueryLedger ledger;
  bool converged = false;
};

struct SweepResult {
  metrics::MetricsReport pre;
  std::vector<SweepPoint> points;
};

/// One full attack per epsilon (ascending); post-attack metrics on eval_set.
SweepResult epsilon_sweep(const clustering::ClusterModel& victim, const data::ImageSet& train_images,
                          const data::Dataset& eval_set, const AttackConfig& base_config,
                          std::span<const double> epsilons);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace clusterbreak::attack
