#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "clusterbreak/data.hpp"
#include "clusterbreak/nn.hpp"
#include "clusterbreak/tensor.hpp"

namespace clusterbreak::clustering {

/// Row-stochastic (b, k) matrix of cluster probabilities.
class SoftMembership {
 public:
  SoftMembership() = default;
  /// Validates entries in [0, 1], rows summing to 1 within 1e-5, and k >= 2.
  explicit SoftMembership(Matrix probs);

  const Matrix& probs() const { return probs_; }
  int rows() const { return static_cast<int>(probs_.rows()); }
  int k() const { return static_cast<int>(probs_.cols()); }

 private:
  Matrix probs_;
};

using LabelVector = std::vector<int>;

/// Per-row argmax; ties resolve to the lowest cluster index.
LabelVector hard_labels(const SoftMembership& m);

/// Vector-Jacobian product of a query: maps dLoss/dM to dLoss/dpixels.
using Pullback = std::function<Tensor(const Matrix& d_membership)>;

struct DifferentiableQuery {
  SoftMembership memberships;
  Pullback pullback;
};

/// Query-only view of a frozen clustering model. Every call to query() or
/// query_differentiable() counts as exactly one (batch) query.
class ClusterModel {
 public:
  virtual ~ClusterModel() = default;

  virtual int k() const = 0;
  virtual data::SampleShape input_shape() const = 0;
  virtual std::string kind() const = 0;

  SoftMembership query(const data::ImageBatch& batch) const;
  /// Same observation as query() plus the pullback the attacker trains through.
  DifferentiableQuery query_differentiable(const data::ImageBatch& batch) const;

  std::uint64_t query_count() const { return queries_.load(); }

  virtual void save(const std::filesystem::path& path) const = 0;

 protected:
  ClusterModel() = default;
  ClusterModel(const ClusterModel&) : queries_(0) {}
  ClusterModel& operator=(const ClusterModel&) { return *this; }

  virtual Matrix evaluate(const Tensor& pixels) const = 0;
  virtual std::pair<Matrix, Pullback> evaluate_with_pullback(const Tensor& pixels) const = 0;

 private:
  void check_batch(const data::ImageBatch& batch) const;

  mutable std::atomic<std::uint64_t> queries_{0};
};

/// Exposes hard labels only; soft memberships never leave this wrapper.
class LabelOnlyModel {
 public:
  explicit LabelOnlyModel(std::shared_ptr<const ClusterModel> inner) : inner_(std::move(inner)) {}

  LabelVector labels(const data::ImageBatch& batch) const { return hard_labels(inner_->query(batch)); }
  int k() const { return inner_->k(); }

 private:
  std::shared_ptr<const ClusterModel> inner_;
};

// ---------------------------------------------------------------- k-means

struct KMeansResult {
  Matrix centroids;  // (k, d)
  std::vector<int> labels;
  double inertia = 0.0;
};

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
/// inertia. Throws degenerate-clustering if a cluster ends up empty.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int restarts = 4, int max_iterations = 100);

/// Row-wise softmax of -||x - c_j||^2 / temperature.
Matrix distance_softmax(const Matrix& points, const Matrix& centroids, double temperature);

/// Pixel-space k-means exposed through the query interface (temperature 1).
class KMeansModel final : public ClusterModel {
 public:
  KMeansModel(Matrix centroids, data::SampleShape shape, double temperature = 1.0);

  int k() const override { return static_cast<int>(centroids_.rows()); }
  data::SampleShape input_shape() const override { return shape_; }
  std::string kind() const override { return "kmeans_model"; }
  const Matrix& centroids() const { return centroids_; }

  void save(const std::filesystem::path& path) const override;
  static std::shared_ptr<KMeansModel> load(const std::filesystem::path& path);

 protected:
  Matrix evaluate(const Tensor& pixels) const override;
  std::pair<Matrix, Pullback> evaluate_with_pullback(const Tensor& pixels) const override;

 private:
  Matrix centroids_;
  data::SampleShape shape_;
  double temperature_;
};

std::shared_ptr<KMeansModel> kmeans_baseline(const data::ImageSet& images, int k, std::uint64_t seed);

// ---------------------------------------------------------------- toy deep clusterer

struct TrainerSettings {
  int embedding_dim = 10;
  int hidden_units = 32;
  int pretrain_epochs = 25;
  int refine_epochs = 10;
  int batch_size = 32;
  double learning_rate = 3e-3;
  double temperature = 1.0;
  /// Weight of the reconstruction loss kept during self-training (0 disables).
  double reconstruction_weight = 1.0;
  std::uint64_t seed = 0;
};

/// Conv encoder -> unit-norm embedding; soft assignment is the softmax of
/// negative squared distances to unit-norm centroids over the temperature.
class ToyDeepClusterer final : public ClusterModel {
 public:
  ToyDeepClusterer(nn::Sequential encoder, Matrix centroids, double temperature, data::SampleShape shape);

  int k() const override { return static_cast<int>(centroids_.rows()); }
  data::SampleShape input_shape() const override { return shape_; }
  std::string kind() const override { return "toy_deep_clusterer"; }

  /// Unit-norm embeddings (n, d). Not a victim query; used by defenders that
  /// own the encoder.
  Matrix embed(const Tensor& pixels) const;

  const nn::Sequential& encoder() const { return encoder_; }
  const Matrix& centroids() const { return centroids_; }
  double temperature() const { return temperature_; }

  void save(const std::filesystem::path& path) const override;
  static std::shared_ptr<ToyDeepClusterer> load(const std::filesystem::path& path);

  // Training access (used by the trainer and adversarial retraining).
  nn::Sequential& mutable_encoder() { return encoder_; }
  Matrix& mutable_centroids() { return centroids_; }

 protected:
  Matrix evaluate(const Tensor& pixels) const override;
  std::pair<Matrix, Pullback> evaluate_with_pullback(const Tensor& pixels) const override;

 private:
  nn::Sequential encoder_;
  Matrix centroids_;
  double temperature_;
  data::SampleShape shape_;
};

/// Forward state of a soft assignment, kept for the backward pass.
struct AssignmentTrace {
  nn::Trace encoder;
  Matrix raw;         // encoder outputs (b, d)
  Vector norms;       // ||raw_i||
  Matrix embeddings;  // unit rows (b, d)
  Matrix q;           // (b, k)
};

/// Forward used in training: records everything needed by assignment_backward.
Matrix assignment_forward(const ToyDeepClusterer& model, const Tensor& pixels, AssignmentTrace& trace);

/// Given dLoss/dlogits (b, k) where logits = -||z - c||^2 / T, accumulates
/// encoder gradients (if non-null) and centroid gradients (if non-null) and
/// returns dLoss/dpixels.
Tensor assignment_backward(const ToyDeepClusterer& model, const AssignmentTrace& trace, const Matrix& d_logits,
                           nn::Gradients* encoder_grads, Matrix* centroid_grads);

/// Softmax Jacobian-vector product: maps dLoss/dq to dLoss/dlogits row-wise.
Matrix softmax_backward(const Matrix& q, const Matrix& dq);

/// Classic self-training target: q^2 / cluster frequency, row-normalised.
Matrix sharpened_target(const Matrix& q);

/// Two-phase training: autoencoder pretraining, k-means init on embeddings,
/// then self-training towards the sharpened target. Labels are never seen.
std::shared_ptr<ToyDeepClusterer> train_toy_clusterer(const data::ImageSet& images, int k,
                                                      const TrainerSettings& settings);

/// Hard labels for a whole image set, queried in chunks of `chunk` samples.
LabelVector predict(const ClusterModel& model, const data::ImageSet& images, int chunk = 256);

/// Maps a (b, c, h, w) batch to (b, d) features.
using FeatureExtractor = std::function<Matrix(const Tensor& pixels)>;

/// Loads either checkpoint kind.
std::shared_ptr<ClusterModel> load_cluster_model(const std::filesystem::path& path);

}  // namespace clusterbreak::clustering
