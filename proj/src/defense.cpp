#include "clusterbreak/defense.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include "clusterbreak/error.hpp"

namespace clusterbreak::defense {

FeatureExtractor encoder_features(std::shared_ptr<const clustering::ToyDeepClusterer> model) {
  require(model != nullptr, ErrorCode::invalid_parameter, "null encoder model");
  return [model](const Tensor& pixels) { return model->embed(pixels); };
}

FeatureExtractor pixel_features() {
  return [](const Tensor& pixels) { return pixels.as_matrix(); };
}

Matrix shrink_covariance(const Matrix& covariance, double shrinkage) {
  require(shrinkage > 0.0 && shrinkage <= 1.0, ErrorCode::invalid_parameter, "shrinkage must lie in (0, 1]");
  const auto d = covariance.rows();
  const double mu = covariance.trace() / static_cast<double>(d);
  Matrix out = (1.0 - shrinkage) * covariance;
  out.diagonal().array() += shrinkage * mu;
  return out;
}

AnomalyDetector::AnomalyDetector(FeatureExtractor extractor, std::vector<GaussianComponent> components,
                                 double shrinkage)
    : extractor_(std::move(extractor)), components_(std::move(components)), shrinkage_(shrinkage) {
  require(!components_.empty(), ErrorCode::invalid_parameter, "detector needs at least one component");
  for (const auto& c : components_) {
    require(c.covariance.rows() == c.mean.size() && c.covariance.cols() == c.mean.size(), ErrorCode::shape_mismatch,
            "component mean and covariance disagree in dimension");
    Eigen::LLT<Eigen::MatrixXd> llt(c.covariance);
    const Eigen::MatrixXd l = llt.matrixL();
    const double floor = 1e-12 * std::max(1.0, c.covariance.diagonal().cwiseAbs().maxCoeff());
    if (llt.info() != Eigen::Success || !l.allFinite() || l.diagonal().minCoeff() * l.diagonal().minCoeff() <= floor)
      fail(ErrorCode::singular_covariance, "component covariance is not positive definite; increase shrinkage");
    cholesky_.push_back(l);
  }
}

std::vector<double> AnomalyDetector::score_features(const Matrix& features) const {
  require(features.cols() == components_.front().mean.size(), ErrorCode::shape_mismatch,
          "feature dimension differs from the fitted detector");
  std::vector<double> out(static_cast<std::size_t>(features.rows()), std::numeric_limits<double>::infinity());
  for (std::size_t c = 0; c < components_.size(); ++c) {
    const auto& l = cholesky_[c];
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
      const Eigen::VectorXd diff = features.row(i).transpose() - components_[c].mean;
      const Eigen::VectorXd y = l.triangularView<Eigen::Lower>().solve(diff);
      out[static_cast<std::size_t>(i)] = std::min(out[static_cast<std::size_t>(i)], y.norm());
    }
  }
  return out;
}

std::vector<double> AnomalyDetector::score(const Tensor& pixels) const { return score_features(extractor_(pixels)); }

std::vector<char> AnomalyDetector::flag(const Tensor& pixels) const {
  const auto s = score(pixels);
  std::vector<char> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] > threshold_ ? 1 : 0;
  return out;
}

void AnomalyDetector::set_threshold(double threshold) {
  require(std::isfinite(threshold) && threshold >= 0.0, ErrorCode::invalid_parameter, "threshold must be >= 0");
  threshold_ = threshold;
  calibrated_ = true;
}

AnomalyDetector fit_detector_on_features(const Matrix& features, FeatureExtractor extractor, int components,
                                         double shrinkage, std::uint64_t seed) {
  require(components >= 1, ErrorCode::invalid_parameter, "components must be >= 1");
  require(shrinkage > 0.0 && shrinkage <= 1.0, ErrorCode::invalid_parameter, "shrinkage must lie in (0, 1]");
  require(features.rows() > components, ErrorCode::insufficient_data, "fewer feature rows than components");
  std::vector<int> labels(static_cast<std::size_t>(features.rows()), 0);
  if (components > 1) labels = clustering::kmeans(features, components, seed).labels;

  std::vector<GaussianComponent> out;
  for (int c = 0; c < components; ++c) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) rows.push_back(static_cast<Eigen::Index>(i));
    require(!rows.empty(), ErrorCode::degenerate_clustering, "empty detector component");
    Matrix x(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) x.row(static_cast<Eigen::Index>(r)) = features.row(rows[r]);
    GaussianComponent g;
    g.mean = x.colwise().mean().transpose();
    const Matrix centred = x.rowwise() - g.mean.transpose();
    g.covariance = shrink_covariance(centred.transpose() * centred / static_cast<double>(x.rows()), shrinkage);
    out.push_back(std::move(g));
  }
  return AnomalyDetector(std::move(extractor), std::move(out), shrinkage);
}

AnomalyDetector fit_detector(const data::ImageSet& clean, FeatureExtractor extractor, int components,
                             double shrinkage, std::uint64_t seed) {
  const Matrix features = extractor(clean.pixels());
  return fit_detector_on_features(features, std::move(extractor), components, shrinkage, seed);
}

double quantile_threshold(std::vector<double> scores, double target_fpr) {
  require(target_fpr > 0.0 && target_fpr < 1.0, ErrorCode::invalid_parameter, "target_fpr must lie in (0, 1)");
  require(!scores.empty(), ErrorCode::insufficient_data, "no scores");
  const double pos = (1.0 - target_fpr) * static_cast<double>(scores.size());
  auto rank = static_cast<std::size_t>(std::ceil(pos - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, scores.size());
  std::nth_element(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(rank - 1), scores.end());
  return scores[rank - 1];
}

double calibrate_threshold(AnomalyDetector& detector, const data::ImageSet& clean_holdout, double target_fpr) {
  require(target_fpr > 0.0 && target_fpr < 1.0, ErrorCode::invalid_parameter, "target_fpr must lie in (0, 1)");
  require(clean_holdout.size() >= 100, ErrorCode::insufficient_data, "calibration holdout needs at least 100 samples");
  const double t = quantile_threshold(detector.score(clean_holdout.pixels()), target_fpr);
  detector.set_threshold(t);
  return t;
}

double flag_rate(const AnomalyDetector& detector, const data::ImageSet& images) {
  const auto f = detector.flag(images.pixels());
  return static_cast<double>(std::count(f.begin(), f.end(), 1)) / static_cast<double>(f.size());
}

nlohmann::json to_json(const DetectionReport& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.per_trial)
    trials.push_back({{"injected", t.injected},
                      {"detected", t.detected},
                      {"benign", t.benign},
                      {"false_positives", t.false_positives},
                      {"detection_rate", t.detection_rate},
                      {"false_positive_rate", t.false_positive_rate}});
  return {{"injected", r.injected},
          {"detected", r.detected},
          {"benign", r.benign},
          {"false_positives", r.false_positives},
          {"trials", r.trials},
          {"detection_rate", r.detection_rate},
          {"false_positive_rate", r.false_positive_rate},
          {"threshold", r.threshold},
          {"per_trial", trials}};
}

DetectionReport injection_experiment(const AnomalyDetector& detector, const data::ImageSet& clean_set,
                                     const attack::TrainedGenerator& generator, int trials, std::uint64_t seed,
                                     double injection_probability) {
  require(trials >= 1, ErrorCode::invalid_parameter, "trials must be >= 1");
  require(injection_probability >= 0.0 && injection_probability <= 1.0, ErrorCode::invalid_parameter,
          "injection probability must lie in [0, 1]");
  require(detector.calibrated(), ErrorCode::invalid_parameter, "detector threshold has not been calibrated");
  // The generator is deterministic, so each sample has exactly one adversarial version.
  const auto adversarial = attack::generate_adversarial_set(generator, clean_set);
  const auto clean_flags = detector.flag(clean_set.pixels());
  const auto adv_flags = detector.flag(adversarial.pixels());

  DetectionReport report;
  report.trials = trials;
  report.threshold = detector.threshold();
  for (int t = 0; t < trials; ++t) {
    std::mt19937_64 rng(data::derive_seed(seed, static_cast<std::uint64_t>(t)));
    std::bernoulli_distribution inject(injection_probability);
    TrialResult tr;
    for (std::size_t i = 0; i < clean_flags.size(); ++i) {
      if (inject(rng)) {
        ++tr.injected;
        tr.detected += adv_flags[i];
      } else {
        ++tr.benign;
        tr.false_positives += clean_flags[i];
      }
    }
    tr.detection_rate = tr.injected ? static_cast<double>(tr.detected) / tr.injected : 0.0;
    tr.false_positive_rate = tr.benign ? static_cast<double>(tr.false_positives) / tr.benign : 0.0;
    report.injected += tr.injected;
    report.detected += tr.detected;
    report.benign += tr.benign;
    report.false_positives += tr.false_positives;
    report.detection_rate += tr.detection_rate / trials;
    report.false_positive_rate += tr.false_positive_rate / trials;
    report.per_trial.push_back(tr);
  }
  return report;
}

PcaOverlap pca_overlap(const data::ImageSet& clean, const data::ImageSet& adversarial, int n_components) {
  require(clean.size() == adversarial.size() && clean.size() >= 1, ErrorCode::length_mismatch,
          "clean and adversarial sets must have equal, non-zero counts");
  require(clean.sample_shape() == adversarial.sample_shape(), ErrorCode::shape_mismatch,
          "clean and adversarial images differ in shape");
  const Matrix a = clean.pixels().as_matrix();
  const Matrix b = adversarial.pixels().as_matrix();
  const auto n = a.rows();
  require(n_components >= 1 && n_components <= a.cols(), ErrorCode::invalid_parameter,
          "n_components outside [1, feature dimension]");

  Matrix x(2 * n, a.cols());
  x << a, b;
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  require(x.squaredNorm() > 0.0, ErrorCode::degenerate_variance, "union of samples has zero variance");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  const auto m = std::min<Eigen::Index>(n_components, svd.singularValues().size());
  Matrix v = svd.matrixV().leftCols(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    Eigen::Index arg = 0;
    v.col(j).cwiseAbs().maxCoeff(&arg);
    if (v(arg, j) < 0.0) v.col(j) *= -1.0;
  }
  const Matrix coords = x * v;

  PcaOverlap out;
  out.clean_coords = coords.topRows(n);
  out.adversarial_coords = coords.bottomRows(n);
  out.explained_variance = svd.singularValues().head(m).array().square() / static_cast<double>(2 * n);

  long clean_nearest = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd p = out.adversarial_coords.row(i);
    const double dc = (out.clean_coords.rowwise() - p).rowwise().squaredNorm().minCoeff();
    double da = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) da = std::min(da, (out.adversarial_coords.row(j) - p).squaredNorm());
    clean_nearest += dc <= da ? 1 : 0;
  }
  out.overlap = static_cast<double>(clean_nearest) / static_cast<double>(n);
  return out;
}

std::string pca_csv(const PcaOverlap& r) {
  std::ostringstream os;
  os.precision(10);
  os << "sample_id,is_adversarial";
  for (Eigen::Index j = 0; j < r.clean_coords.cols(); ++j) os << ",pc" << j + 1;
  os << '\n';
  auto rows = [&](const Matrix& m, int flag) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      os << i << ',' << flag;
      for (Eigen::Index j = 0; j < m.cols(); ++j) os << ',' << m(i, j);
      os << '\n';
    }
  };
  rows(r.clean_coords, 0);
  rows(r.adversarial_coords, 1);
  return os.str();
}

std::shared_ptr<clustering::ToyDeepClusterer> adversarial_retrain(const clustering::ToyDeepClusterer& victim,
                                                                  const data::ImageSet& images,
                                                                  const attack::TrainedGenerator& generator,
                                                                  const RetrainSettings& s) {
  require(s.epochs >= 0 && s.batch_size >= 1 && s.learning_rate > 0.0 && s.adversarial_weight >= 0.0 &&
              s.consistency_weight >= 0.0,
          ErrorCode::invalid_parameter, "invalid retraining settings");
  require(images.sample_shape() == victim.input_shape() && generator.input_shape() == victim.input_shape(),
          ErrorCode::shape_mismatch, "victim, generator and images disagree in shape");
  auto model = std::make_shared<clustering::ToyDeepClusterer>(victim);
  if (s.epochs == 0) return model;

  const data::ImageSet adversarial = attack::generate_adversarial_set(generator, images);
  Tensor centroid_param = Tensor::from_matrix(model->centroids());
  nn::Adam enc_opt(model->mutable_encoder().parameters(), {s.learning_rate});
  nn::Adam cen_opt({&centroid_param}, {s.learning_rate});
  const int batch_size = std::min(s.batch_size, images.size());

  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    const Matrix target = clustering::sharpened_target(
        clustering::distance_softmax(model->embed(images.pixels()), model->centroids(), model->temperature()));
    for (const auto& ids :
         data::batch_indices(images.size(), batch_size, true, data::derive_seed(s.seed, 5000 + epoch))) {
      const Tensor xc = gather_samples(images.pixels(), ids);
      const Tensor xa = gather_samples(adversarial.pixels(), ids);
      clustering::AssignmentTrace tc, ta;
      const Matrix qc = clustering::assignment_forward(*model, xc, tc);
      const Matrix qa = clustering::assignment_forward(*model, xa, ta);
      Matrix p(qc.rows(), qc.cols());
      for (std::size_t i = 0; i < ids.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = target.row(ids[i]);
      const double b = static_cast<double>(ids.size());
      const Matrix d_clean = (qc - p) / b;
      const Matrix d_adv = (s.adversarial_weight * (qa - p) + s.consistency_weight * (qa - qc)) / b;

      auto eg = model->encoder().zero_gradients();
      Matrix cg = Matrix::Zero(model->centroids().rows(), model->centroids().cols());
      clustering::assignment_backward(*model, tc, d_clean, &eg, &cg);
      clustering::assignment_backward(*model, ta, d_adv, &eg, &cg);
      enc_opt.step(eg);
      nn::Gradients cgrads{Tensor::from_matrix(cg)};
      cen_opt.step(cgrads);
      Matrix updated = centroid_param.as_matrix();
      updated.rowwise().normalize();
      centroid_param = Tensor::from_matrix(updated);
      model->mutable_centroids() = updated;
    }
  }
  return model;
}

}  // namespace clusterbreak::defense
