#include "clusterbreak/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "clusterbreak/checkpoint.hpp"
#include "clusterbreak/error.hpp"

namespace clusterbreak::clustering {

// ---------------------------------------------------------------- SoftMembership

SoftMembership::SoftMembership(Matrix probs) : probs_(std::move(probs)) {
  require(probs_.cols() >= 2, ErrorCode::invalid_parameter, "soft membership needs k >= 2");
  for (Eigen::Index i = 0; i < probs_.rows(); ++i) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < probs_.cols(); ++j) {
      const double p = probs_(i, j);
      require(std::isfinite(p) && p >= 0.0 && p <= 1.0, ErrorCode::invalid_parameter,
              "membership entry outside [0, 1]");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= 1e-5, ErrorCode::invalid_parameter, "membership row does not sum to 1");
  }
}

LabelVector hard_labels(const SoftMembership& m) {
  LabelVector out(static_cast<std::size_t>(m.rows()));
  const Matrix& p = m.probs();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    int best = 0;
    for (Eigen::Index j = 1; j < p.cols(); ++j)
      if (p(i, j) > p(i, best)) best = static_cast<int>(j);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

namespace {

Matrix row_softmax(const Matrix& logits) {
  Matrix q(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    q.row(i) = (logits.row(i).array() - mx).exp().matrix();
    q.row(i) /= q.row(i).sum();
  }
  return q;
}

Matrix squared_distances(const Matrix& points, const Matrix& centroids) {
  Matrix d(points.rows(), centroids.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (Eigen::Index j = 0; j < centroids.rows(); ++j) d(i, j) = (points.row(i) - centroids.row(j)).squaredNorm();
  return d;
}

void normalize_rows(Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 0.0) m.row(i) /= n;
  }
}

}  // namespace

Matrix softmax_backward(const Matrix& q, const Matrix& dq) {
  Matrix dl(q.rows(), q.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double inner = q.row(i).dot(dq.row(i));
    dl.row(i) = q.row(i).array() * (dq.row(i).array() - inner);
  }
  return dl;
}

Matrix distance_softmax(const Matrix& points, const Matrix& centroids, double temperature) {
  return row_softmax(-squared_distances(points, centroids) / temperature);
}

Matrix sharpened_target(const Matrix& q) {
  const Eigen::RowVectorXd freq = q.colwise().sum();
  Matrix p(q.rows(), q.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (Eigen::Index j = 0; j < q.cols(); ++j) p(i, j) = q(i, j) * q(i, j) / std::max(freq(j), 1e-12);
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// ---------------------------------------------------------------- ClusterModel

void ClusterModel::check_batch(const data::ImageBatch& batch) const {
  require(batch.size() >= 1, ErrorCode::invalid_parameter, "empty query batch");
  require(batch.sample_shape() == input_shape(), ErrorCode::shape_mismatch,
          "query batch shape " + shape_string(batch.pixels.shape()) + " does not match the model input");
  data::check_pixel_range(batch.pixels);
}

SoftMembership ClusterModel::query(const data::ImageBatch& batch) const {
  check_batch(batch);
  queries_.fetch_add(1);
  return SoftMembership(evaluate(batch.pixels));
}

DifferentiableQuery ClusterModel::query_differentiable(const data::ImageBatch& batch) const {
  check_batch(batch);
  queries_.fetch_add(1);
  auto [m, pullback] = evaluate_with_pullback(batch.pixels);
  return {SoftMembership(std::move(m)), std::move(pullback)};
}

// ---------------------------------------------------------------- k-means

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int restarts, int max_iterations) {
  const auto n = points.rows();
  require(k >= 1, ErrorCode::invalid_parameter, "k must be >= 1");
  require(k <= n, ErrorCode::invalid_parameter, "k must not exceed the number of points");
  require(restarts >= 1 && max_iterations >= 1, ErrorCode::invalid_parameter, "bad k-means settings");

  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    std::mt19937_64 rng(data::derive_seed(seed, static_cast<std::uint64_t>(r)));
    Matrix centers(k, points.cols());
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    centers.row(0) = points.row(pick(rng));
    Vector d2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
      const double total = d2.sum();
      Eigen::Index chosen = pick(rng);
      if (total > 0.0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double target = u(rng);
        for (Eigen::Index i = 0; i < n; ++i) {
          target -= d2(i);
          if (target <= 0.0) {
            chosen = i;
            break;
          }
        }
      }
      centers.row(c) = points.row(chosen);
      d2 = d2.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }

    std::vector<int> labels(static_cast<std::size_t>(n), -1);
    bool degenerate = false;
    for (int it = 0; it < max_iterations; ++it) {
      bool changed = false;
      for (Eigen::Index i = 0; i < n; ++i) {
        int arg = 0;
        double bestd = (points.row(i) - centers.row(0)).squaredNorm();
        for (int c = 1; c < k; ++c) {
          const double d = (points.row(i) - centers.row(c)).squaredNorm();
          if (d < bestd) {
            bestd = d;
            arg = c;
          }
        }
        if (labels[static_cast<std::size_t>(i)] != arg) {
          labels[static_cast<std::size_t>(i)] = arg;
          changed = true;
        }
      }
      Matrix sums = Matrix::Zero(k, points.cols());
      std::vector<int> counts(static_cast<std::size_t>(k), 0);
      for (Eigen::Index i = 0; i < n; ++i) {
        sums.row(labels[static_cast<std::size_t>(i)]) += points.row(i);
        ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
      }
      degenerate = std::any_of(counts.begin(), counts.end(), [](int c) { return c == 0; });
      if (degenerate) break;
      for (int c = 0; c < k; ++c) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
      if (!changed) break;
    }
    if (degenerate) continue;
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      inertia += (points.row(i) - centers.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    if (inertia < best.inertia) best = KMeansResult{centers, labels, inertia};
  }
  if (!std::isfinite(best.inertia))
    fail(ErrorCode::degenerate_clustering, "every k-means run left a cluster empty; retry with another seed");
  return best;
}

KMeansModel::KMeansModel(Matrix centroids, data::SampleShape shape, double temperature)
    : centroids_(std::move(centroids)), shape_(shape), temperature_(temperature) {
  require(centroids_.rows() >= 2, ErrorCode::invalid_parameter, "k must be >= 2");
  require(static_cast<std::size_t>(centroids_.cols()) == shape_.size(), ErrorCode::invalid_shape,
          "centroid dimension does not match the sample shape");
  require(temperature_ > 0.0, ErrorCode::invalid_parameter, "temperature must be > 0");
}

Matrix KMeansModel::evaluate(const Tensor& pixels) const {
  return distance_softmax(pixels.as_matrix(), centroids_, temperature_);
}

std::pair<Matrix, Pullback> KMeansModel::evaluate_with_pullback(const Tensor& pixels) const {
  Matrix x = pixels.as_matrix();
  Matrix q = distance_softmax(x, centroids_, temperature_);
  Shape shape = pixels.shape();
  Pullback pb = [this, x = std::move(x), q, shape](const Matrix& dq) {
    const Matrix dl = softmax_backward(q, dq);
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < centroids_.rows(); ++j)
        dx.row(i) += dl(i, j) * (-2.0 / temperature_) * (x.row(i) - centroids_.row(j));
    return Tensor::from_matrix(dx).reshaped(shape);
  };
  return {std::move(q), std::move(pb)};
}

void KMeansModel::save(const std::filesystem::path& path) const {
  io::Checkpoint ck;
  ck.kind = kind();
  ck.meta["temperature"] = temperature_;
  ck.meta["input_shape"] = {shape_.channels, shape_.height, shape_.width};
  ck.tensors.push_back(Tensor::from_matrix(centroids_));
  io::write_checkpoint(path, ck);
}

std::shared_ptr<KMeansModel> KMeansModel::load(const std::filesystem::path& path) {
  const auto ck = io::read_checkpoint(path, "kmeans_model");
  const auto s = ck.meta.at("input_shape").get<std::vector<int>>();
  require(ck.tensors.size() == 1, ErrorCode::schema_mismatch, "kmeans checkpoint needs one tensor");
  return std::make_shared<KMeansModel>(ck.tensors[0].as_matrix(), data::SampleShape{s.at(0), s.at(1), s.at(2)},
                                       ck.meta.at("temperature").get<double>());
}

std::shared_ptr<KMeansModel> kmeans_baseline(const data::ImageSet& images, int k, std::uint64_t seed) {
  require(k >= 2, ErrorCode::invalid_parameter, "k must be >= 2");
  require(k <= images.size(), ErrorCode::invalid_parameter, "k must not exceed the number of samples");
  auto result = kmeans(images.pixels().as_matrix(), k, seed);
  return std::make_shared<KMeansModel>(std::move(result.centroids), images.sample_shape(), 1.0);
}

// ---------------------------------------------------------------- ToyDeepClusterer

ToyDeepClusterer::ToyDeepClusterer(nn::Sequential encoder, Matrix centroids, double temperature,
                                   data::SampleShape shape)
    : encoder_(std::move(encoder)), centroids_(std::move(centroids)), temperature_(temperature), shape_(shape) {
  require(centroids_.rows() >= 2, ErrorCode::invalid_parameter, "k must be >= 2");
  require(temperature_ > 0.0, ErrorCode::invalid_parameter, "temperature must be > 0");
}

Matrix assignment_forward(const ToyDeepClusterer& model, const Tensor& pixels, AssignmentTrace& trace) {
  trace.raw = model.encoder().forward(pixels, trace.encoder).as_matrix();
  trace.norms = trace.raw.rowwise().norm().cwiseMax(1e-12);
  trace.embeddings = trace.raw.array().colwise() / trace.norms.array();
  trace.q = distance_softmax(trace.embeddings, model.centroids(), model.temperature());
  return trace.q;
}

Tensor assignment_backward(const ToyDeepClusterer& model, const AssignmentTrace& trace, const Matrix& d_logits,
                           nn::Gradients* encoder_grads, Matrix* centroid_grads) {
  const Matrix& z = trace.embeddings;
  const Matrix& c = model.centroids();
  const double scale = 2.0 / model.temperature();
  Matrix dz = Matrix::Zero(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.rows(); ++j) {
      const Eigen::RowVectorXd diff = z.row(i) - c.row(j);
      dz.row(i) -= scale * d_logits(i, j) * diff;
      if (centroid_grads != nullptr) centroid_grads->row(j) += scale * d_logits(i, j) * diff;
    }
  }
  Matrix du(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    du.row(i) = (dz.row(i) - z.row(i) * z.row(i).dot(dz.row(i))) / trace.norms(i);
  return model.encoder().backward(trace.encoder, Tensor::from_matrix(du), encoder_grads);
}

Matrix ToyDeepClusterer::embed(const Tensor& pixels) const {
  Matrix raw = encoder_.forward(pixels).as_matrix();
  normalize_rows(raw);
  return raw;
}

Matrix ToyDeepClusterer::evaluate(const Tensor& pixels) const {
  return distance_softmax(embed(pixels), centroids_, temperature_);
}

std::pair<Matrix, Pullback> ToyDeepClusterer::evaluate_with_pullback(const Tensor& pixels) const {
  auto trace = std::make_shared<AssignmentTrace>();
  Matrix q = assignment_forward(*this, pixels, *trace);
  Pullback pb = [this, trace](const Matrix& dq) {
    return assignment_backward(*this, *trace, softmax_backward(trace->q, dq), nullptr, nullptr);
  };
  return {std::move(q), std::move(pb)};
}

void ToyDeepClusterer::save(const std::filesystem::path& path) const {
  io::Checkpoint ck;
  ck.kind = kind();
  ck.meta["temperature"] = temperature_;
  ck.meta["input_shape"] = {shape_.channels, shape_.height, shape_.width};
  ck.meta["encoder"] = io::specs_to_json(encoder_.specs());
  io::append_parameters(encoder_, ck.tensors);
  ck.tensors.push_back(Tensor::from_matrix(centroids_));
  io::write_checkpoint(path, ck);
}

std::shared_ptr<ToyDeepClusterer> ToyDeepClusterer::load(const std::filesystem::path& path) {
  const auto ck = io::read_checkpoint(path, "toy_deep_clusterer");
  auto encoder = nn::Sequential::from_specs(io::specs_from_json(ck.meta.at("encoder")));
  std::size_t cursor = 0;
  io::load_parameters(encoder, ck.tensors, cursor);
  require(cursor + 1 == ck.tensors.size(), ErrorCode::schema_mismatch, "unexpected tensor count in checkpoint");
  const auto s = ck.meta.at("input_shape").get<std::vector<int>>();
  return std::make_shared<ToyDeepClusterer>(std::move(encoder), ck.tensors[cursor].as_matrix(),
                                            ck.meta.at("temperature").get<double>(),
                                            data::SampleShape{s.at(0), s.at(1), s.at(2)});
}

LabelVector predict(const ClusterModel& model, const data::ImageSet& images, int chunk) {
  require(chunk >= 1, ErrorCode::invalid_parameter, "chunk must be >= 1");
  LabelVector out;
  out.reserve(static_cast<std::size_t>(images.size()));
  for (const auto& ids : data::batch_indices(images.size(), std::min(chunk, images.size()), false, 0)) {
    const auto labels = hard_labels(model.query(images.batch(ids)));
    out.insert(out.end(), labels.begin(), labels.end());
  }
  return out;
}

std::shared_ptr<ClusterModel> load_cluster_model(const std::filesystem::path& path) {
  try {
    return ToyDeepClusterer::load(path);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::schema_mismatch) throw;
  }
  return KMeansModel::load(path);
}

// ---------------------------------------------------------------- training

namespace {

nn::Sequential make_encoder(data::SampleShape s, const TrainerSettings& cfg, nn::Rng& rng) {
  nn::Sequential enc;
  auto& c1 = enc.emplace<nn::Conv2d>(s.channels, 8, 3, 1, 1, rng);
  enc.emplace<nn::LeakyRelu>(0.1);
  auto& c2 = enc.emplace<nn::Conv2d>(8, 16, 3, 2, 1, rng);
  enc.emplace<nn::LeakyRelu>(0.1);
  (void)c1;
  const int oh = c2.output_extent(s.height), ow = c2.output_extent(s.width);
  enc.emplace<nn::Dense>(16 * oh * ow, cfg.hidden_units, rng);
  enc.emplace<nn::LeakyRelu>(0.1);
  enc.emplace<nn::Dense>(cfg.hidden_units, cfg.embedding_dim, rng);
  return enc;
}

nn::Sequential make_decoder(data::SampleShape s, const TrainerSettings& cfg, nn::Rng& rng) {
  nn::Sequential dec;
  dec.emplace<nn::Dense>(cfg.embedding_dim, cfg.hidden_units, rng);
  dec.emplace<nn::LeakyRelu>(0.1);
  dec.emplace<nn::Dense>(cfg.hidden_units, static_cast<int>(s.size()), rng);
  dec.emplace<nn::Sigmoid>();
  dec.emplace<nn::Reshape>(Shape{s.channels, s.height, s.width});
  return dec;
}

Tensor normalize_forward(const Tensor& raw, Vector& norms) {
  Matrix m = raw.as_matrix();
  norms = m.rowwise().norm().cwiseMax(1e-12);
  m = m.array().colwise() / norms.array();
  return Tensor::from_matrix(m);
}

Tensor normalize_backward(const Tensor& z, const Vector& norms, const Tensor& dz) {
  const Matrix zm = z.as_matrix(), dzm = dz.as_matrix();
  Matrix du(zm.rows(), zm.cols());
  for (Eigen::Index i = 0; i < zm.rows(); ++i)
    du.row(i) = (dzm.row(i) - zm.row(i) * zm.row(i).dot(dzm.row(i))) / norms(i);
  return Tensor::from_matrix(du);
}

}  // namespace

std::shared_ptr<ToyDeepClusterer> train_toy_clusterer(const data::ImageSet& images, int k,
                                                      const TrainerSettings& cfg) {
  require(k >= 2, ErrorCode::invalid_parameter, "k must be >= 2");
  require(k <= images.size(), ErrorCode::invalid_parameter, "k must not exceed the number of samples");
  require(cfg.embedding_dim >= 2 && cfg.hidden_units >= 1 && cfg.batch_size >= 1 && cfg.learning_rate > 0.0 &&
              cfg.temperature > 0.0 && cfg.pretrain_epochs >= 0 && cfg.refine_epochs >= 0,
          ErrorCode::invalid_parameter, "invalid trainer settings");
  const data::SampleShape shape = images.sample_shape();
  const int batch_size = std::min(cfg.batch_size, images.size());

  nn::Rng rng(data::derive_seed(cfg.seed, 100));
  nn::Sequential encoder = make_encoder(shape, cfg, rng);
  nn::Sequential decoder = make_decoder(shape, cfg, rng);

  // Phase 1: reconstruction through the unit-norm embedding.
  {
    nn::Adam enc_opt(encoder.parameters(), {cfg.learning_rate});
    nn::Adam dec_opt(decoder.parameters(), {cfg.learning_rate});
    for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
      for (const auto& ids :
           data::batch_indices(images.size(), batch_size, true, data::derive_seed(cfg.seed, 1000 + epoch))) {
        const Tensor x = gather_samples(images.pixels(), ids);
        nn::Trace et, dt;
        Vector norms;
        const Tensor z = normalize_forward(encoder.forward(x, et), norms);
        const Tensor recon = decoder.forward(z, dt);
        Tensor grad(recon.shape());
        const double scale = 2.0 / static_cast<double>(recon.size());
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = scale * (recon[i] - x[i]);
        auto dg = decoder.zero_gradients();
        auto eg = encoder.zero_gradients();
        const Tensor dz = decoder.backward(dt, grad, &dg);
        encoder.backward(et, normalize_backward(z, norms, dz), &eg);
        dec_opt.step(dg);
        enc_opt.step(eg);
      }
    }
  }

  // Phase 2: spherical k-means initialisation on the embeddings.
  Matrix z = encoder.forward(images.pixels()).as_matrix();
  normalize_rows(z);
  Matrix centroids = kmeans(z, k, data::derive_seed(cfg.seed, 200)).centroids;
  normalize_rows(centroids);
  auto model = std::make_shared<ToyDeepClusterer>(std::move(encoder), std::move(centroids), cfg.temperature, shape);

  // Phase 3: self-training towards the sharpened target, recomputed per epoch.
  Tensor centroid_param = Tensor::from_matrix(model->centroids());
  nn::Adam enc_opt(model->mutable_encoder().parameters(), {cfg.learning_rate});
  nn::Adam dec_opt(decoder.parameters(), {cfg.learning_rate});
  nn::Adam cen_opt({&centroid_param}, {cfg.learning_rate});
  for (int epoch = 0; epoch < cfg.refine_epochs; ++epoch) {
    const Matrix target = sharpened_target(distance_softmax(model->embed(images.pixels()), model->centroids(),
                                                            model->temperature()));
    for (const auto& ids :
         data::batch_indices(images.size(), batch_size, true, data::derive_seed(cfg.seed, 3000 + epoch))) {
      const Tensor x = gather_samples(images.pixels(), ids);
      AssignmentTrace trace;
      const Matrix q = assignment_forward(*model, x, trace);
      Matrix p(q.rows(), q.cols());
      for (std::size_t i = 0; i < ids.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = target.row(ids[i]);
      // d KL(P || Q) / d logits = (q - p) / b
      const Matrix d_logits = (q - p) / static_cast<double>(ids.size());
      auto eg = model->encoder().zero_gradients();
      Matrix cg = Matrix::Zero(model->centroids().rows(), model->centroids().cols());
      assignment_backward(*model, trace, d_logits, &eg, &cg);
      if (cfg.reconstruction_weight > 0.0) {
        // Keep the reconstruction term alive so self-training cannot distort the embedding freely.
        nn::Trace et, dt;
        Vector norms;
        const Tensor zr = normalize_forward(model->encoder().forward(x, et), norms);
        const Tensor recon = decoder.forward(zr, dt);
        Tensor grad(recon.shape());
        const double scale = 2.0 * cfg.reconstruction_weight / static_cast<double>(recon.size());
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = scale * (recon[i] - x[i]);
        auto dg = decoder.zero_gradients();
        const Tensor dz = decoder.backward(dt, grad, &dg);
        model->encoder().backward(et, normalize_backward(zr, norms, dz), &eg);
        dec_opt.step(dg);
      }
      enc_opt.step(eg);
      nn::Gradients cgrads{Tensor::from_matrix(cg)};
      cen_opt.step(cgrads);
      Matrix updated = centroid_param.as_matrix();
      normalize_rows(updated);
      centroid_param = Tensor::from_matrix(updated);
      model->mutable_centroids() = updated;
    }
  }
  return model;
}

}  // namespace clusterbreak::clustering
