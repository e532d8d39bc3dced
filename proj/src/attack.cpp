#include "clusterbreak/attack.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "clusterbreak/checkpoint.hpp"
#include "clusterbreak/error.hpp"

namespace clusterbreak::attack {

namespace {

constexpr double kScoreFloor = 1e-7;

double clamp_score(double s) { return std::clamp(s, kScoreFloor, 1.0 - kScoreFloor); }

void invalid(const std::string& field, const std::string& why) {
  fail(ErrorCode::config_validation, field + ": " + why);
}

std::vector<double> sample_norms(const Tensor& t) {
  std::vector<double> out(static_cast<std::size_t>(t.dim(0)));
  for (std::size_t i = 0; i < out.size(); ++i) {
    double sq = 0.0;
    for (double v : t.sample(i)) sq += v * v;
    out[i] = std::sqrt(sq);
  }
  return out;
}

// x + delta clipped to [0, 1]; mask marks entries where the clip is inactive.
Tensor add_and_clip(const Tensor& x, const Tensor& delta, std::vector<char>* mask) {
  Tensor out(x.shape());
  if (mask) mask->assign(x.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i] + delta[i];
    out[i] = std::clamp(v, 0.0, 1.0);
    if (mask) (*mask)[i] = (v > 0.0 && v < 1.0) ? 1 : 0;
  }
  return out;
}

data::ImageBatch as_batch(Tensor pixels) {
  std::vector<int> ids(static_cast<std::size_t>(pixels.dim(0)));
  std::iota(ids.begin(), ids.end(), 0);
  return data::ImageBatch{std::move(pixels), std::move(ids)};
}

}  // namespace

// ---------------------------------------------------------------- config

void AttackConfig::validate() const {
  if (!(alpha_a > 0.0)) invalid("alpha_a", "must be > 0");
  if (!(alpha_c > 0.0)) invalid("alpha_c", "must be > 0");
  if (!(epsilon > 0.0)) invalid("epsilon", "must be > 0");
  if (batch_size < 1) invalid("batch_size", "must be >= 1");
  if (max_batches < 1) invalid("max_batches", "must be >= 1");
  if (!(generator_lr > 0.0)) invalid("generator_lr", "must be > 0");
  if (!(discriminator_lr > 0.0)) invalid("discriminator_lr", "must be > 0");
  if (window < 1) invalid("window", "must be >= 1");
  if (!(tau > 0.0)) invalid("tau", "must be > 0");
  if (patience < 1) invalid("patience", "must be >= 1");
  if (generator_width < 1) invalid("generator_width", "must be >= 1");
  if (target && *target < 0) invalid("target", "must be a cluster index");
}

nlohmann::json to_json(const AttackConfig& c) {
  nlohmann::json j = {{"alpha_a", c.alpha_a},
                      {"alpha_c", c.alpha_c},
                      {"epsilon", c.epsilon},
                      {"batch_size", c.batch_size},
                      {"max_batches", c.max_batches},
                      {"generator_lr", c.generator_lr},
                      {"discriminator_lr", c.discriminator_lr},
                      {"window", c.window},
                      {"tau", c.tau},
                      {"patience", c.patience},
                      {"seed", c.seed},
                      {"cache_clean_memberships", c.cache_clean_memberships},
                      {"generator_width", c.generator_width}};
  j["target"] = c.target ? nlohmann::json(*c.target) : nlohmann::json(nullptr);
  return j;
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.alpha_a = j.at("alpha_a").get<double>();
  c.alpha_c = j.at("alpha_c").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_batches = j.at("max_batches").get<int>();
  c.generator_lr = j.at("generator_lr").get<double>();
  c.discriminator_lr = j.at("discriminator_lr").get<double>();
  c.window = j.at("window").get<int>();
  c.tau = j.at("tau").get<double>();
  c.patience = j.value("patience", c.patience);
  c.seed = j.at("seed").get<std::uint64_t>();
  c.cache_clean_memberships = j.at("cache_clean_memberships").get<bool>();
  c.generator_width = j.at("generator_width").get<int>();
  if (!j.at("target").is_null()) c.target = j.at("target").get<int>();
  return c;
}

nlohmann::json to_json(const QueryLedger& l) {
  return {{"batch_queries", l.batch_queries},
          {"batch_size", l.batch_size},
          {"training_batches", l.training_batches},
          {"cache_hits", l.cache_hits}};
}

// ---------------------------------------------------------------- networks

nn::Sequential make_generator_network(data::SampleShape shape, int width, double epsilon, nn::Rng& rng) {
  const double scale = 3.0 * epsilon / std::sqrt(static_cast<double>(shape.size()));
  const bool downsample = shape.height % 2 == 0 && shape.width % 2 == 0;
  nn::Sequential g;
  g.emplace<nn::Conv2d>(shape.channels, width, 3, 1, 1, rng);
  g.emplace<nn::LeakyRelu>(0.2);
  g.emplace<nn::Conv2d>(width, 2 * width, 3, downsample ? 2 : 1, 1, rng);
  g.emplace<nn::LeakyRelu>(0.2);
  if (downsample) g.emplace<nn::Upsample2>();
  g.emplace<nn::Conv2d>(2 * width, width, 3, 1, 1, rng);
  g.emplace<nn::LeakyRelu>(0.2);
  g.emplace<nn::Conv2d>(width, shape.channels, 3, 1, 1, rng);
  g.emplace<nn::ScaledTanh>(scale);
  return g;
}

nn::Sequential make_discriminator_network(data::SampleShape shape, nn::Rng& rng) {
  nn::Sequential d;
  auto& c1 = d.emplace<nn::Conv2d>(shape.channels, 8, 3, 2, 1, rng);
  d.emplace<nn::LeakyRelu>(0.2);
  auto& c2 = d.emplace<nn::Conv2d>(8, 16, 3, 2, 1, rng);
  d.emplace<nn::LeakyRelu>(0.2);
  const int oh = c2.output_extent(c1.output_extent(shape.height));
  const int ow = c2.output_extent(c1.output_extent(shape.width));
  d.emplace<nn::Dense>(16 * oh * ow, 1, rng);
  d.emplace<nn::Sigmoid>();
  return d;
}

// ---------------------------------------------------------------- generator

TrainedGenerator::TrainedGenerator(nn::Sequential network, AttackConfig config, data::SampleShape shape)
    : network_(std::move(network)), config_(std::move(config)), shape_(shape) {}

Tensor TrainedGenerator::perturbation(const Tensor& pixels) const {
  require(data::sample_shape_of(pixels) == shape_, ErrorCode::shape_mismatch,
          "generator input " + shape_string(pixels.shape()) + " does not match its training shape");
  return network_.forward(pixels);
}

void TrainedGenerator::save(const std::filesystem::path& path) const {
  io::Checkpoint ck;
  ck.kind = "perturbation_generator";
  ck.meta["config"] = to_json(config_);
  ck.meta["input_shape"] = {shape_.channels, shape_.height, shape_.width};
  ck.meta["network"] = io::specs_to_json(network_.specs());
  io::append_parameters(network_, ck.tensors);
  io::write_checkpoint(path, ck);
}

TrainedGenerator TrainedGenerator::load(const std::filesystem::path& path) {
  const auto ck = io::read_checkpoint(path, "perturbation_generator");
  auto net = nn::Sequential::from_specs(io::specs_from_json(ck.meta.at("network")));
  std::size_t cursor = 0;
  io::load_parameters(net, ck.tensors, cursor);
  require(cursor == ck.tensors.size(), ErrorCode::schema_mismatch, "unexpected tensor count in checkpoint");
  const auto s = ck.meta.at("input_shape").get<std::vector<int>>();
  return TrainedGenerator(std::move(net), attack_config_from_json(ck.meta.at("config")),
                          data::SampleShape{s.at(0), s.at(1), s.at(2)});
}

TrainedGenerator TrainedGenerator::identity(data::SampleShape shape, AttackConfig config) {
  nn::Rng rng(0);
  auto net = make_generator_network(shape, 1, config.epsilon, rng);
  for (Tensor* p : net.parameters()) p->fill(0.0);
  return TrainedGenerator(std::move(net), std::move(config), shape);
}

AdversarialBatch generate_adversarial(const TrainedGenerator& generator, const data::ImageBatch& batch) {
  data::check_pixel_range(batch.pixels);
  const Tensor delta = generator.perturbation(batch.pixels);
  AdversarialBatch out;
  out.batch = data::ImageBatch{add_and_clip(batch.pixels, delta, nullptr), batch.ids};
  out.perturbation_norms = sample_norms(delta);
  return out;
}

data::ImageSet generate_adversarial_set(const TrainedGenerator& generator, const data::ImageSet& images,
                                        std::vector<double>* norms) {
  Tensor out(images.pixels().shape());
  if (norms) norms->clear();
  const std::size_t s = images.pixels().sample_size();
  for (const auto& ids : data::batch_indices(images.size(), std::min(256, images.size()), false, 0)) {
    const auto adv = generate_adversarial(generator, images.batch(ids));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto src = adv.batch.pixels.sample(i);
      std::copy(src.begin(), src.end(), out.data() + static_cast<std::size_t>(ids[i]) * s);
    }
    if (norms) norms->insert(norms->end(), adv.perturbation_norms.begin(), adv.perturbation_norms.end());
  }
  return data::ImageSet(std::move(out));
}

// ---------------------------------------------------------------- losses

double attack_loss(const Matrix& pre, const Matrix& post) {
  require(pre.rows() == post.rows() && pre.cols() == post.cols() && pre.rows() > 0, ErrorCode::shape_mismatch,
          "attack_loss needs equally shaped membership matrices");
  return (pre - post).rowwise().norm().mean();
}

double attack_loss(const clustering::SoftMembership& pre, const clustering::SoftMembership& post) {
  return attack_loss(pre.probs(), post.probs());
}

Matrix attack_loss_gradient(const Matrix& pre, const Matrix& post) {
  require(pre.rows() == post.rows() && pre.cols() == post.cols() && pre.rows() > 0, ErrorCode::shape_mismatch,
          "attack_loss needs equally shaped membership matrices");
  Matrix g = Matrix::Zero(post.rows(), post.cols());
  const double b = static_cast<double>(post.rows());
  for (Eigen::Index i = 0; i < post.rows(); ++i) {
    const Eigen::RowVectorXd diff = post.row(i) - pre.row(i);
    const double d = diff.norm();
    if (d > 0.0) g.row(i) = diff / (d * b);
  }
  return g;
}

double constraint_loss(const Tensor& perturbations, double epsilon) {
  require(epsilon > 0.0, ErrorCode::invalid_parameter, "epsilon must be > 0");
  const auto norms = sample_norms(perturbations);
  require(!norms.empty(), ErrorCode::invalid_parameter, "empty perturbation batch");
  double sum = 0.0;
  for (double n : norms) sum += std::min(epsilon - n, 0.0);
  return sum / static_cast<double>(norms.size());
}

Tensor constraint_loss_gradient(const Tensor& perturbations, double epsilon) {
  const auto norms = sample_norms(perturbations);
  Tensor g(perturbations.shape());
  const double b = static_cast<double>(norms.size());
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (norms[i] <= epsilon) continue;
    auto src = perturbations.sample(i);
    auto dst = g.sample(i);
    for (std::size_t p = 0; p < src.size(); ++p) dst[p] = -src[p] / (norms[i] * b);
  }
  return g;
}

double gan_loss(std::span<const double> d_real, std::span<const double> d_fake) {
  require(d_real.size() == d_fake.size() && !d_real.empty(), ErrorCode::shape_mismatch,
          "gan_loss needs equally sized, non-empty score vectors");
  double sum = 0.0;
  for (std::size_t i = 0; i < d_real.size(); ++i)
    sum += std::log(clamp_score(d_real[i])) + std::log(1.0 - clamp_score(d_fake[i]));
  return sum / static_cast<double>(d_real.size());
}

std::vector<double> one_hot(int k, int target) {
  require(k >= 2, ErrorCode::invalid_parameter, "k must be >= 2");
  require(target >= 0 && target < k, ErrorCode::invalid_target, "target outside [0, k)");
  std::vector<double> v(static_cast<std::size_t>(k), 0.0);
  v[static_cast<std::size_t>(target)] = 1.0;
  return v;
}

double targeted_objective(std::span<const double> target_one_hot, std::span<const double> post_row) {
  require(target_one_hot.size() == post_row.size() && target_one_hot.size() >= 2, ErrorCode::shape_mismatch,
          "target and membership row differ in length");
  int ones = 0;
  for (double v : target_one_hot) {
    require(v == 0.0 || v == 1.0, ErrorCode::invalid_target, "target is not one-hot");
    ones += v == 1.0;
  }
  require(ones == 1, ErrorCode::invalid_target, "target is not one-hot");
  double sq = 0.0;
  for (std::size_t j = 0; j < post_row.size(); ++j) sq += (target_one_hot[j] - post_row[j]) * (target_one_hot[j] - post_row[j]);
  return std::sqrt(sq);
}

ObjectiveTerms generator_objective(const nn::Sequential& generator, const nn::Sequential& discriminator,
                                   const clustering::ClusterModel& victim, const Tensor& clean,
                                   const Matrix& reference, const AttackConfig& config, nn::Gradients* grads) {
  const bool targeted = config.target.has_value();
  const double sign = targeted ? 1.0 : -1.0;

  nn::Trace g_trace;
  const Tensor delta = generator.forward(clean, g_trace);
  std::vector<char> mask;
  const Tensor adv = add_and_clip(clean, delta, &mask);

  const auto observed = victim.query_differentiable(as_batch(adv));
  const Matrix& post = observed.memberships.probs();

  nn::Trace d_trace;
  const Tensor fake = discriminator.forward(adv, d_trace);
  const Tensor real = discriminator.forward(clean);

  ObjectiveTerms terms;
  terms.gan = gan_loss(real.values(), fake.values());
  terms.attack = attack_loss(reference, post);
  terms.constraint = constraint_loss(delta, config.epsilon);
  terms.total = terms.gan + sign * config.alpha_a * terms.attack - config.alpha_c * terms.constraint;

  if (grads != nullptr) {
    const double b = static_cast<double>(clean.dim(0));
    Tensor d_fake(fake.shape());
    for (std::size_t i = 0; i < fake.size(); ++i) {
      const double s = fake[i];
      d_fake[i] = (s > kScoreFloor && s < 1.0 - kScoreFloor) ? -1.0 / (b * (1.0 - s)) : 0.0;
    }
    Tensor d_adv = discriminator.backward(d_trace, d_fake, nullptr);
    d_adv += observed.pullback(sign * config.alpha_a * attack_loss_gradient(reference, post)).reshaped(adv.shape());

    Tensor d_delta = constraint_loss_gradient(delta, config.epsilon);
    d_delta *= -config.alpha_c;
    for (std::size_t i = 0; i < d_delta.size(); ++i)
      if (mask[i]) d_delta[i] += d_adv[i];
    generator.backward(g_trace, d_delta, grads);
  }
  return terms;
}

// ---------------------------------------------------------------- training

AttackResult train_attack(const clustering::ClusterModel& victim, const data::ImageSet& images,
                          const AttackConfig& config) {
  config.validate();
  const data::SampleShape shape = images.sample_shape();
  require(victim.input_shape() == shape, ErrorCode::shape_mismatch, "victim input shape differs from the images");
  const int k = victim.k();
  if (config.target)
    require(*config.target >= 0 && *config.target < k, ErrorCode::invalid_target, "target outside [0, k)");
  const int n = images.size();
  const int batch_size = std::min(config.batch_size, n);

  nn::Rng rng(data::derive_seed(config.seed, 7));
  nn::Sequential generator = make_generator_network(shape, config.generator_width, config.epsilon, rng);
  nn::Sequential discriminator = make_discriminator_network(shape, rng);
  nn::Adam g_opt(generator.parameters(), {config.generator_lr, 0.5, 0.999, 1e-8});
  nn::Adam d_opt(discriminator.parameters(), {config.discriminator_lr, 0.5, 0.999, 1e-8});

  QueryLedger ledger;
  int flat_checks = 0;
  ledger.batch_size = batch_size;
  Matrix cache = Matrix::Zero(n, k);
  std::vector<char> cached(static_cast<std::size_t>(n), 0);
  std::vector<double> target_row;
  if (config.target) target_row = one_hot(k, *config.target);

  AttackResult result{TrainedGenerator(nn::Sequential{}, config, shape), {}, false, {}};
  std::deque<std::vector<int>> pending;
  std::uint64_t epoch = 0;

  for (int step = 0; step < config.max_batches; ++step) {
    if (pending.empty()) {
      for (auto& ids : data::batch_indices(n, batch_size, true, data::derive_seed(config.seed, 10000 + epoch)))
        pending.push_back(std::move(ids));
      ++epoch;
    }
    const std::vector<int> ids = std::move(pending.front());
    pending.pop_front();
    const Tensor x = gather_samples(images.pixels(), ids);
    const auto b = static_cast<Eigen::Index>(ids.size());
    ++ledger.training_batches;

    // Reference memberships M_i (or the one-hot target rows).
    Matrix reference(b, k);
    if (config.target) {
      for (Eigen::Index i = 0; i < b; ++i)
        reference.row(i) = Eigen::Map<const Eigen::RowVectorXd>(target_row.data(), k);
    } else {
      const bool all_cached = config.cache_clean_memberships &&
                              std::all_of(ids.begin(), ids.end(), [&](int id) { return cached[static_cast<std::size_t>(id)] != 0; });
      if (all_cached) {
        ++ledger.cache_hits;
        for (Eigen::Index i = 0; i < b; ++i) reference.row(i) = cache.row(ids[static_cast<std::size_t>(i)]);
      } else {
        reference = victim.query(images.batch(ids)).probs();
        ++ledger.batch_queries;
        if (config.cache_clean_memberships)
          for (Eigen::Index i = 0; i < b; ++i) {
            cache.row(ids[static_cast<std::size_t>(i)]) = reference.row(i);
            cached[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])] = 1;
          }
      }
    }

    // Discriminator ascent on L (descent on -L).
    {
      const Tensor adv = add_and_clip(x, generator.forward(x), nullptr);
      nn::Trace real_trace, fake_trace;
      const Tensor real = discriminator.forward(x, real_trace);
      const Tensor fake = discriminator.forward(adv, fake_trace);
      Tensor d_real(real.shape()), d_fake(fake.shape());
      const double bd = static_cast<double>(b);
      for (std::size_t i = 0; i < real.size(); ++i) {
        d_real[i] = -1.0 / (bd * clamp_score(real[i]));
        d_fake[i] = 1.0 / (bd * (1.0 - clamp_score(fake[i])));
      }
      auto dg = discriminator.zero_gradients();
      discriminator.backward(real_trace, d_real, &dg);
      discriminator.backward(fake_trace, d_fake, &dg);
      d_opt.step(dg);
    }

    // Generator descent on L -/+ alpha_a * L_attack - alpha_c * L_constraint.
    auto gg = generator.zero_gradients();
    const ObjectiveTerms terms = generator_objective(generator, discriminator, victim, x, reference, config, &gg);
    ++ledger.batch_queries;
    g_opt.step(gg);
    result.objective_history.push_back(terms.total);

    const auto& h = result.objective_history;
    const auto w = static_cast<std::size_t>(config.window);
    // Checked at window boundaries only: consecutive non-overlapping window
    // means, and the test must hold at `patience` boundaries in a row.
    if (h.size() >= 2 * w && h.size() % w == 0) {
      const double cur = std::accumulate(h.end() - static_cast<std::ptrdiff_t>(w), h.end(), 0.0) / static_cast<double>(w);
      const double prev = std::accumulate(h.end() - static_cast<std::ptrdiff_t>(2 * w),
                                          h.end() - static_cast<std::ptrdiff_t>(w), 0.0) /
                          static_cast<double>(w);
      flat_checks = std::abs(cur - prev) / std::max(std::abs(prev), 1e-12) < config.tau ? flat_checks + 1 : 0;
      if (flat_checks >= config.patience) {
        result.converged = true;
        break;
      }
    }
  }

  result.generator = TrainedGenerator(std::move(generator), config, shape);
  result.ledger = ledger;
  return result;
}

// ---------------------------------------------------------------- evaluation

AttackEvaluation evaluate_attack(const clustering::ClusterModel& victim, const TrainedGenerator& generator,
                                 const data::Dataset& eval_set) {
  AttackEvaluation ev;
  ev.pre_labels = clustering::predict(victim, eval_set.images());
  const data::ImageSet adv = generate_adversarial_set(generator, eval_set.images(), &ev.perturbation_norms);
  ev.post_labels = clustering::predict(victim, adv);
  ev.pre = metrics::report(ev.pre_labels, eval_set.labels());
  ev.post = metrics::report(ev.post_labels, eval_set.labels());
  const auto& norms = ev.perturbation_norms;
  ev.mean_norm = std::accumulate(norms.begin(), norms.end(), 0.0) / static_cast<double>(norms.size());
  ev.max_norm = *std::max_element(norms.begin(), norms.end());
  const auto image_norms = sample_norms(eval_set.images().pixels());
  ev.mean_image_norm =
      std::accumulate(image_norms.begin(), image_norms.end(), 0.0) / static_cast<double>(image_norms.size());
  return ev;
}

SweepResult epsilon_sweep(const clustering::ClusterModel& victim, const data::ImageSet& train_images,
                          const data::Dataset& eval_set, const AttackConfig& base_config,
                          std::span<const double> epsilons) {
  require(!epsilons.empty(), ErrorCode::invalid_parameter, "no epsilon values given");
  for (std::size_t i = 1; i < epsilons.size(); ++i)
    require(epsilons[i] > epsilons[i - 1], ErrorCode::invalid_parameter, "epsilons must be strictly ascending");
  SweepResult out;
  out.pre = metrics::report(clustering::predict(victim, eval_set.images()), eval_set.labels());
  for (double eps : epsilons) {
    AttackConfig cfg = base_config;
    cfg.epsilon = eps;
    const auto trained = train_attack(victim, train_images, cfg);
    const auto ev = evaluate_attack(victim, trained.generator, eval_set);
    out.points.push_back({eps, ev.mean_norm, ev.max_norm, ev.post, trained.ledger, trained.converged});
  }
  return out;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorCode::length_mismatch, "spearman needs paired samples");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

}  // namespace clusterbreak::attack
