#include "clusterbreak/transfer.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "clusterbreak/error.hpp"

namespace clusterbreak::transfer {

TransferMatrix transfer_matrix(const std::vector<NamedModel>& victims,
                               const std::vector<attack::TrainedGenerator>& generators,
                               const data::Dataset& eval_set) {
  require(!victims.empty(), ErrorCode::invalid_parameter, "no victims given");
  require(victims.size() == generators.size(), ErrorCode::length_mismatch, "need one generator per source victim");
  const auto shape = eval_set.sample_shape();
  TransferMatrix m;
  for (const auto& v : victims) {
    require(v.model != nullptr, ErrorCode::invalid_parameter, "null victim model");
    m.sources.push_back(v.id);
    m.targets.push_back(v.id);
  }

  std::vector<std::optional<data::ImageSet>> adversarial;
  for (const auto& g : generators) {
    if (g.input_shape() == shape)
      adversarial.emplace_back(attack::generate_adversarial_set(g, eval_set.images()));
    else
      adversarial.emplace_back(std::nullopt);
  }
  for (const auto& t : victims) {
    if (t.model->input_shape() == shape)
      m.pre.emplace_back(metrics::report(clustering::predict(*t.model, eval_set.images()), eval_set.labels()));
    else
      m.pre.emplace_back(std::nullopt);
  }
  m.cells.assign(victims.size(), std::vector<std::optional<metrics::MetricsReport>>(victims.size()));
  for (std::size_t s = 0; s < victims.size(); ++s) {
    if (!adversarial[s]) continue;
    for (std::size_t t = 0; t < victims.size(); ++t) {
      if (!m.pre[t]) continue;
      m.cells[s][t] = metrics::report(clustering::predict(*victims[t].model, *adversarial[s]), eval_set.labels());
    }
  }
  return m;
}

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::nmi: return "nmi";
    case Metric::ari: return "ari";
    case Metric::acc: return "acc";
  }
  return "nmi";
}

namespace {

double pick(const metrics::MetricsReport& r, Metric metric) {
  switch (metric) {
    case Metric::nmi: return r.nmi;
    case Metric::ari: return r.ari;
    case Metric::acc: return r.acc;
  }
  return r.nmi;
}

}  // namespace

std::string matrix_csv(const TransferMatrix& m, Metric metric) {
  std::ostringstream os;
  os.precision(10);
  os << "source\\target";
  for (const auto& t : m.targets) os << ',' << t;
  os << '\n';
  for (std::size_t s = 0; s < m.sources.size(); ++s) {
    os << m.sources[s];
    for (std::size_t t = 0; t < m.targets.size(); ++t) {
      os << ',';
      if (m.cells[s][t])
        os << pick(*m.cells[s][t], metric);
      else
        os << "skipped";
    }
    os << '\n';
  }
  return os.str();
}

std::string baseline_csv(const TransferMatrix& m) {
  std::ostringstream os;
  os.precision(10);
  os << "target,nmi,ari,acc\n";
  for (std::size_t t = 0; t < m.targets.size(); ++t) {
    os << m.targets[t];
    if (m.pre[t])
      os << ',' << m.pre[t]->nmi << ',' << m.pre[t]->ari << ',' << m.pre[t]->acc;
    else
      os << ",skipped,skipped,skipped";
    os << '\n';
  }
  return os.str();
}

nlohmann::json to_json(const TransferMatrix& m) {
  nlohmann::json j;
  j["sources"] = m.sources;
  j["targets"] = m.targets;
  for (Metric metric : {Metric::nmi, Metric::ari, Metric::acc}) {
    nlohmann::json grid = nlohmann::json::array();
    for (const auto& row : m.cells) {
      nlohmann::json r = nlohmann::json::array();
      for (const auto& c : row) r.push_back(c ? nlohmann::json(pick(*c, metric)) : nlohmann::json("skipped"));
      grid.push_back(r);
    }
    j["post"][std::string(to_string(metric))] = grid;
    nlohmann::json pre = nlohmann::json::array();
    for (const auto& p : m.pre) pre.push_back(p ? nlohmann::json(pick(*p, metric)) : nlohmann::json("skipped"));
    j["pre"][std::string(to_string(metric))] = pre;
  }
  return j;
}

nlohmann::json to_json(const SurrogateResult& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs)
    runs.push_back({{"pre", metrics::to_json(run.pre)}, {"post", metrics::to_json(run.post)}, {"sample_ids", run.sample_ids}});
  return {{"runs", runs},
          {"mean_pre_nmi", r.mean_pre_nmi},
          {"mean_post_nmi", r.mean_post_nmi},
          {"mean_pre_ari", r.mean_pre_ari},
          {"mean_post_ari", r.mean_post_ari},
          {"mean_pre_acc", r.mean_pre_acc},
          {"mean_post_acc", r.mean_post_acc},
          {"ledger", attack::to_json(r.ledger)}};
}

std::vector<int> album_labels(mlaas::AlbumApi& service, const data::ImageSet& images) {
  const std::string token = mlaas::with_retry([&] { return service.create_album(); });
  std::vector<std::int64_t> ids;
  const auto shape = images.sample_shape();
  for (int i = 0; i < images.size(); ++i) {
    auto px = images.pixels().sample(static_cast<std::size_t>(i));
    const Tensor image({shape.channels, shape.height, shape.width}, std::vector<double>(px.begin(), px.end()));
    ids.push_back(mlaas::with_retry([&] { return service.add_image(token, image); }));
  }
  mlaas::with_retry([&] { service.group_face(token); });
  const auto entries = mlaas::with_retry([&] { return service.get_album_detail(token); });
  require(entries.size() == ids.size(), ErrorCode::service_error, "album detail does not cover every image");
  std::vector<int> labels(ids.size(), -1);
  for (const auto& e : entries) {
    const auto it = std::find(ids.begin(), ids.end(), e.image_id);
    require(it != ids.end(), ErrorCode::service_error, "album detail lists an unknown image");
    labels[static_cast<std::size_t>(it - ids.begin())] = e.group_id;
  }
  for (int l : labels) require(l >= 0, ErrorCode::service_error, "album detail misses an image");
  return labels;
}

SurrogateResult surrogate_evaluate(mlaas::AlbumApi& target, const attack::TrainedGenerator& generator,
                                   const data::Dataset& dataset, const SurrogateSettings& settings) {
  require(settings.images_per_identity >= 1 && settings.resamplings >= 1, ErrorCode::invalid_parameter,
          "images_per_identity and resamplings must be >= 1");
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(dataset.k_true()));
  for (int i = 0; i < dataset.n(); ++i) by_class[static_cast<std::size_t>(dataset.labels()[static_cast<std::size_t>(i)])].push_back(i);
  for (const auto& c : by_class)
    require(static_cast<int>(c.size()) >= settings.images_per_identity, ErrorCode::insufficient_data,
            "an identity has fewer images than images_per_identity");

  SurrogateResult out;
  for (int r = 0; r < settings.resamplings; ++r) {
    std::mt19937_64 rng(data::derive_seed(settings.seed, 700 + static_cast<std::uint64_t>(r)));
    std::vector<int> chosen;
    for (auto pool : by_class) {
      std::shuffle(pool.begin(), pool.end(), rng);
      chosen.insert(chosen.end(), pool.begin(), pool.begin() + settings.images_per_identity);
    }
    const data::Dataset sample = dataset.subset(chosen);
    const auto adversarial = attack::generate_adversarial_set(generator, sample.images());
    SurrogateRun run;
    run.pre = metrics::report(album_labels(target, sample.images()), sample.labels());
    run.post = metrics::report(album_labels(target, adversarial), sample.labels());
    run.sample_ids = std::move(chosen);
    out.runs.push_back(std::move(run));
  }
  const double n = static_cast<double>(out.runs.size());
  for (const auto& run : out.runs) {
    out.mean_pre_nmi += run.pre.nmi / n;
    out.mean_post_nmi += run.post.nmi / n;
    out.mean_pre_ari += run.pre.ari / n;
    out.mean_post_ari += run.post.ari / n;
    out.mean_pre_acc += run.pre.acc / n;
    out.mean_post_acc += run.post.acc / n;
  }
  return out;
}

SurrogateResult surrogate_attack(mlaas::AlbumApi& target, const clustering::ClusterModel& surrogate,
                                 const data::Dataset& dataset, const attack::AttackConfig& config,
                                 const SurrogateSettings& settings) {
  const auto trained = attack::train_attack(surrogate, dataset.images(), config);
  SurrogateResult out = surrogate_evaluate(target, trained.generator, dataset, settings);
  out.ledger = trained.ledger;
  return out;
}

}  // namespace clusterbreak::transfer
