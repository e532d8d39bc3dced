#include "clusterbreak/run.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "clusterbreak/checkpoint.hpp"
#include "clusterbreak/error.hpp"
#include "clusterbreak/metrics.hpp"
#include "clusterbreak/mlaas.hpp"
#include "clusterbreak/transfer.hpp"

namespace fs = std::filesystem;

namespace clusterbreak::run {

using nlohmann::json;

namespace {

// Sub-seed streams derived from the master seed.
enum Stream : std::uint64_t { kTrainer = 11, kAttack = 12, kSplit = 13, kInjection = 14, kRetrain = 15, kSurrogate = 16 };

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  fail(ErrorCode::config_validation, key + ": " + why);
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (is.fail() || !is.eof()) bad(key, "cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad(key, "expected true or false, got '" + v + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), ErrorCode::io_error, "cannot write " + path.string());
  os << text;
}

std::string dataset_id(const RunConfig& c) {
  if (c.dataset == "synthetic") {
    std::ostringstream os;
    os << "synthetic_k" << c.k_true << "_sep" << c.class_separation << "_n" << c.n_per_class << "_s" << c.data_seed;
    return os.str();
  }
  return c.dataset;
}

}  // namespace

// ---------------------------------------------------------------- config

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  using Setter = std::function<void(RunConfig&, const std::string& key, const std::string&)>;
  auto str = [](std::string RunConfig::*f) { return Setter([f](RunConfig& c, const std::string&, const std::string& v) { c.*f = v; }); };
  auto i32 = [](int& (*f)(RunConfig&)) {
    return Setter([f](RunConfig& c, const std::string& key, const std::string& v) { f(c) = parse_number<int>(key, v); });
  };
  auto f64 = [](double& (*f)(RunConfig&)) {
    return Setter([f](RunConfig& c, const std::string& key, const std::string& v) { f(c) = parse_number<double>(key, v); });
  };
  auto u64 = [](std::uint64_t& (*f)(RunConfig&)) {
    return Setter([f](RunConfig& c, const std::string& key, const std::string& v) {
      if (!v.empty() && v.front() == '-') bad(key, "must be non-negative");
      f(c) = parse_number<std::uint64_t>(key, v);
    });
  };
  static const std::map<std::string, Setter> table = {
      {"kind", str(&RunConfig::kind)},
      {"model_id", str(&RunConfig::model_id)},
      {"dataset", str(&RunConfig::dataset)},
      {"n_per_class", i32([](RunConfig& c) -> int& { return c.n_per_class; })},
      {"k_true", i32([](RunConfig& c) -> int& { return c.k_true; })},
      {"class_separation", f64([](RunConfig& c) -> double& { return c.class_separation; })},
      {"channels", i32([](RunConfig& c) -> int& { return c.channels; })},
      {"height", i32([](RunConfig& c) -> int& { return c.height; })},
      {"width", i32([](RunConfig& c) -> int& { return c.width; })},
      {"data_seed", u64([](RunConfig& c) -> std::uint64_t& { return c.data_seed; })},
      {"holdout_fraction", f64([](RunConfig& c) -> double& { return c.holdout_fraction; })},
      {"model", str(&RunConfig::model)},
      {"k", i32([](RunConfig& c) -> int& { return c.k; })},
      {"embedding_dim", i32([](RunConfig& c) -> int& { return c.trainer.embedding_dim; })},
      {"hidden_units", i32([](RunConfig& c) -> int& { return c.trainer.hidden_units; })},
      {"pretrain_epochs", i32([](RunConfig& c) -> int& { return c.trainer.pretrain_epochs; })},
      {"refine_epochs", i32([](RunConfig& c) -> int& { return c.trainer.refine_epochs; })},
      {"learning_rate", f64([](RunConfig& c) -> double& { return c.trainer.learning_rate; })},
      {"victim", str(&RunConfig::victim)},
      {"victims", Setter([](RunConfig& c, const std::string&, const std::string& v) { c.victims = split_list(v); })},
      {"generator", str(&RunConfig::generator)},
      {"generators", Setter([](RunConfig& c, const std::string&, const std::string& v) { c.generators = split_list(v); })},
      {"alpha_a", f64([](RunConfig& c) -> double& { return c.attack.alpha_a; })},
      {"alpha_c", f64([](RunConfig& c) -> double& { return c.attack.alpha_c; })},
      {"epsilon", f64([](RunConfig& c) -> double& { return c.attack.epsilon; })},
      {"batch_size", i32([](RunConfig& c) -> int& { return c.attack.batch_size; })},
      {"max_batches", i32([](RunConfig& c) -> int& { return c.attack.max_batches; })},
      {"generator_lr", f64([](RunConfig& c) -> double& { return c.attack.generator_lr; })},
      {"discriminator_lr", f64([](RunConfig& c) -> double& { return c.attack.discriminator_lr; })},
      {"window", i32([](RunConfig& c) -> int& { return c.attack.window; })},
      {"tau", f64([](RunConfig& c) -> double& { return c.attack.tau; })},
      {"patience", i32([](RunConfig& c) -> int& { return c.attack.patience; })},
      {"generator_width", i32([](RunConfig& c) -> int& { return c.attack.generator_width; })},
      {"target", Setter([](RunConfig& c, const std::string& key, const std::string& v) {
         if (v.empty() || v == "none")
           c.attack.target.reset();
         else
           c.attack.target = parse_number<int>(key, v);
       })},
      {"cache_clean_memberships",
       Setter([](RunConfig& c, const std::string& key, const std::string& v) { c.attack.cache_clean_memberships = parse_bool(key, v); })},
      {"epsilons", Setter([](RunConfig& c, const std::string& key, const std::string& v) {
         c.epsilons.clear();
         for (const auto& e : split_list(v)) c.epsilons.push_back(parse_number<double>(key, e));
       })},
      {"mode", str(&RunConfig::mode)},
      {"components", i32([](RunConfig& c) -> int& { return c.components; })},
      {"shrinkage", f64([](RunConfig& c) -> double& { return c.shrinkage; })},
      {"target_fpr", f64([](RunConfig& c) -> double& { return c.target_fpr; })},
      {"trials", i32([](RunConfig& c) -> int& { return c.trials; })},
      {"injection_images", i32([](RunConfig& c) -> int& { return c.injection_images; })},
      {"retrain_epochs", i32([](RunConfig& c) -> int& { return c.retrain.epochs; })},
      {"retrain_lr", f64([](RunConfig& c) -> double& { return c.retrain.learning_rate; })},
      {"adversarial_weight", f64([](RunConfig& c) -> double& { return c.retrain.adversarial_weight; })},
      {"consistency_weight", f64([](RunConfig& c) -> double& { return c.retrain.consistency_weight; })},
      {"host", str(&RunConfig::host)},
      {"port", i32([](RunConfig& c) -> int& { return c.port; })},
      {"backend", str(&RunConfig::backend)},
      {"backend_seed", u64([](RunConfig& c) -> std::uint64_t& { return c.backend_seed; })},
      {"threshold", f64([](RunConfig& c) -> double& { return c.threshold; })},
      {"rate_limit", f64([](RunConfig& c) -> double& { return c.rate_limit; })},
      {"storage", str(&RunConfig::storage)},
      {"service", str(&RunConfig::service)},
      {"images_per_identity", i32([](RunConfig& c) -> int& { return c.images_per_identity; })},
      {"resamplings", i32([](RunConfig& c) -> int& { return c.resamplings; })},
      {"reports", str(&RunConfig::reports)},
      {"out", Setter([](RunConfig& c, const std::string&, const std::string& v) { c.out = v; })},
      {"seed", u64([](RunConfig& c) -> std::uint64_t& { return c.seed; })},
  };
  const auto it = table.find(key);
  if (it == table.end()) bad(key, "unknown configuration key");
  it->second(*this, key, v);
}

void RunConfig::validate() const {
  static const std::set<std::string> kinds = {"train", "attack", "sweep", "transfer", "defend", "serve",
                                              "attack-mlaas", "report"};
  if (!kinds.count(kind)) bad("kind", "unknown experiment kind '" + kind + "'");
  if (dataset != "synthetic" && dataset.rfind("folder:", 0) != 0 && dataset.rfind("file:", 0) != 0)
    bad("dataset", "expected synthetic, folder:<dir> or file:<path>");
  if (n_per_class < 1) bad("n_per_class", "must be >= 1");
  if (k_true < 2) bad("k_true", "must be >= 2");
  if (!(class_separation > 0.0)) bad("class_separation", "must be > 0");
  if (channels < 1) bad("channels", "must be >= 1");
  if (height < 1) bad("height", "must be >= 1");
  if (width < 1) bad("width", "must be >= 1");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) bad("holdout_fraction", "must lie in (0, 1)");
  if (model != "toy" && model != "kmeans") bad("model", "expected toy or kmeans");
  if (k < 0 || k == 1) bad("k", "must be 0 (use k_true) or >= 2");
  try {
    attack.validate();
  } catch (const Error& e) {
    fail(ErrorCode::config_validation, e.what());
  }
  if (kind == "sweep") {
    if (epsilons.size() < 2) bad("epsilons", "need at least two values");
    for (std::size_t i = 0; i < epsilons.size(); ++i) {
      if (!(epsilons[i] > 0.0)) bad("epsilons", "values must be > 0");
      if (i > 0 && !(epsilons[i] > epsilons[i - 1])) bad("epsilons", "values must be strictly ascending");
    }
  }
  if (mode != "anomaly" && mode != "retrain" && mode != "pca") bad("mode", "expected anomaly, retrain or pca");
  if (components < 1) bad("components", "must be >= 1");
  if (!(shrinkage > 0.0 && shrinkage <= 1.0)) bad("shrinkage", "must lie in (0, 1]");
  if (!(target_fpr > 0.0 && target_fpr < 1.0)) bad("target_fpr", "must lie in (0, 1)");
  if (trials < 1) bad("trials", "must be >= 1");
  if (injection_images < 1) bad("injection_images", "must be >= 1");
  if (retrain.epochs < 0) bad("retrain_epochs", "must be >= 0");
  if (!(retrain.learning_rate > 0.0)) bad("retrain_lr", "must be > 0");
  if (port < 0 || port > 65535) bad("port", "must lie in [0, 65535]");
  if (threshold < 0.0) bad("threshold", "must be >= 0");
  if (images_per_identity < 1) bad("images_per_identity", "must be >= 1");
  if (resamplings < 1) bad("resamplings", "must be >= 1");

  auto exists = [](const std::string& key, const std::string& path) {
    if (!path.empty() && !fs::exists(path)) bad(key, "path does not exist: " + path);
  };
  exists("victim", victim);
  exists("generator", generator);
  exists("backend", backend);
  for (const auto& v : victims) exists("victims", v);
  for (const auto& g : generators) exists("generators", g);
  if (dataset.rfind("file:", 0) == 0) exists("dataset", dataset.substr(5));
  if (kind == "transfer" && victims.empty()) bad("victims", "transfer needs at least one victim checkpoint");
  if (!generators.empty() && generators.size() != victims.size())
    bad("generators", "need exactly one generator per victim");
  if (kind == "report") {
    if (reports.empty()) bad("reports", "report needs a directory");
    exists("reports", reports);
  }
}

std::map<std::string, std::string> read_flat_config(const fs::path& path) {
  std::ifstream is(path);
  require(is.good(), ErrorCode::io_error, "cannot read config " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorCode::config_validation, path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

RunConfig make_config(const std::map<std::string, std::string>& file_values,
                      const std::map<std::string, std::string>& overrides) {
  RunConfig c;
  c.out = default_out_root();
  for (const auto& [k, v] : file_values) c.set(k, v);
  for (const auto& [k, v] : overrides) c.set(k, v);
  return c;
}

json to_json(const RunConfig& c) {
  return {{"kind", c.kind},
          {"model_id", c.model_id},
          {"dataset", c.dataset},
          {"n_per_class", c.n_per_class},
          {"k_true", c.k_true},
          {"class_separation", c.class_separation},
          {"channels", c.channels},
          {"height", c.height},
          {"width", c.width},
          {"data_seed", c.data_seed},
          {"holdout_fraction", c.holdout_fraction},
          {"model", c.model},
          {"k", c.k},
          {"trainer",
           {{"embedding_dim", c.trainer.embedding_dim},
            {"hidden_units", c.trainer.hidden_units},
            {"pretrain_epochs", c.trainer.pretrain_epochs},
            {"refine_epochs", c.trainer.refine_epochs},
            {"batch_size", c.trainer.batch_size},
            {"learning_rate", c.trainer.learning_rate},
            {"temperature", c.trainer.temperature},
            {"reconstruction_weight", c.trainer.reconstruction_weight}}},
          {"victim", c.victim},
          {"victims", c.victims},
          {"generator", c.generator},
          {"generators", c.generators},
          {"attack", attack::to_json(c.attack)},
          {"epsilons", c.epsilons},
          {"mode", c.mode},
          {"components", c.components},
          {"shrinkage", c.shrinkage},
          {"target_fpr", c.target_fpr},
          {"trials", c.trials},
          {"injection_images", c.injection_images},
          {"retrain",
           {{"epochs", c.retrain.epochs},
            {"learning_rate", c.retrain.learning_rate},
            {"adversarial_weight", c.retrain.adversarial_weight},
            {"consistency_weight", c.retrain.consistency_weight},
            {"batch_size", c.retrain.batch_size}}},
          {"host", c.host},
          {"port", c.port},
          {"backend", c.backend},
          {"backend_seed", c.backend_seed},
          {"threshold", c.threshold},
          {"rate_limit", c.rate_limit},
          {"service", c.service},
          {"images_per_identity", c.images_per_identity},
          {"resamplings", c.resamplings},
          {"out", c.out.string()},
          {"seed", c.seed}};
}

fs::path default_out_root() {
  const char* env = std::getenv("CLUSTERBREAK_OUT");
  return env && *env ? fs::path(env) : fs::path("out");
}

data::Dataset load_dataset(const RunConfig& c) {
  if (c.dataset == "synthetic") {
    data::SyntheticSpec s;
    s.n_per_class = c.n_per_class;
    s.k_true = c.k_true;
    s.channels = c.channels;
    s.height = c.height;
    s.width = c.width;
    s.class_separation = c.class_separation;
    s.seed = c.data_seed;
    return data::make_synthetic_image_dataset(s);
  }
  auto resolve = [](fs::path p) {
    const char* root = std::getenv("CLUSTERBREAK_DATA_DIR");
    if (p.is_relative() && root && *root && !fs::exists(p)) p = fs::path(root) / p;
    return p;
  };
  if (c.dataset.rfind("folder:", 0) == 0) return data::load_image_folder(resolve(c.dataset.substr(7)), c.height, c.width);
  return data::load_dataset(resolve(c.dataset.substr(5)));
}

std::pair<data::Dataset, data::Dataset> split_dataset(const RunConfig& c, const data::Dataset& dataset) {
  return data::split(dataset, c.holdout_fraction, data::derive_seed(c.seed, kSplit));
}

json histogram(const std::vector<double>& values, int bins) {
  require(bins >= 1, ErrorCode::invalid_parameter, "bins must be >= 1");
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, v);
  if (hi <= 0.0) hi = 1.0;
  std::vector<double> edges(static_cast<std::size_t>(bins) + 1);
  for (int b = 0; b <= bins; ++b) edges[static_cast<std::size_t>(b)] = hi * b / bins;
  std::vector<long> counts(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    int b = static_cast<int>(v / hi * bins);
    ++counts[static_cast<std::size_t>(std::clamp(b, 0, bins - 1))];
  }
  return {{"edges", edges}, {"counts", counts}};
}

// ---------------------------------------------------------------- pipelines

namespace {

struct Context {
  const RunConfig& cfg;
  data::Dataset train;
  data::Dataset holdout;
  json report;
};

int cluster_count(const RunConfig& c, const data::Dataset& d) { return c.k > 0 ? c.k : d.k_true(); }

void add_artifact(Context& ctx, const fs::path& path) {
  ctx.report["artifacts"][path.filename().string()] = io::file_sha256(path);
}

std::shared_ptr<clustering::ClusterModel> obtain_victim(Context& ctx, const std::string& path, std::uint64_t seed,
                                                        const std::string& save_as) {
  if (!path.empty()) return clustering::load_cluster_model(path);
  const auto& c = ctx.cfg;
  std::shared_ptr<clustering::ClusterModel> model;
  if (c.model == "kmeans") {
    model = clustering::kmeans_baseline(ctx.train.images(), cluster_count(c, ctx.train), seed);
  } else {
    clustering::TrainerSettings t = c.trainer;
    t.seed = seed;
    model = clustering::train_toy_clusterer(ctx.train.images(), cluster_count(c, ctx.train), t);
  }
  const fs::path out = c.out / save_as;
  model->save(out);
  add_artifact(ctx, out);
  return model;
}

attack::AttackConfig attack_config(const RunConfig& c) {
  attack::AttackConfig a = c.attack;
  a.seed = data::derive_seed(c.seed, kAttack);
  return a;
}

attack::TrainedGenerator obtain_generator(Context& ctx, const clustering::ClusterModel& victim,
                                          const std::string& path, const std::string& save_as) {
  if (!path.empty()) return attack::TrainedGenerator::load(path);
  const auto result = attack::train_attack(victim, ctx.train.images(), attack_config(ctx.cfg));
  if (!result.converged)
    ctx.report["warnings"].push_back("attack for " + save_as + " did not converge within max_batches");
  const fs::path out = ctx.cfg.out / save_as;
  result.generator.save(out);
  add_artifact(ctx, out);
  return result.generator;
}

std::string victim_id(const RunConfig& c, const std::string& path) {
  if (!c.model_id.empty()) return c.model_id;
  if (!path.empty()) return fs::path(path).stem().string();
  return c.model + "_s" + std::to_string(c.seed);
}

json perturbation_stats(const attack::AttackEvaluation& ev) {
  return {{"mean", ev.mean_norm},
          {"max", ev.max_norm},
          {"mean_image_norm", ev.mean_image_norm},
          {"relative_mean", ev.mean_norm / ev.mean_image_norm},
          {"histogram", histogram(ev.perturbation_norms)}};
}

void run_train(Context& ctx) {
  const auto& c = ctx.cfg;
  auto model = obtain_victim(ctx, "", data::derive_seed(c.seed, kTrainer), "victim.ckpt");
  const auto pre = metrics::report(clustering::predict(*model, ctx.holdout.images()), ctx.holdout.labels());
  ctx.report["pre"] = metrics::to_json(pre);
  ctx.report["train_nmi"] = metrics::nmi(clustering::predict(*model, ctx.train.images()), ctx.train.labels());
  write_text(c.out / "confusion_pre.csv", metrics::confusion_csv(pre.confusion));
}

void run_attack(Context& ctx) {
  const auto& c = ctx.cfg;
  auto victim = obtain_victim(ctx, c.victim, data::derive_seed(c.seed, kTrainer), "victim.ckpt");
  const auto before = victim->query_count();
  const auto result = attack::train_attack(*victim, ctx.train.images(), attack_config(c));
  const auto observed = victim->query_count() - before;
  if (!result.converged) ctx.report["warnings"].push_back("attack did not converge within max_batches");
  const fs::path gen_path = c.out / "generator.ckpt";
  result.generator.save(gen_path);
  add_artifact(ctx, gen_path);

  const auto ev = attack::evaluate_attack(*victim, result.generator, ctx.holdout);
  ctx.report["pre"] = metrics::to_json(ev.pre);
  ctx.report["post"] = metrics::to_json(ev.post);
  ctx.report["ledger"] = attack::to_json(result.ledger);
  ctx.report["observed_queries"] = observed;
  ctx.report["converged"] = result.converged;
  ctx.report["objective_history"] = result.objective_history;
  ctx.report["perturbation"] = perturbation_stats(ev);
  ctx.report["largest_cluster_share"] = {{"pre", metrics::largest_cluster_share(ev.pre_labels)},
                                         {"post", metrics::largest_cluster_share(ev.post_labels)}};
  write_text(c.out / "confusion_pre.csv", metrics::confusion_csv(ev.pre.confusion));
  write_text(c.out / "confusion_post.csv", metrics::confusion_csv(ev.post.confusion));
}

void run_sweep(Context& ctx) {
  const auto& c = ctx.cfg;
  auto victim = obtain_victim(ctx, c.victim, data::derive_seed(c.seed, kTrainer), "victim.ckpt");
  const auto sweep = attack::epsilon_sweep(*victim, ctx.train.images(), ctx.holdout, attack_config(c), c.epsilons);
  json points = json::array();
  std::ostringstream csv;
  csv.precision(10);
  csv << "epsilon,mean_norm,max_norm,nmi,ari,acc,batch_queries,converged\n";
  std::vector<double> eps, nmis;
  for (const auto& p : sweep.points) {
    points.push_back({{"epsilon", p.epsilon},
                      {"mean_norm", p.mean_norm},
                      {"max_norm", p.max_norm},
                      {"post", metrics::to_json(p.post)},
                      {"ledger", attack::to_json(p.ledger)},
                      {"converged", p.converged}});
    csv << p.epsilon << ',' << p.mean_norm << ',' << p.max_norm << ',' << p.post.nmi << ',' << p.post.ari << ','
        << p.post.acc << ',' << p.ledger.batch_queries << ',' << (p.converged ? 1 : 0) << '\n';
    eps.push_back(p.epsilon);
    nmis.push_back(p.post.nmi);
    if (!p.converged) ctx.report["warnings"].push_back("attack at epsilon " + std::to_string(p.epsilon) + " did not converge");
  }
  ctx.report["pre"] = metrics::to_json(sweep.pre);
  ctx.report["sweep"] = points;
  ctx.report["spearman_epsilon_nmi"] = attack::spearman(eps, nmis);
  write_text(c.out / "sweep.csv", csv.str());
}

void run_transfer(Context& ctx) {
  const auto& c = ctx.cfg;
  std::vector<transfer::NamedModel> victims;
  std::vector<attack::TrainedGenerator> generators;
  for (std::size_t i = 0; i < c.victims.size(); ++i) {
    auto model = clustering::load_cluster_model(c.victims[i]);
    const std::string id = fs::path(c.victims[i]).stem().string();
    if (c.generators.empty())
      generators.push_back(obtain_generator(ctx, *model, "", "generator_" + id + ".ckpt"));
    else
      generators.push_back(attack::TrainedGenerator::load(c.generators[i]));
    victims.push_back({id, std::move(model)});
  }
  const auto m = transfer::transfer_matrix(victims, generators, ctx.holdout);
  ctx.report["transfer"] = transfer::to_json(m);
  for (auto metric : {transfer::Metric::nmi, transfer::Metric::ari, transfer::Metric::acc})
    write_text(c.out / ("transfer_" + std::string(transfer::to_string(metric)) + ".csv"), transfer::matrix_csv(m, metric));
  write_text(c.out / "transfer_pre.csv", transfer::baseline_csv(m));
  write_text(c.out / "transfer.json", transfer::to_json(m).dump(2));
}

void run_defend(Context& ctx) {
  const auto& c = ctx.cfg;
  auto victim = obtain_victim(ctx, c.victim, data::derive_seed(c.seed, kTrainer), "victim.ckpt");
  const auto generator = obtain_generator(ctx, *victim, c.generator, "generator.ckpt");
  auto toy = std::dynamic_pointer_cast<clustering::ToyDeepClusterer>(victim);

  if (c.mode == "anomaly") {
    // First half of the holdout calibrates, the rest hosts the injection trials.
    const int n = ctx.holdout.n();
    const int n_cal = n / 2;
    std::vector<int> cal_ids(static_cast<std::size_t>(n_cal)), eval_ids;
    for (int i = 0; i < n_cal; ++i) cal_ids[static_cast<std::size_t>(i)] = i;
    for (int i = n_cal; i < n && static_cast<int>(eval_ids.size()) < c.injection_images; ++i) eval_ids.push_back(i);
    const auto cal = ctx.holdout.subset(cal_ids);
    const auto eval = ctx.holdout.subset(eval_ids);
    auto extractor = toy ? defense::encoder_features(toy) : defense::pixel_features();
    auto det = defense::fit_detector(ctx.train.images(), extractor, c.components, c.shrinkage, c.seed);
    const double threshold = defense::calibrate_threshold(det, cal.images(), c.target_fpr);
    const auto rep = defense::injection_experiment(det, eval.images(), generator, c.trials,
                                                   data::derive_seed(c.seed, kInjection));
    ctx.report["detection"] = defense::to_json(rep);
    ctx.report["detection"]["calibration_size"] = cal.n();
    ctx.report["detection"]["threshold"] = threshold;
    ctx.report["detection"]["clean_fpr_eval"] = defense::flag_rate(det, eval.images());
    write_text(c.out / "detection_report.json", defense::to_json(rep).dump(2));
  } else if (c.mode == "pca") {
    const auto adv = attack::generate_adversarial_set(generator, ctx.holdout.images());
    const auto p = defense::pca_overlap(ctx.holdout.images(), adv);
    ctx.report["pca"] = {{"overlap", p.overlap},
                         {"explained_variance", std::vector<double>(p.explained_variance.begin(), p.explained_variance.end())}};
    write_text(c.out / "pca.csv", defense::pca_csv(p));
  } else {
    require(toy != nullptr, ErrorCode::config_validation, "mode: retrain needs a toy deep clusterer victim");
    defense::RetrainSettings rs = c.retrain;
    rs.seed = data::derive_seed(c.seed, kRetrain);
    const auto retrained = defense::adversarial_retrain(*toy, ctx.train.images(), generator, rs);
    const fs::path path = c.out / "retrained.ckpt";
    retrained->save(path);
    add_artifact(ctx, path);
    const auto before = attack::evaluate_attack(*toy, generator, ctx.holdout);
    const auto after = attack::evaluate_attack(*retrained, generator, ctx.holdout);
    ctx.report["pre"] = metrics::to_json(after.pre);
    ctx.report["post"] = metrics::to_json(after.post);
    ctx.report["retrain"] = {{"original", {{"clean", metrics::to_json(before.pre)}, {"post", metrics::to_json(before.post)}}},
                             {"retrained", {{"clean", metrics::to_json(after.pre)}, {"post", metrics::to_json(after.post)}}}};
  }
}

std::shared_ptr<clustering::ToyDeepClusterer> backend_model(const RunConfig& c, const data::Dataset& train) {
  if (!c.backend.empty()) return clustering::ToyDeepClusterer::load(c.backend);
  clustering::TrainerSettings t = c.trainer;
  t.seed = c.backend_seed;
  return clustering::train_toy_clusterer(train.images(), cluster_count(c, train), t);
}

void run_attack_mlaas(Context& ctx) {
  const auto& c = ctx.cfg;
  auto surrogate = obtain_victim(ctx, c.victim, data::derive_seed(c.seed, kTrainer), "surrogate.ckpt");
  std::unique_ptr<mlaas::AlbumApi> service;
  if (c.service.empty()) {
    mlaas::ServiceOptions opts;
    opts.rate_limit_per_second = c.rate_limit;
    service = std::make_unique<mlaas::MockAlbumService>(
        mlaas::make_encoder_backend(backend_model(c, ctx.train), c.threshold), opts);
  } else {
    const auto colon = c.service.rfind(':');
    require(colon != std::string::npos, ErrorCode::config_validation, "service: expected host:port");
    service = std::make_unique<mlaas::HttpAlbumClient>(c.service.substr(0, colon), std::stoi(c.service.substr(colon + 1)));
  }
  const auto result = attack::train_attack(*surrogate, ctx.train.images(), attack_config(c));
  if (!result.converged) ctx.report["warnings"].push_back("surrogate attack did not converge within max_batches");
  const fs::path gen_path = c.out / "generator.ckpt";
  result.generator.save(gen_path);
  add_artifact(ctx, gen_path);
  transfer::SurrogateSettings ss{c.images_per_identity, c.resamplings, data::derive_seed(c.seed, kSurrogate)};
  auto r = transfer::surrogate_evaluate(*service, result.generator, ctx.holdout, ss);
  r.ledger = result.ledger;
  ctx.report["surrogate"] = transfer::to_json(r);
  ctx.report["ledger"] = attack::to_json(result.ledger);
}

}  // namespace

json run(const RunConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  if (config.kind == "report") {
    const auto files = render_tables(config.reports);
    json j = json::array();
    for (const auto& f : files) j.push_back(f.string());
    return {{"tables", j}};
  }
  require(config.kind != "serve", ErrorCode::config_validation, "kind: serve blocks; call serve() instead");
  fs::create_directories(config.out);

  const data::Dataset dataset = load_dataset(config);
  auto [train, holdout] = split_dataset(config, dataset);
  Context ctx{config, std::move(train), std::move(holdout), json::object()};
  ctx.report["schema"] = kReportSchema;
  ctx.report["kind"] = config.kind;
  ctx.report["config"] = to_json(config);
  ctx.report["dataset_id"] = dataset_id(config);
  ctx.report["model_id"] = config.kind == "transfer" ? std::string("transfer") : victim_id(config, config.victim);
  ctx.report["warnings"] = json::array();
  ctx.report["artifacts"] = json::object();
  ctx.report["split"] = {{"train", ctx.train.n()}, {"holdout", ctx.holdout.n()}};

  if (config.kind == "train") run_train(ctx);
  else if (config.kind == "attack") run_attack(ctx);
  else if (config.kind == "sweep") run_sweep(ctx);
  else if (config.kind == "transfer") run_transfer(ctx);
  else if (config.kind == "defend") run_defend(ctx);
  else run_attack_mlaas(ctx);

  ctx.report["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(config.out / "report.json", ctx.report.dump(2) + "\n");
  return ctx.report;
}

void serve(const RunConfig& config) {
  config.validate();
  const data::Dataset dataset = load_dataset(config);
  const auto [train, holdout] = split_dataset(config, dataset);
  mlaas::ServiceOptions opts;
  opts.rate_limit_per_second = config.rate_limit;
  opts.storage_path = config.storage;
  mlaas::MockAlbumService service(mlaas::make_encoder_backend(backend_model(config, train), config.threshold), opts);
  mlaas::AlbumHttpServer server(service);
  std::cerr << "serving album API on " << config.host << ":" << config.port << "\n";
  server.listen(config.host, config.port);
}

// ---------------------------------------------------------------- reports

void validate_report(const json& r) {
  require(r.is_object(), ErrorCode::schema_mismatch, "report is not a JSON object");
  require(r.contains("schema"), ErrorCode::missing_field, "report misses field: schema");
  require(r.at("schema") == kReportSchema, ErrorCode::schema_mismatch,
          "unsupported report schema " + r.at("schema").dump());
  for (const char* key : {"kind", "config", "model_id", "dataset_id", "artifacts", "warnings", "wall_clock_seconds"})
    require(r.contains(key), ErrorCode::missing_field, std::string("report misses field: ") + key);
  const std::string kind = r.at("kind").get<std::string>();
  std::vector<const char*> needed;
  if (kind == "attack") needed = {"pre", "post", "ledger", "perturbation"};
  if (kind == "train") needed = {"pre"};
  if (kind == "sweep") needed = {"pre", "sweep"};
  if (kind == "transfer") needed = {"transfer"};
  if (kind == "attack-mlaas") needed = {"surrogate", "ledger"};
  for (const char* key : needed)
    require(r.contains(key), ErrorCode::missing_field, std::string("report misses field: ") + key);
}

std::vector<fs::path> render_tables(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorCode::io_error, "not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "report.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  require(!files.empty(), ErrorCode::missing_field, "no report.json under " + dir.string());

  struct Row {
    std::string model, dataset, kind, line;
  };
  std::vector<Row> table1, queries;
  std::ostringstream sweep;
  sweep.precision(10);
  sweep << "model_id,dataset_id,epsilon,mean_norm,nmi,ari,acc\n";
  std::vector<fs::path> written;
  int transfer_index = 0;

  for (const auto& f : files) {
    std::ifstream is(f);
    json r;
    try {
      r = json::parse(is);
    } catch (const json::exception& e) {
      fail(ErrorCode::schema_mismatch, f.string() + ": " + e.what());
    }
    validate_report(r);
    const std::string model = r.at("model_id").get<std::string>();
    const std::string ds = r.at("dataset_id").get<std::string>();
    const std::string kind = r.at("kind").get<std::string>();
    std::ostringstream line;
    line.precision(10);
    if (r.contains("pre") && r.contains("post")) {
      const auto& pre = r.at("pre");
      const auto& post = r.at("post");
      line << model << ',' << ds << ',' << kind << ',' << pre.at("nmi").get<double>() << ','
           << pre.at("ari").get<double>() << ',' << pre.at("acc").get<double>() << ',' << post.at("nmi").get<double>()
           << ',' << post.at("ari").get<double>() << ',' << post.at("acc").get<double>();
      table1.push_back({model, ds, kind, line.str()});
    }
    if (r.contains("ledger")) {
      const auto& l = r.at("ledger");
      std::ostringstream q;
      q << model << ',' << ds << ',' << kind << ',' << l.at("batch_queries").get<std::uint64_t>() << ','
        << l.at("batch_size").get<int>() << ',' << l.at("training_batches").get<std::uint64_t>() << ','
        << l.at("cache_hits").get<std::uint64_t>();
      queries.push_back({model, ds, kind, q.str()});
    }
    if (r.contains("sweep"))
      for (const auto& p : r.at("sweep"))
        sweep << model << ',' << ds << ',' << p.at("epsilon").get<double>() << ',' << p.at("mean_norm").get<double>()
              << ',' << p.at("post").at("nmi").get<double>() << ',' << p.at("post").at("ari").get<double>() << ','
              << p.at("post").at("acc").get<double>() << '\n';
    if (r.contains("transfer")) {
      const auto& t = r.at("transfer");
      const auto sources = t.at("sources").get<std::vector<std::string>>();
      const auto targets = t.at("targets").get<std::vector<std::string>>();
      for (const char* metric : {"nmi", "ari", "acc"}) {
        std::ostringstream os;
        os.precision(10);
        os << "source\\target";
        for (const auto& id : targets) os << ',' << id;
        os << '\n';
        const auto& grid = t.at("post").at(metric);
        for (std::size_t s = 0; s < sources.size(); ++s) {
          os << sources[s];
          for (const auto& cell : grid.at(s)) {
            os << ',';
            if (cell.is_number())
              os << cell.get<double>();
            else
              os << "skipped";
          }
          os << '\n';
        }
        const std::string name = transfer_index == 0 ? std::string("transfer_") + metric + ".csv"
                                                     : "transfer_" + std::to_string(transfer_index) + "_" + metric + ".csv";
        write_text(dir / name, os.str());
        written.push_back(dir / name);
      }
      ++transfer_index;
    }
  }

  auto by_key = [](const Row& a, const Row& b) {
    return std::tie(a.model, a.dataset, a.kind) < std::tie(b.model, b.dataset, b.kind);
  };
  std::stable_sort(table1.begin(), table1.end(), by_key);
  std::stable_sort(queries.begin(), queries.end(), by_key);
  std::ostringstream t1;
  t1 << "model_id,dataset_id,kind,pre_nmi,pre_ari,pre_acc,post_nmi,post_ari,post_acc\n";
  for (const auto& r : table1) t1 << r.line << '\n';
  write_text(dir / "table1.csv", t1.str());
  written.push_back(dir / "table1.csv");
  std::ostringstream qc;
  qc << "model_id,dataset_id,kind,batch_queries,batch_size,training_batches,cache_hits\n";
  for (const auto& r : queries) qc << r.line << '\n';
  write_text(dir / "query_complexity.csv", qc.str());
  written.push_back(dir / "query_complexity.csv");
  write_text(dir / "sweep.csv", sweep.str());
  written.push_back(dir / "sweep.csv");
  return written;
}

std::string canonical_dump(const json& report) {
  json copy = report;
  copy.erase("wall_clock_seconds");
  return copy.dump(2);
}

}  // namespace clusterbreak::run
