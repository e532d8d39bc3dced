// clusterbreak command-line front end. Every verb maps onto a RunConfig kind;
// flags override values read from --config, which override built-in defaults.

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "clusterbreak/error.hpp"
#include "clusterbreak/run.hpp"

namespace {

using Overrides = std::map<std::string, std::string>;

struct Verb {
  CLI::App* app;
  std::string kind;
};

// Adds a flag that lands in the overrides map under `key` when given.
void flag(CLI::App* app, Overrides& o, const std::string& name, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(name, [&o, key](const std::string& v) { o[key] = v; }, help);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace clusterbreak;
  CLI::App app{"Adversarial attacks and defenses for deep clustering models"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides o;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "flat key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "extra key=value overrides (repeatable)");
  flag(&app, o, "--out", "out", "output directory (default $CLUSTERBREAK_OUT or ./out)");
  flag(&app, o, "--seed", "seed", "master seed");
  flag(&app, o, "--dataset", "dataset", "synthetic | folder:<dir> | file:<path>");

  std::vector<Verb> verbs;
  auto verb = [&](const std::string& name, const std::string& kind, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    verbs.push_back({sub, kind});
    return sub;
  };

  auto* train = verb("train-clusterer", "train", "train a toy deep clusterer (or k-means baseline)");
  flag(train, o, "--k", "k", "number of clusters (default k_true)");
  flag(train, o, "--model", "model", "toy | kmeans");

  auto attack_flags = [&](CLI::App* sub) {
    flag(sub, o, "--victim", "victim", "victim checkpoint (trained fresh when omitted)");
    flag(sub, o, "--epsilon", "epsilon", "per-sample perturbation budget");
    flag(sub, o, "--alpha-a", "alpha_a", "attack loss weight");
    flag(sub, o, "--alpha-c", "alpha_c", "constraint loss weight");
    flag(sub, o, "--max-batches", "max_batches", "training batch cap");
    flag(sub, o, "--target", "target", "cluster index for a targeted attack");
  };
  auto* attack = verb("attack", "attack", "train a perturbation generator against a victim");
  attack_flags(attack);
  auto* sweep = verb("sweep-epsilon", "sweep", "attack at several budgets");
  attack_flags(sweep);
  flag(sweep, o, "--epsilons", "epsilons", "comma-separated ascending budgets");

  auto* transfer = verb("transfer", "transfer", "source x target transferability matrix");
  flag(transfer, o, "--victims", "victims", "comma-separated victim checkpoints");
  flag(transfer, o, "--generators", "generators", "matching generator checkpoints (trained when omitted)");

  auto* defend = verb("defend", "defend", "anomaly detection, PCA overlap or adversarial retraining");
  flag(defend, o, "--mode", "mode", "anomaly | retrain | pca");
  flag(defend, o, "--victim", "victim", "victim checkpoint");
  flag(defend, o, "--generator", "generator", "generator checkpoint (trained when omitted)");
  flag(defend, o, "--trials", "trials", "injection trials");
  flag(defend, o, "--target-fpr", "target_fpr", "detector operating point");

  auto* serve = verb("serve-mlaas", "serve", "serve the mock album API over HTTP");
  flag(serve, o, "--port", "port", "listen port");
  flag(serve, o, "--host", "host", "bind address");
  flag(serve, o, "--backend-seed", "backend_seed", "seed of the grouping backend");
  flag(serve, o, "--backend", "backend", "backend checkpoint (trained when omitted)");
  flag(serve, o, "--rate-limit", "rate_limit", "requests per second, 0 = unlimited");
  flag(serve, o, "--storage", "storage", "SQLite file (default in-memory)");

  auto* mlaas = verb("attack-mlaas", "attack-mlaas", "surrogate attack against the album service");
  flag(mlaas, o, "--victim", "victim", "surrogate checkpoint (trained when omitted)");
  flag(mlaas, o, "--service", "service", "host:port of a running service (in-process mock when omitted)");
  flag(mlaas, o, "--epsilon", "epsilon", "per-sample perturbation budget");
  flag(mlaas, o, "--backend-seed", "backend_seed", "seed of the in-process backend");
  flag(mlaas, o, "--resamplings", "resamplings", "number of album resamplings");

  auto* report = verb("report", "report", "render tables from report.json files");
  report->add_option_function<std::string>("dir", [&o](const std::string& v) { o["reports"] = v; }, "report directory")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      require(eq != std::string::npos, ErrorCode::config_validation, "--set expects key=value, got '" + s + "'");
      o[s.substr(0, eq)] = s.substr(eq + 1);
    }
    for (const auto& v : verbs)
      if (v.app->parsed()) o["kind"] = v.kind;
    const auto file = config_path.empty() ? Overrides{} : run::read_flat_config(config_path);
    const run::RunConfig cfg = run::make_config(file, o);
    if (cfg.kind == "serve") {
      run::serve(cfg);
      return 0;
    }
    const auto result = run::run(cfg);
    if (cfg.kind == "report") {
      for (const auto& p : result.at("tables")) std::cout << p.get<std::string>() << "\n";
    } else {
      std::cout << (cfg.out / "report.json").string() << "\n";
      for (const auto& w : result.at("warnings")) std::cerr << "warning: " << w.get<std::string>() << "\n";
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return e.code() == ErrorCode::config_validation ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
