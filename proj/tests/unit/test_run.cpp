#include <algorithm>
#include <fstream>
#include <sstream>

#include "clusterbreak/checkpoint.hpp"
#include "clusterbreak/run.hpp"
#include "helpers.hpp"

namespace cb = clusterbreak;
namespace rn = clusterbreak::run;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

rn::RunConfig tiny(const fs::path& out) {
  return rn::make_config({}, {{"kind", "attack"},
                              {"n_per_class", "30"},
                              {"pretrain_epochs", "3"},
                              {"refine_epochs", "1"},
                              {"max_batches", "6"},
                              {"out", out.string()}});
}

json minimal_report(const std::string& model, double pre, double post) {
  return {{"schema", rn::kReportSchema},
          {"kind", "attack"},
          {"config", json::object()},
          {"model_id", model},
          {"dataset_id", "d"},
          {"artifacts", json::object()},
          {"warnings", json::array()},
          {"wall_clock_seconds", 1.0},
          {"pre", {{"nmi", pre}, {"ari", pre}, {"acc", pre}}},
          {"post", {{"nmi", post}, {"ari", post}, {"acc", post}}},
          {"ledger", {{"batch_queries", 10}, {"batch_size", 32}, {"training_batches", 6}, {"cache_hits", 2}}},
          {"perturbation", json::object()}};
}

}  // namespace

TEST(RunConfig, NegativeEpsilonNamesTheField) {
  auto c = rn::make_config({}, {{"epsilon", "-0.5"}});
  try {
    c.validate();
    FAIL();
  } catch (const cb::Error& e) {
    EXPECT_EQ(e.code(), cb::ErrorCode::config_validation);
    EXPECT_NE(std::string(e.what()).find("epsilon"), std::string::npos);
  }
}

TEST(RunConfig, ParseErrorsNameTheirOwnKey) {
  rn::RunConfig c;
  c.set("seed", "3");
  for (const char* key : {"trials", "alpha_c", "backend_seed"}) {
    try {
      c.set(key, "abc");
      FAIL() << key;
    } catch (const cb::Error& e) {
      EXPECT_EQ(std::string(e.what()).rfind(key, 0), 0u) << e.what();
    }
  }
  EXPECT_CODE(c.set("no_such_key", "1"), cb::ErrorCode::config_validation);
}

TEST(RunConfig, FlagsOverrideFileValues) {
  const auto dir = testkit::temp_dir("cfg");
  {
    std::ofstream os(dir / "run.cfg");
    os << "# experiment\nepsilon = 0.3\nseed=4  # trailing comment\n\nepsilons = 0.1, 0.2\n";
  }
  const auto file = rn::read_flat_config(dir / "run.cfg");
  EXPECT_EQ(file.at("seed"), "4");
  const auto c = rn::make_config(file, {{"epsilon", "0.7"}});
  EXPECT_DOUBLE_EQ(c.attack.epsilon, 0.7);
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.epsilons, (std::vector<double>{0.1, 0.2}));
  {
    std::ofstream os(dir / "bad.cfg");
    os << "just words\n";
  }
  EXPECT_CODE(rn::read_flat_config(dir / "bad.cfg"), cb::ErrorCode::config_validation);
  fs::remove_all(dir);
}

TEST(RunConfig, MissingPathsAndBadSweepsRejected) {
  auto c = rn::make_config({}, {{"victim", "/nonexistent/v.ckpt"}});
  EXPECT_CODE(c.validate(), cb::ErrorCode::config_validation);
  auto s = rn::make_config({}, {{"kind", "sweep"}, {"epsilons", "0.5,0.1"}});
  EXPECT_CODE(s.validate(), cb::ErrorCode::config_validation);
  auto t = rn::make_config({}, {{"kind", "transfer"}});
  EXPECT_CODE(t.validate(), cb::ErrorCode::config_validation);
}

TEST(Run, AttackReportIsCompleteAndDeterministic) {
  const auto dir = testkit::temp_dir("run");
  const auto cfg = tiny(dir);
  const json a = rn::run(cfg);
  EXPECT_NO_THROW(rn::validate_report(a));
  EXPECT_GT(a.at("ledger").at("batch_queries").get<int>(), 0);
  EXPECT_EQ(a.at("ledger").at("batch_queries"), a.at("observed_queries"));
  EXPECT_TRUE(fs::exists(dir / "generator.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "confusion_post.csv"));
  EXPECT_EQ(a.at("artifacts").at("generator.ckpt"), cb::io::file_sha256(dir / "generator.ckpt"));
  const auto& hist = a.at("perturbation").at("histogram");
  int total = 0;
  for (int c : hist.at("counts")) total += c;
  EXPECT_EQ(total, a.at("split").at("holdout").get<int>());
  const std::string first = rn::canonical_dump(json::parse(slurp(dir / "report.json")));
  rn::run(cfg);
  EXPECT_EQ(rn::canonical_dump(json::parse(slurp(dir / "report.json"))), first);
  fs::remove_all(dir);
}

TEST(Report, ValidationErrors) {
  json r = minimal_report("m", 0.9, 0.1);
  EXPECT_NO_THROW(rn::validate_report(r));
  r.erase("ledger");
  EXPECT_CODE(rn::validate_report(r), cb::ErrorCode::missing_field);
  r = minimal_report("m", 0.9, 0.1);
  r["schema"] = "other/9";
  EXPECT_CODE(rn::validate_report(r), cb::ErrorCode::schema_mismatch);
}

TEST(Report, TablesSortedByModelId) {
  const auto dir = testkit::temp_dir("tables");
  fs::create_directories(dir / "one");
  {
    std::ofstream(dir / "one" / "report.json") << minimal_report("zeta", 0.9, 0.2).dump();
  }
  rn::render_tables(dir);
  auto t1 = slurp(dir / "table1.csv");
  EXPECT_EQ(std::count(t1.begin(), t1.end(), '\n'), 2);

  fs::create_directories(dir / "two");
  std::ofstream(dir / "two" / "report.json") << minimal_report("alpha", 0.8, 0.3).dump();
  json tr = minimal_report("transfer", 0, 0);
  tr["kind"] = "transfer";
  tr.erase("pre");
  tr.erase("post");
  tr.erase("ledger");
  tr["transfer"] = {{"sources", {"a", "b"}},
                    {"targets", {"a", "b"}},
                    {"post", {{"nmi", {{0.1, 0.5}, {0.6, nullptr}}}, {"ari", {{0, 0}, {0, 0}}}, {"acc", {{0, 0}, {0, 0}}}}}};
  fs::create_directories(dir / "three");
  std::ofstream(dir / "three" / "report.json") << tr.dump();
  rn::render_tables(dir);
  std::istringstream is(slurp(dir / "table1.csv"));
  std::string header, r1, r2;
  std::getline(is, header);
  std::getline(is, r1);
  std::getline(is, r2);
  EXPECT_EQ(r1.substr(0, 6), "alpha,");
  EXPECT_EQ(r2.substr(0, 5), "zeta,");
  EXPECT_EQ(slurp(dir / "transfer_nmi.csv"), "source\\target,a,b\na,0.1,0.5\nb,0.6,skipped\n");
  EXPECT_TRUE(fs::exists(dir / "query_complexity.csv"));
  fs::remove_all(dir);
}

TEST(Report, EmptyDirectoryIsAnError) {
  const auto dir = testkit::temp_dir("none");
  EXPECT_CODE(rn::render_tables(dir), cb::ErrorCode::missing_field);
  fs::remove_all(dir);
}

TEST(Histogram, CountsEveryValue) {
  const auto h = rn::histogram({0.0, 0.5, 1.0, 1.0}, 4);
  EXPECT_EQ(h.at("counts"), json({1, 0, 1, 2}));
  EXPECT_EQ(h.at("edges").size(), 5u);
}
