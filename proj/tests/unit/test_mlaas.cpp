#include <algorithm>
#include <random>
#include <set>

#include "clusterbreak/mlaas.hpp"
#include "helpers.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a _res macro.
#include <httplib.h>
#include <json.hpp>

namespace cb = clusterbreak;
namespace ml = clusterbreak::mlaas;
using cb::Matrix;
using cb::Tensor;

namespace {

const cb::data::SampleShape kShape{1, 1, 2};

ml::GroupingBackend point_backend(double threshold = 0.3) {
  return ml::GroupingBackend([](const Tensor& t) { return t.as_matrix(); }, kShape, threshold);
}

Tensor point(double x, double y) { return Tensor({1, 1, 2}, std::vector<double>{x, y}); }

// Naive average linkage: recompute every group distance from scratch.
std::vector<int> naive_average_linkage(const Matrix& x, double threshold) {
  std::vector<std::vector<int>> groups;
  for (int i = 0; i < x.rows(); ++i) groups.push_back({i});
  for (;;) {
    double best = 1e300;
    std::size_t ba = 0, bb = 0;
    for (std::size_t a = 0; a < groups.size(); ++a)
      for (std::size_t b = a + 1; b < groups.size(); ++b) {
        double s = 0;
        for (int i : groups[a])
          for (int j : groups[b]) s += (x.row(i) - x.row(j)).norm();
        s /= static_cast<double>(groups[a].size() * groups[b].size());
        if (s < best) best = s, ba = a, bb = b;
      }
    if (groups.size() < 2 || best > threshold) break;
    groups[ba].insert(groups[ba].end(), groups[bb].begin(), groups[bb].end());
    groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(bb));
  }
  std::vector<int> label(static_cast<std::size_t>(x.rows()));
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (int i : groups[g]) label[static_cast<std::size_t>(i)] = static_cast<int>(g);
  return label;
}

bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j)
      if ((a[i] == a[j]) != (b[i] == b[j])) return false;
  return true;
}

}  // namespace

TEST(Agglomerative, MatchesNaiveAverageLinkage) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  for (int t = 0; t < 20; ++t) {
    Matrix x(25, 2);
    for (int i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    EXPECT_TRUE(same_partition(ml::agglomerative_average_linkage(x, 0.3), naive_average_linkage(x, 0.3)));
  }
}

TEST(Agglomerative, SeparatedIdentitiesGivePureGroups) {
  Matrix x(10, 2);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (int i = 0; i < 10; ++i) x.row(i) << (i < 5 ? 0.0 : 1.0) + u(rng), u(rng);
  // Oracle: within-identity distances are below the threshold, across above it.
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j) ASSERT_EQ((x.row(i) - x.row(j)).norm() <= 0.3, (i < 5) == (j < 5));
  const auto l = ml::agglomerative_average_linkage(x, 0.3);
  EXPECT_EQ(l, (std::vector<int>{0, 0, 0, 0, 0, 1, 1, 1, 1, 1}));
  EXPECT_EQ(ml::agglomerative_average_linkage(x.topRows(1), 0.3), std::vector<int>{0});
}

TEST(Album, ContractAndErrors) {
  ml::MockAlbumService svc(point_backend());
  const auto t1 = svc.create_album(), t2 = svc.create_album();
  EXPECT_NE(t1, t2);
  EXPECT_EQ(t1.size(), 24u);
  EXPECT_TRUE(std::all_of(t1.begin(), t1.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; }));

  EXPECT_CODE(svc.group_face(t1), cb::ErrorCode::empty_album);
  EXPECT_CODE(svc.add_image("nope", point(0, 0)), cb::ErrorCode::unknown_token);
  EXPECT_CODE(svc.get_album_detail("nope"), cb::ErrorCode::unknown_token);
  EXPECT_CODE(svc.add_image(t1, Tensor({1, 2, 2}, 0.5)), cb::ErrorCode::invalid_shape);
  EXPECT_CODE(svc.add_image(t1, point(0, 2)), cb::ErrorCode::invalid_parameter);

  std::set<std::int64_t> ids;
  for (int i = 0; i < 280; ++i) ids.insert(svc.add_image(t1, point(i % 2 ? 0.9 : 0.1, 0.5)));
  EXPECT_EQ(ids.size(), 280u);
  EXPECT_EQ(svc.image_count(t1), 280u);
  EXPECT_CODE(svc.get_album_detail(t1), cb::ErrorCode::not_grouped);

  svc.group_face(t1);
  const auto first = svc.get_album_detail(t1);
  std::set<std::int64_t> listed;
  for (const auto& e : first) listed.insert(e.image_id);
  EXPECT_EQ(listed, ids);  // every image appears exactly once
  EXPECT_EQ(first.size(), 280u);
  svc.group_face(t1);
  const auto second = svc.get_album_detail(t1);
  ASSERT_EQ(second.size(), first.size());
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_EQ(first[i].image_id, second[i].image_id);
    EXPECT_EQ(first[i].group_id, second[i].group_id);
  }
  std::set<int> groups;
  for (const auto& e : first) groups.insert(e.group_id);
  EXPECT_EQ(groups.size(), 2u);

  svc.add_image(t1, point(0.5, 0.5));
  EXPECT_CODE(svc.get_album_detail(t1), cb::ErrorCode::not_grouped);
  EXPECT_EQ(svc.image_count(t2), 0u);
}

TEST(Album, SameBackendSeedGivesSameGroupings) {
  const auto ds = testkit::small_dataset(20);
  auto backend = [&] {
    return ml::make_encoder_backend(
        cb::clustering::train_toy_clusterer(ds.images(), 4, testkit::quick_trainer(2)), 0.9);
  };
  ml::MockAlbumService a(backend()), b(backend());
  std::vector<int> ga, gb;
  for (auto* svc : {&a, &b}) {
    const auto token = svc->create_album();
    for (int i = 0; i < ds.n(); ++i) svc->add_image(token, ds.images().batch(std::vector<int>{i}).pixels);
    svc->group_face(token);
    auto& out = svc == &a ? ga : gb;
    for (const auto& e : svc->get_album_detail(token)) out.push_back(e.group_id);
  }
  EXPECT_EQ(ga, gb);
}
TEST(Album, PayloadLimit) {
  ml::ServiceOptions o;
  o.max_image_bytes = 4;
  ml::MockAlbumService svc(point_backend(), o);
  EXPECT_CODE(svc.add_image(svc.create_album(), point(0, 0)), cb::ErrorCode::payload_too_large);
}

TEST(Album, RateLimitAndRetry) {
  ml::ServiceOptions o;
  o.rate_limit_per_second = 0.5;
  ml::MockAlbumService svc(point_backend(), o);
  int limited = 0;
  for (int i = 0; i < 5; ++i) try {
      svc.create_album();
    } catch (const cb::Error& e) {
      EXPECT_EQ(e.code(), cb::ErrorCode::rate_limited);
      ++limited;
    }
  EXPECT_GE(limited, 3);

  int calls = 0;
  auto flaky = [&] {
    if (++calls == 1) cb::fail(cb::ErrorCode::service_error, "transient");
    return 7;
  };
  EXPECT_EQ(ml::with_retry(flaky), 7);
  EXPECT_EQ(calls, 2);
  calls = 0;
  auto broken = [&]() -> int { ++calls; cb::fail(cb::ErrorCode::rate_limited, "busy"); };
  EXPECT_CODE(ml::with_retry(broken), cb::ErrorCode::rate_limited);
  EXPECT_EQ(calls, 2);
  calls = 0;
  auto fatal = [&]() -> int { ++calls; cb::fail(cb::ErrorCode::unknown_token, "gone"); };
  EXPECT_CODE(ml::with_retry(fatal), cb::ErrorCode::unknown_token);
  EXPECT_EQ(calls, 1);
}

TEST(Album, PersistsAcrossRestartsWithFileStorage) {
  const auto dir = testkit::temp_dir("album");
  ml::ServiceOptions o;
  o.storage_path = dir / "albums.db";
  std::string token;
  {
    ml::MockAlbumService svc(point_backend(), o);
    token = svc.create_album();
    svc.add_image(token, point(0.1, 0.1));
    svc.add_image(token, point(0.2, 0.1));
  }
  ml::MockAlbumService again(point_backend(), o);
  EXPECT_EQ(again.image_count(token), 2u);
  again.group_face(token);
  EXPECT_EQ(again.get_album_detail(token).size(), 2u);
  std::filesystem::remove_all(dir);
}

TEST(KvStore, OperationsAndRollback) {
  ml::KvStore kv;
  kv.put("a/1", "x");
  kv.put("a/2", std::string("y\0z", 3));
  kv.put("b/1", "w");
  EXPECT_EQ(kv.get("a/2")->size(), 3u);
  EXPECT_EQ(kv.scan_prefix("a/").size(), 2u);
  kv.erase("a/1");
  EXPECT_FALSE(kv.get("a/1").has_value());
  EXPECT_ANY_THROW(kv.transaction([&] {
    kv.put("c", "1");
    throw std::runtime_error("abort");
  }));
  EXPECT_FALSE(kv.get("c").has_value());
}

TEST(Codec, ImageRoundTripAtFloatPrecision) {
  Tensor img({1, 3, 3}, std::vector<double>{0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 1});
  const auto back = ml::decode_image(ml::encode_image(img), {1, 3, 3});
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 1e-7);
  EXPECT_ANY_THROW(ml::decode_image(ml::encode_image(img), {1, 2, 2}));
}

TEST(Http, EndToEndThroughClientAndRawRequests) {
  ml::MockAlbumService svc(point_backend());
  ml::AlbumHttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  ml::HttpAlbumClient client("127.0.0.1", port);

  const auto token = client.create_album();
  for (int i = 0; i < 6; ++i) client.add_image(token, point(i < 3 ? 0.1 : 0.8, 0.5));
  EXPECT_CODE(client.get_album_detail(token), cb::ErrorCode::not_grouped);
  client.group_face(token);
  const auto detail = client.get_album_detail(token);
  ASSERT_EQ(detail.size(), 6u);
  EXPECT_EQ(detail[0].group_id, detail[2].group_id);
  EXPECT_NE(detail[0].group_id, detail[5].group_id);
  EXPECT_CODE(client.add_image("missing", point(0, 0)), cb::ErrorCode::unknown_token);

  httplib::Client raw("127.0.0.1", port);
  auto res = raw.Get("/getAlbumDetail?token=missing");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  const auto env = nlohmann::json::parse(res->body);
  EXPECT_EQ(env.at("code"), "unknown-token");
  EXPECT_TRUE(env.contains("message"));
  res = raw.Get("/getAlbumDetail?token=" + token);
  ASSERT_TRUE(res);
  for (const auto& f : nlohmann::json::parse(res->body).at("faces")) {
    EXPECT_EQ(f.size(), 2u);  // label-only: image id and group id, nothing else
    EXPECT_TRUE(f.contains("image_id") && f.contains("group_id"));
  }
  res = raw.Post("/addimage", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  server.stop();
}

TEST(Http, StatusMapping) {
  EXPECT_EQ(ml::http_status(cb::ErrorCode::unknown_token), 404);
  EXPECT_EQ(ml::http_status(cb::ErrorCode::payload_too_large), 413);
  EXPECT_EQ(ml::http_status(cb::ErrorCode::rate_limited), 429);
  EXPECT_EQ(ml::http_status(cb::ErrorCode::not_grouped), 409);
}
