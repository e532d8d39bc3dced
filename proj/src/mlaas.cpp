#include "clusterbreak/mlaas.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <limits>

#include <httplib.h>
#include <json.hpp>
#include <sodium.h>
#include <sqlite3.h>

#include "clusterbreak/error.hpp"

namespace clusterbreak::mlaas {

namespace {

using nlohmann::json;

void ensure_sodium() {
  static const int status = sodium_init();
  require(status >= 0, ErrorCode::service_error, "libsodium initialisation failed");
}

std::string album_key(const std::string& token) { return "album/" + token; }

std::string image_prefix(const std::string& token) { return "img/" + token + "/"; }

std::string image_key(const std::string& token, std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%012lld", static_cast<long long>(id));
  return image_prefix(token) + buf;
}

}  // namespace

// ---------------------------------------------------------------- storage

KvStore::KvStore(const std::filesystem::path& path) {
  const std::string name = path.empty() ? ":memory:" : path.string();
  if (sqlite3_open(name.c_str(), &db_) != SQLITE_OK) {
    const std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
    sqlite3_close(db_);
    db_ = nullptr;
    fail(ErrorCode::io_error, "cannot open album store " + name + ": " + msg);
  }
  sqlite3_busy_timeout(db_, 5000);
  exec("CREATE TABLE IF NOT EXISTS kv (key TEXT PRIMARY KEY, value BLOB NOT NULL)");
}

KvStore::~KvStore() { sqlite3_close(db_); }

void KvStore::exec(const char* sql) {
  char* err = nullptr;
  if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
    const std::string msg = err ? err : "unknown error";
    sqlite3_free(err);
    fail(ErrorCode::io_error, "album store: " + msg);
  }
}

namespace {

struct Statement {
  Statement(sqlite3* db, const char* sql) {
    if (sqlite3_prepare_v2(db, sql, -1, &stmt, nullptr) != SQLITE_OK)
      fail(ErrorCode::io_error, std::string("album store: ") + sqlite3_errmsg(db));
  }
  ~Statement() { sqlite3_finalize(stmt); }
  void bind_text(int i, std::string_view v) {
    sqlite3_bind_text(stmt, i, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT);
  }
  void bind_blob(int i, std::string_view v) {
    sqlite3_bind_blob(stmt, i, v.data(), static_cast<int>(v.size()), SQLITE_TRANSIENT);
  }
  std::string column(int i) const {
    const auto* p = static_cast<const char*>(sqlite3_column_blob(stmt, i));
    return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt, i))) : std::string();
  }
  sqlite3_stmt* stmt = nullptr;
};

}  // namespace

void KvStore::put(std::string_view key, std::string_view value) {
  std::lock_guard lock(mutex_);
  Statement st(db_, "INSERT OR REPLACE INTO kv (key, value) VALUES (?1, ?2)");
  st.bind_text(1, key);
  st.bind_blob(2, value);
  if (sqlite3_step(st.stmt) != SQLITE_DONE) fail(ErrorCode::io_error, std::string("album store: ") + sqlite3_errmsg(db_));
}

std::optional<std::string> KvStore::get(std::string_view key) const {
  std::lock_guard lock(mutex_);
  Statement st(db_, "SELECT value FROM kv WHERE key = ?1");
  st.bind_text(1, key);
  const int rc = sqlite3_step(st.stmt);
  if (rc == SQLITE_ROW) return st.column(0);
  if (rc != SQLITE_DONE) fail(ErrorCode::io_error, std::string("album store: ") + sqlite3_errmsg(db_));
  return std::nullopt;
}

void KvStore::erase(std::string_view key) {
  std::lock_guard lock(mutex_);
  Statement st(db_, "DELETE FROM kv WHERE key = ?1");
  st.bind_text(1, key);
  if (sqlite3_step(st.stmt) != SQLITE_DONE) fail(ErrorCode::io_error, std::string("album store: ") + sqlite3_errmsg(db_));
}

std::vector<std::pair<std::string, std::string>> KvStore::scan_prefix(std::string_view prefix) const {
  std::lock_guard lock(mutex_);
  Statement st(db_, "SELECT key, value FROM kv WHERE key >= ?1 ORDER BY key");
  st.bind_text(1, prefix);
  std::vector<std::pair<std::string, std::string>> out;
  int rc;
  while ((rc = sqlite3_step(st.stmt)) == SQLITE_ROW) {
    std::string key = st.column(0);
    if (key.compare(0, prefix.size(), prefix) != 0) break;
    out.emplace_back(std::move(key), st.column(1));
  }
  if (rc != SQLITE_ROW && rc != SQLITE_DONE) fail(ErrorCode::io_error, std::string("album store: ") + sqlite3_errmsg(db_));
  return out;
}

// ---------------------------------------------------------------- backend

std::vector<int> agglomerative_average_linkage(const Matrix& features, double threshold) {
  const auto n = static_cast<int>(features.rows());
  require(n >= 1, ErrorCode::empty_album, "nothing to group");
  require(threshold >= 0.0, ErrorCode::invalid_parameter, "threshold must be >= 0");
  Matrix d(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) d(i, j) = (features.row(i) - features.row(j)).norm();

  std::vector<int> owner(static_cast<std::size_t>(n));
  std::vector<int> size(static_cast<std::size_t>(n), 1);
  std::vector<char> active(static_cast<std::size_t>(n), 1);
  for (int i = 0; i < n; ++i) owner[static_cast<std::size_t>(i)] = i;
  for (int remaining = n; remaining > 1; --remaining) {
    double best = std::numeric_limits<double>::infinity();
    int bi = -1, bj = -1;
    for (int i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (int j = i + 1; j < n; ++j)
        if (active[j] && d(i, j) < best) {
          best = d(i, j);
          bi = i;
          bj = j;
        }
    }
    if (best > threshold) break;
    for (int k = 0; k < n; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      const double merged = (size[bi] * d(bi, k) + size[bj] * d(bj, k)) / (size[bi] + size[bj]);
      d(bi, k) = d(k, bi) = merged;
    }
    size[bi] += size[bj];
    active[bj] = 0;
    for (int& o : owner)
      if (o == bj) o = bi;
  }
  std::vector<int> relabel(static_cast<std::size_t>(n), -1);
  std::vector<int> labels(static_cast<std::size_t>(n));
  int next = 0;
  for (int i = 0; i < n; ++i) {
    int& r = relabel[static_cast<std::size_t>(owner[static_cast<std::size_t>(i)])];
    if (r < 0) r = next++;
    labels[static_cast<std::size_t>(i)] = r;
  }
  return labels;
}

GroupingBackend::GroupingBackend(clustering::FeatureExtractor extractor, data::SampleShape shape, double threshold)
    : extractor_(std::move(extractor)), shape_(shape), threshold_(threshold) {
  require(threshold >= 0.0, ErrorCode::invalid_parameter, "grouping threshold must be >= 0");
}

std::vector<int> GroupingBackend::group(const Tensor& pixels) const {
  require(data::sample_shape_of(pixels) == shape_, ErrorCode::shape_mismatch, "album images do not fit the backend");
  return agglomerative_average_linkage(extractor_(pixels), threshold_);
}

GroupingBackend make_encoder_backend(std::shared_ptr<const clustering::ToyDeepClusterer> model, double threshold) {
  require(model != nullptr, ErrorCode::invalid_parameter, "null backend model");
  const auto shape = model->input_shape();
  return GroupingBackend([model](const Tensor& pixels) { return model->embed(pixels); }, shape, threshold);
}

// ---------------------------------------------------------------- helpers

TokenBucket::TokenBucket(double rate_per_second)
    : rate_(rate_per_second),
      capacity_(std::max(1.0, rate_per_second)),
      tokens_(capacity_),
      last_(std::chrono::steady_clock::now()) {}

bool TokenBucket::try_acquire() {
  if (rate_ <= 0.0) return true;
  std::lock_guard lock(mutex_);
  const auto now = std::chrono::steady_clock::now();
  tokens_ = std::min(capacity_, tokens_ + rate_ * std::chrono::duration<double>(now - last_).count());
  last_ = now;
  if (tokens_ < 1.0) return false;
  tokens_ -= 1.0;
  return true;
}

std::string make_token() {
  ensure_sodium();
  unsigned char raw[18];
  randombytes_buf(raw, sizeof(raw));
  constexpr int variant = sodium_base64_VARIANT_URLSAFE_NO_PADDING;
  std::string out(sodium_base64_ENCODED_LEN(sizeof(raw), variant), '\0');
  sodium_bin2base64(out.data(), out.size(), raw, sizeof(raw), variant);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::string encode_image(const Tensor& image) {
  static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");
  ensure_sodium();
  std::vector<float> values(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) values[i] = static_cast<float>(image[i]);
  const std::size_t bytes = values.size() * sizeof(float);
  constexpr int variant = sodium_base64_VARIANT_ORIGINAL;
  std::string out(sodium_base64_ENCODED_LEN(bytes, variant), '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(values.data()), bytes, variant);
  out.resize(std::strlen(out.c_str()));
  return out;
}

Tensor decode_image(std::string_view base64, const Shape& sample_shape) {
  ensure_sodium();
  const std::size_t expected = shape_size(sample_shape);
  std::vector<float> values(base64.size() * 3 / 4 / sizeof(float) + 1);
  std::size_t bytes = 0;
  if (sodium_base642bin(reinterpret_cast<unsigned char*>(values.data()), values.size() * sizeof(float),
                        base64.data(), base64.size(), nullptr, &bytes, nullptr, sodium_base64_VARIANT_ORIGINAL) != 0)
    fail(ErrorCode::invalid_parameter, "image is not valid base64");
  require(bytes == expected * sizeof(float), ErrorCode::invalid_shape,
          "image payload does not match the declared shape " + shape_string(sample_shape));
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) out[i] = values[i];
  return Tensor(sample_shape, std::move(out));
}

// ---------------------------------------------------------------- service

MockAlbumService::MockAlbumService(GroupingBackend backend, ServiceOptions options)
    : backend_(std::move(backend)),
      options_(std::move(options)),
      store_(options_.storage_path),
      limiter_(options_.rate_limit_per_second) {}

void MockAlbumService::admit() {
  require(limiter_.try_acquire(), ErrorCode::rate_limited, "request rate limit exceeded");
}

std::shared_ptr<std::mutex> MockAlbumService::album_mutex(const std::string& token) {
  std::lock_guard lock(registry_mutex_);
  auto& m = album_mutexes_[token];
  if (!m) m = std::make_shared<std::mutex>();
  return m;
}

namespace {

json load_meta(const KvStore& store, const std::string& token) {
  const auto raw = store.get(album_key(token));
  require(raw.has_value(), ErrorCode::unknown_token, "unknown album token");
  return json::parse(*raw);
}

}  // namespace

std::string MockAlbumService::create_album() {
  admit();
  const std::string token = make_token();
  store_.put(album_key(token), json{{"next_id", 0}, {"grouped", false}, {"groups", json::array()}}.dump());
  return token;
}

std::int64_t MockAlbumService::add_image(const std::string& token, const Tensor& image) {
  admit();
  const auto shape = backend_.input_shape();
  require(image.size() * sizeof(float) <= options_.max_image_bytes, ErrorCode::payload_too_large,
          "image exceeds " + std::to_string(options_.max_image_bytes) + " bytes");
  const Shape expected{shape.channels, shape.height, shape.width};
  Shape got = image.shape();
  if (got.size() == 4 && got[0] == 1) got.erase(got.begin());
  require(got == expected, ErrorCode::invalid_shape,
          "image shape " + shape_string(image.shape()) + " differs from " + shape_string(expected));
  data::check_pixel_range(image);

  const auto lock_ptr = album_mutex(token);
  std::lock_guard lock(*lock_ptr);
  json meta = load_meta(store_, token);
  const std::int64_t id = meta.at("next_id").get<std::int64_t>();
  meta["next_id"] = id + 1;
  // New images invalidate the previous grouping until group_face runs again.
  meta["grouped"] = false;
  meta["groups"] = json::array();
  const std::string blob(reinterpret_cast<const char*>(image.data()), image.size() * sizeof(double));
  store_.transaction([&] {
    store_.put(image_key(token, id), blob);
    store_.put(album_key(token), meta.dump());
  });
  return id;
}

void MockAlbumService::group_face(const std::string& token) {
  admit();
  const auto lock_ptr = album_mutex(token);
  std::lock_guard lock(*lock_ptr);
  json meta = load_meta(store_, token);
  const auto rows = store_.scan_prefix(image_prefix(token));
  require(!rows.empty(), ErrorCode::empty_album, "album has no images");
  const auto shape = backend_.input_shape();
  Tensor pixels(shape.batch_shape(static_cast<int>(rows.size())));
  std::vector<std::int64_t> ids;
  const std::size_t s = shape.size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].second.size() == s * sizeof(double), ErrorCode::io_error, "corrupt stored image");
    std::memcpy(pixels.data() + i * s, rows[i].second.data(), rows[i].second.size());
    ids.push_back(std::stoll(rows[i].first.substr(image_prefix(token).size())));
  }
  const auto labels = backend_.group(pixels);
  json groups = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) groups.push_back({ids[i], labels[i]});
  meta["grouped"] = true;
  meta["groups"] = std::move(groups);
  store_.transaction([&] { store_.put(album_key(token), meta.dump()); });
}

std::vector<AlbumEntry> MockAlbumService::get_album_detail(const std::string& token) {
  admit();
  const auto lock_ptr = album_mutex(token);
  std::lock_guard lock(*lock_ptr);
  const json meta = load_meta(store_, token);
  require(meta.at("grouped").get<bool>(), ErrorCode::not_grouped, "groupFace has not run since the last change");
  std::vector<AlbumEntry> out;
  for (const auto& g : meta.at("groups")) out.push_back({g.at(0).get<std::int64_t>(), g.at(1).get<int>()});
  return out;
}

std::size_t MockAlbumService::image_count(const std::string& token) {
  const auto lock_ptr = album_mutex(token);
  std::lock_guard lock(*lock_ptr);
  load_meta(store_, token);
  return store_.scan_prefix(image_prefix(token)).size();
}

// ---------------------------------------------------------------- HTTP

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::unknown_token: return 404;
    case ErrorCode::payload_too_large: return 413;
    case ErrorCode::empty_album:
    case ErrorCode::not_grouped: return 409;
    case ErrorCode::rate_limited: return 429;
    case ErrorCode::invalid_parameter:
    case ErrorCode::invalid_shape:
    case ErrorCode::shape_mismatch:
    case ErrorCode::missing_field:
    case ErrorCode::config_validation: return 400;
    default: return 500;
  }
}

namespace {

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  res.status = status;
  res.set_content(json{{"code", code}, {"message", message}}.dump(), "application/json");
}

template <class F>
void guarded(httplib::Response& res, F&& body) {
  try {
    res.status = 200;
    res.set_content(body().dump(), "application/json");
  } catch (const Error& e) {
    send_error(res, http_status(e.code()), to_string(e.code()), e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, to_string(ErrorCode::invalid_parameter), std::string("malformed request: ") + e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, to_string(ErrorCode::service_error), e.what());
  }
}

std::string body_token(const json& body) {
  require(body.contains("token") && body.at("token").is_string(), ErrorCode::missing_field, "missing field: token");
  return body.at("token").get<std::string>();
}

}  // namespace

AlbumHttpServer::AlbumHttpServer(MockAlbumService& service)
    : service_(service), server_(std::make_unique<httplib::Server>()) {
  auto& svc = service_;
  server_->set_payload_max_length(svc.options().max_image_bytes * 2 + (64u << 10));
  server_->Post("/createAlbum", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return json{{"token", svc.create_album()}}; });
  });
  server_->Post("/addimage", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = json::parse(req.body);
      const std::string token = body_token(body);
      require(body.contains("image") && body.contains("shape"), ErrorCode::missing_field,
              "missing field: image or shape");
      const auto shape = body.at("shape").get<Shape>();
      require(shape.size() == 3 && shape_size(shape) > 0, ErrorCode::invalid_shape, "shape must be [c, h, w]");
      require(shape_size(shape) * sizeof(float) <= svc.options().max_image_bytes, ErrorCode::payload_too_large,
              "declared image exceeds the payload limit");
      const Tensor image = decode_image(body.at("image").get<std::string>(), shape);
      return json{{"token", token}, {"image_id", svc.add_image(token, image)}};
    });
  });
  server_->Post("/groupFace", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string token = body_token(json::parse(req.body));
      svc.group_face(token);
      return json{{"token", token}, {"status", "grouped"}};
    });
  });
  server_->Get("/getAlbumDetail", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      require(req.has_param("token"), ErrorCode::missing_field, "missing query parameter: token");
      const std::string token = req.get_param_value("token");
      json faces = json::array();
      for (const auto& e : svc.get_album_detail(token))
        faces.push_back({{"image_id", e.image_id}, {"group_id", e.group_id}});
      return json{{"token", token}, {"faces", faces}};
    });
  });
}

AlbumHttpServer::~AlbumHttpServer() { stop(); }

int AlbumHttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    bound = -1;
  }
  require(bound > 0, ErrorCode::service_error, "cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void AlbumHttpServer::listen(const std::string& host, int port) {
  require(server_->listen(host, port), ErrorCode::service_error, "cannot listen on " + host + ":" + std::to_string(port));
}

void AlbumHttpServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

HttpAlbumClient::HttpAlbumClient(std::string host, int port) : host_(std::move(host)), port_(port) {}

namespace {

json check_response(const httplib::Result& res) {
  if (!res) fail(ErrorCode::service_error, "service unreachable: " + httplib::to_string(res.error()));
  if (res->status == 200) return json::parse(res->body);
  ErrorCode code = ErrorCode::service_error;
  std::string message = "HTTP " + std::to_string(res->status);
  const json body = json::parse(res->body, nullptr, false);
  if (!body.is_discarded() && body.is_object() && body.contains("code")) {
    if (auto parsed = error_code_from_string(body.at("code").get<std::string>())) code = *parsed;
    message = body.value("message", message);
  } else if (res->status == 404) {
    code = ErrorCode::unknown_token;
  } else if (res->status == 413) {
    code = ErrorCode::payload_too_large;
  } else if (res->status == 429) {
    code = ErrorCode::rate_limited;
  }
  fail(code, message);
}

}  // namespace

std::string HttpAlbumClient::create_album() {
  httplib::Client cli(host_, port_);
  return check_response(cli.Post("/createAlbum", "{}", "application/json")).at("token").get<std::string>();
}

std::int64_t HttpAlbumClient::add_image(const std::string& token, const Tensor& image) {
  Shape shape = image.shape();
  if (shape.size() == 4 && shape[0] == 1) shape.erase(shape.begin());
  const json body{{"token", token}, {"shape", shape}, {"image", encode_image(image)}};
  httplib::Client cli(host_, port_);
  return check_response(cli.Post("/addimage", body.dump(), "application/json")).at("image_id").get<std::int64_t>();
}

void HttpAlbumClient::group_face(const std::string& token) {
  httplib::Client cli(host_, port_);
  check_response(cli.Post("/groupFace", json{{"token", token}}.dump(), "application/json"));
}

std::vector<AlbumEntry> HttpAlbumClient::get_album_detail(const std::string& token) {
  httplib::Client cli(host_, port_);
  const json body = check_response(cli.Get("/getAlbumDetail", httplib::Params{{"token", token}}, httplib::Headers{}));
  std::vector<AlbumEntry> out;
  for (const auto& f : body.at("faces")) out.push_back({f.at("image_id").get<std::int64_t>(), f.at("group_id").get<int>()});
  return out;
}

}  // namespace clusterbreak::mlaas
