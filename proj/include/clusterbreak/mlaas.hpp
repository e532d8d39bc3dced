#pragma once

// Mock album-clustering service with a Face++-style contract. Callers only
// ever see integer group ids; soft memberships never leave the backend.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "clusterbreak/clustering.hpp"
#include "clusterbreak/data.hpp"
#include "clusterbreak/error.hpp"
#include "clusterbreak/tensor.hpp"

struct sqlite3;

namespace httplib {
class Server;
}

namespace clusterbreak::mlaas {

// ---------------------------------------------------------------- storage

/// Embedded key-value store on SQLite. An empty path keeps everything in memory.
class KvStore {
 public:
  explicit KvStore(const std::filesystem::path& path = {});
  ~KvStore();
  KvStore(const KvStore&) = delete;
  KvStore& operator=(const KvStore&) = delete;

  void put(std::string_view key, std::string_view value);
  std::optional<std::string> get(std::string_view key) const;
  void erase(std::string_view key);
  /// All entries whose key starts with `prefix`, in key order.
  std::vector<std::pair<std::string, std::string>> scan_prefix(std::string_view prefix) const;

  /// Runs `body` inside one SQLite transaction; rolls back if it throws.
  template <class F>
  void transaction(F&& body) {
    std::lock_guard lock(mutex_);
    exec("BEGIN IMMEDIATE");
    try {
      body();
      exec("COMMIT");
    } catch (...) {
      exec("ROLLBACK");
      throw;
    }
  }

 private:
  void exec(const char* sql);

  sqlite3* db_ = nullptr;
  mutable std::recursive_mutex mutex_;
};

// ---------------------------------------------------------------- backend

/// Average-linkage agglomerative clustering: merge the closest pair of
/// groups while their mean pairwise distance is <= threshold. Labels are
/// consecutive from 0 in order of first appearance.
std::vector<int> agglomerative_average_linkage(const Matrix& features, double threshold);

class GroupingBackend {
 public:
  GroupingBackend(clustering::FeatureExtractor extractor, data::SampleShape shape, double threshold);

  std::vector<int> group(const Tensor& pixels) const;
  data::SampleShape input_shape() const { return shape_; }
  double threshold() const { return threshold_; }

 private:
  clustering::FeatureExtractor extractor_;
  data::SampleShape shape_;
  double threshold_;
};

/// Backend on the unit-norm embeddings of a trained toy clusterer.
GroupingBackend make_encoder_backend(std::shared_ptr<const clustering::ToyDeepClusterer> model, double threshold);

// ---------------------------------------------------------------- API

struct AlbumEntry {
  std::int64_t image_id = 0;
  int group_id = 0;
};

/// The label-only contract shared by the in-process mock and the HTTP client.
class AlbumApi {
 public:
  virtual ~AlbumApi() = default;
  virtual std::string create_album() = 0;
  /// `image` is (c, h, w) or (1, c, h, w) with values in [0, 1].
  virtual std::int64_t add_image(const std::string& token, const Tensor& image) = 0;
  virtual void group_face(const std::string& token) = 0;
  virtual std::vector<AlbumEntry> get_album_detail(const std::string& token) = 0;
};

/// Retries once on service-error or rate-limited, then rethrows.
template <class F>
auto with_retry(F&& call) -> decltype(call()) {
  try {
    return call();
  } catch (const Error& e) {
    if (e.code() != ErrorCode::service_error && e.code() != ErrorCode::rate_limited) throw;
  }
  return call();
}

class TokenBucket {
 public:
  /// rate <= 0 disables limiting.
  explicit TokenBucket(double rate_per_second);
  bool try_acquire();

 private:
  double rate_;
  double capacity_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
  std::mutex mutex_;
};

struct ServiceOptions {
  /// Largest accepted image, in bytes of float32 pixel data.
  std::size_t max_image_bytes = 4u << 20;
  double rate_limit_per_second = 0.0;
  /// Empty keeps albums in memory only.
  std::filesystem::path storage_path;
};

class MockAlbumService final : public AlbumApi {
 public:
  MockAlbumService(GroupingBackend backend, ServiceOptions options = {});

  std::string create_album() override;
  std::int64_t add_image(const std::string& token, const Tensor& image) override;
  void group_face(const std::string& token) override;
  std::vector<AlbumEntry> get_album_detail(const std::string& token) override;

  std::size_t image_count(const std::string& token);
  data::SampleShape input_shape() const { return backend_.input_shape(); }
  const ServiceOptions& options() const { return options_; }

 private:
  std::shared_ptr<std::mutex> album_mutex(const std::string& token);
  void admit();

  GroupingBackend backend_;
  ServiceOptions options_;
  KvStore store_;
  TokenBucket limiter_;
  std::mutex registry_mutex_;
  std::unordered_map<std::string, std::shared_ptr<std::mutex>> album_mutexes_;
};

/// URL-safe random token (24 characters).
std::string make_token();

/// float32 little-endian pixels, base64 (standard alphabet, padded).
std::string encode_image(const Tensor& image);
Tensor decode_image(std::string_view base64, const Shape& sample_shape);

// ---------------------------------------------------------------- HTTP

/// POST /createAlbum, POST /addimage, POST /groupFace, GET /getAlbumDetail?token=...
/// Errors use the envelope {"code": "...", "message": "..."}.
class AlbumHttpServer {
 public:
  explicit AlbumHttpServer(MockAlbumService& service);
  ~AlbumHttpServer();

  /// Binds and serves on a background thread; port 0 picks a free port.
  int start(const std::string& host, int port);
  /// Blocks serving on the calling thread.
  void listen(const std::string& host, int port);
  void stop();

 private:
  MockAlbumService& service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

int http_status(ErrorCode code);

class HttpAlbumClient final : public AlbumApi {
 public:
  HttpAlbumClient(std::string host, int port);

  std::string create_album() override;
  std::int64_t add_image(const std::string& token, const Tensor& image) override;
  void group_face(const std::string& token) override;
  std::vector<AlbumEntry> get_album_detail(const std::string& token) override;

 private:
  std::string host_;
  int port_;
};

}  // namespace clusterbreak::mlaas
