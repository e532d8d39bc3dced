#include "clusterbreak/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iterator>

#include <sodium.h>

#include "clusterbreak/error.hpp"

namespace clusterbreak::io {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'B', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail(ErrorCode::io_error, "truncated checkpoint");
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json meta = checkpoint.meta;
  meta["kind"] = checkpoint.kind;
  nlohmann::json shapes = nlohmann::json::array();
  for (const Tensor& t : checkpoint.tensors) shapes.push_back(t.shape());
  meta["tensor_shapes"] = shapes;
  const std::string text = meta.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::io_error, "cannot open " + path.string() + " for writing");
  os.write(kMagic.data(), kMagic.size());
  write_pod(os, kCheckpointSchemaVersion);
  write_pod(os, static_cast<std::uint64_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Tensor& t : checkpoint.tensors)
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!os) fail(ErrorCode::io_error, "failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path, std::string_view expected_kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::io_error, "cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) fail(ErrorCode::io_error, path.string() + " is not a checkpoint");
  const auto version = read_pod<std::uint32_t>(is);
  require(version == kCheckpointSchemaVersion, ErrorCode::schema_mismatch,
          "checkpoint schema version " + std::to_string(version) + " is not supported");
  const auto len = read_pod<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) fail(ErrorCode::io_error, "truncated checkpoint metadata");

  Checkpoint ck;
  ck.meta = nlohmann::json::parse(text);
  ck.kind = ck.meta.at("kind").get<std::string>();
  require(ck.kind == expected_kind, ErrorCode::schema_mismatch,
          "expected a '" + std::string(expected_kind) + "' checkpoint, found '" + ck.kind + "'");
  for (const auto& s : ck.meta.at("tensor_shapes")) {
    Tensor t(s.get<Shape>());
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) fail(ErrorCode::io_error, "truncated checkpoint tensors");
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

nlohmann::json specs_to_json(const std::vector<nn::LayerSpec>& specs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : specs) arr.push_back({{"kind", s.kind}, {"args", s.args}});
  return arr;
}

std::vector<nn::LayerSpec> specs_from_json(const nlohmann::json& j) {
  std::vector<nn::LayerSpec> out;
  for (const auto& e : j) out.push_back({e.at("kind").get<std::string>(), e.at("args").get<std::vector<double>>()});
  return out;
}

void append_parameters(const nn::Sequential& net, std::vector<Tensor>& out) {
  for (const Tensor* p : net.parameters()) out.push_back(*p);
}

void load_parameters(nn::Sequential& net, std::span<const Tensor> tensors, std::size_t& cursor) {
  for (Tensor* p : net.parameters()) {
    require(cursor < tensors.size(), ErrorCode::schema_mismatch, "checkpoint has too few tensors");
    require(tensors[cursor].shape() == p->shape(), ErrorCode::schema_mismatch,
            "checkpoint tensor shape " + shape_string(tensors[cursor].shape()) + " does not match " +
                shape_string(p->shape()));
    *p = tensors[cursor++];
  }
}

std::string file_sha256(const std::filesystem::path& path) {
  if (sodium_init() < 0) fail(ErrorCode::io_error, "libsodium initialisation failed");
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::io_error, "cannot open " + path.string());
  crypto_hash_sha256_state state;
  crypto_hash_sha256_init(&state);
  std::array<char, 1 << 14> buf{};
  while (is) {
    is.read(buf.data(), buf.size());
    const auto got = is.gcount();
    if (got > 0)
      crypto_hash_sha256_update(&state, reinterpret_cast<const unsigned char*>(buf.data()),
                                static_cast<unsigned long long>(got));
  }
  std::array<unsigned char, crypto_hash_sha256_BYTES> digest{};
  crypto_hash_sha256_final(&state, digest.data());
  std::array<char, crypto_hash_sha256_BYTES * 2 + 1> hex{};
  sodium_bin2hex(hex.data(), hex.size(), digest.data(), digest.size());
  return std::string(hex.data());
}

}  // namespace clusterbreak::io
