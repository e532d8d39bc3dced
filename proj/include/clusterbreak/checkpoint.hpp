#pragma once

// Binary checkpoint container shared by every persisted model.
//
// Layout: 8-byte magic "CBCKPT01", u32 schema version, u64 metadata length,
// UTF-8 JSON metadata (kind, architecture, config, tensor shapes), then the
// tensors as consecutive little-endian float64 blocks.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "clusterbreak/nn.hpp"
#include "clusterbreak/tensor.hpp"

namespace clusterbreak::io {

inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;

struct Checkpoint {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Tensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path, std::string_view expected_kind);

nlohmann::json specs_to_json(const std::vector<nn::LayerSpec>& specs);
std::vector<nn::LayerSpec> specs_from_json(const nlohmann::json& j);

/// Appends copies of every parameter of `net` to `out`.
void append_parameters(const nn::Sequential& net, std::vector<Tensor>& out);

/// Copies tensors starting at `cursor` into the parameters of `net`, checking
/// shapes, and advances the cursor.
void load_parameters(nn::Sequential& net, std::span<const Tensor> tensors, std::size_t& cursor);

/// Hex SHA-256 of a file's bytes.
std::string file_sha256(const std::filesystem::path& path);

}  // namespace clusterbreak::io
