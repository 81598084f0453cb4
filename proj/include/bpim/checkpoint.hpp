#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bpim/nn.hpp"

namespace bpim::checkpoint {

/// On-disk layout (little-endian):
///   "BPIMCKPT" | u32 version | u64 n | n bytes of JSON metadata
///   | u64 count | count x ( u32 name_len | name | u32 rank | rank x i64 dims | numel x f64 )
/// Tensors are the module's parameters followed by its buffers, in
/// registration order.
inline constexpr std::uint32_t kVersion = 1;

struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

void save(const std::filesystem::path& path, const nlohmann::json& meta, const nn::Module& m);
Checkpoint read(const std::filesystem::path& path);
/// Loads every parameter and buffer of `m` by name; throws on a missing name
/// or a shape mismatch.
void load_into(const Checkpoint& ckpt, nn::Module& m);

}  // namespace bpim::checkpoint
