#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "rlcore/networks.hpp"

namespace rlcore {

// Shared binary container for checkpoints and policy exports:
//   magic (8 bytes) | u32 LE header_len | JSON header | float32 LE payload
// The header's "params" array ([{name, shape}, ...]) pins the payload layout;
// total file length must equal 12 + header_len + 4 * sum(param sizes).
inline constexpr char kCheckpointMagic[9] = "RLCKPT01";
inline constexpr char kExportMagic[9] = "RLPOL001";

struct Container {
  nlohmann::json header;
  std::vector<float> data;
};

void write_container(const std::string& path, const char* magic, const nlohmann::json& header,
                     std::span<const float> data);

Container read_container(const std::string& path, const char* magic);

// Header params list for a store, in canonical order.
nlohmann::json param_manifest(const ParamStore& store);

// Loads container data into the store; names and shapes must match the
// store's canonical order exactly.
void load_params(const Container& container, ParamStore& store);

}  // namespace rlcore
