#include "rlcore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace rlcore {

namespace {

void put_u32_le(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32_le(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

nlohmann::json param_manifest(const ParamStore& store) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : store.entries()) {
    params.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  return params;
}

void write_container(const std::string& path, const char* magic, const nlohmann::json& header,
                     std::span<const float> data) {
  const std::string header_str = header.dump();
  std::vector<uint8_t> bytes;
  bytes.reserve(12 + header_str.size() + data.size() * 4);
  bytes.insert(bytes.end(), magic, magic + 8);
  put_u32_le(bytes, static_cast<uint32_t>(header_str.size()));
  bytes.insert(bytes.end(), header_str.begin(), header_str.end());
  for (float f : data) put_u32_le(bytes, std::bit_cast<uint32_t>(f));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open \"" + path + "\" for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to \"" + path + "\"");
}

Container read_container(const std::string& path, const char* magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open \"" + path + "\"");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw FormatError("\"" + path + "\" is too short");
  if (std::memcmp(bytes.data(), magic, 8) != 0) {
    throw FormatError("\"" + path + "\" has the wrong magic");
  }
  const uint32_t header_len = get_u32_le(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<size_t>(header_len)) {
    throw FormatError("\"" + path + "\": truncated header");
  }
  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("\"" + path + "\": bad header JSON: " + e.what());
  }

  int64_t total = 0;
  for (const auto& p : c.header.at("params")) {
    int64_t n = 1;
    for (int64_t d : p.at("shape").get<std::vector<int64_t>>()) n *= d;
    total += n;
  }
  const size_t expected = 12 + header_len + static_cast<size_t>(total) * 4;
  if (bytes.size() != expected) {
    throw FormatError("\"" + path + "\": length mismatch (got " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(expected) + ")");
  }
  c.data.resize(total);
  const uint8_t* payload = bytes.data() + 12 + header_len;
  for (int64_t i = 0; i < total; ++i) {
    c.data[i] = std::bit_cast<float>(get_u32_le(payload + 4 * i));
  }
  return c;
}

void load_params(const Container& container, ParamStore& store) {
  const auto& manifest = container.header.at("params");
  const auto& entries = store.entries();
  if (manifest.size() != entries.size()) {
    throw FormatError("parameter count mismatch: file has " + std::to_string(manifest.size()) +
                      ", model has " + std::to_string(entries.size()));
  }
  for (size_t i = 0; i < entries.size(); ++i) {
    if (manifest[i].at("name").get<std::string>() != entries[i].name) {
      throw FormatError("parameter name mismatch at index " + std::to_string(i));
    }
    if (manifest[i].at("shape").get<std::vector<int64_t>>() != entries[i].value.shape()) {
      throw FormatError("parameter shape mismatch for " + entries[i].name);
    }
  }
  store.set_flat_values(container.data);
}

}  // namespace rlcore
