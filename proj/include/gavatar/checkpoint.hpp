#pragma once

// Binary container: magic, schema version, JSON metadata block, then named
// matrices stored as little-endian 64-bit floats in column-major order.

#include "gavatar/common.hpp"

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string_view>

namespace gavatar::checkpoint {

inline constexpr std::string_view kMagic{"GAVCKPT\x01", 8};
inline constexpr std::uint32_t kSchemaVersion = 1;

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, MatX>> blobs;

  void put(const std::string& name, MatX value);
  bool has(const std::string& name) const;
  /// Throws FormatError when absent.
  const MatX& get(const std::string& name) const;
};

std::string encode(const Container& c);
/// Throws FormatError on bad magic, unsupported version or truncation.
Container decode(std::string_view bytes);

void write(const std::filesystem::path& path, const Container& c);
Container read(const std::filesystem::path& path);

}  // namespace gavatar::checkpoint
