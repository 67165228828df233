#pragma once

#include <span>
#include <string>
#include <string_view>

#include "mtd/sync_model.hpp"

namespace mtd {

/// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const char> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::string& path);

/// Digest over (name, shape, raw 64-bit values) of every parameter in name order.
std::string parameter_digest(const ParameterMap& params);
inline std::string parameter_digest(const SyncModel& model) { return parameter_digest(model.parameters()); }

}  // namespace mtd
