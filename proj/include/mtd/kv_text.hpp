#pragma once

// `dotted.key = value` text with `#` comments. Used by config files and by
// the metadata headers embedded in corpus and checkpoint files.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mtd {

struct KvEntry {
    std::string key;
    std::string value;
    int line = 0;
};

/// Parses lines; malformed lines raise ConfigError naming the line number.
std::vector<KvEntry> parse_kv_text(std::string_view text);

/// Ordered key → value view; later duplicates override earlier ones.
std::map<std::string, std::string> kv_map(const std::vector<KvEntry>& entries);

std::string format_double(double v);

// Typed conversions raising ConfigError that names the key.
double kv_to_double(const std::string& key, const std::string& value);
long long kv_to_int(const std::string& key, const std::string& value);
std::uint64_t kv_to_u64(const std::string& key, const std::string& value);
bool kv_to_bool(const std::string& key, const std::string& value);
std::vector<int> kv_to_int_list(const std::string& key, const std::string& value);

}  // namespace mtd
