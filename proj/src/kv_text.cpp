#include "mtd/kv_text.hpp"

#include <cctype>
#include <charconv>
#include <fstream>

#include "mtd/binary_io.hpp"
#include "mtd/errors.hpp"

namespace mtd {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

bool valid_key(std::string_view k) {
    if (k.empty()) return false;
    for (char c : k) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-')) return false;
    }
    return true;
}

}  // namespace

std::vector<KvEntry> parse_kv_text(std::string_view text) {
    std::vector<KvEntry> out;
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (!line.empty()) {
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) {
                throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
            }
            const auto key = trim(line.substr(0, eq));
            if (!valid_key(key)) {
                throw ConfigError("line " + std::to_string(line_no) + ": invalid key '" + std::string(key) + "'");
            }
            out.push_back({std::string(key), std::string(trim(line.substr(eq + 1))), line_no});
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return out;
}

std::map<std::string, std::string> kv_map(const std::vector<KvEntry>& entries) {
    std::map<std::string, std::string> m;
    for (const auto& e : entries) m[e.key] = e.value;
    return m;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

double kv_to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a real number, got '" + value + "'");
    }
}

long long kv_to_int(const std::string& key, const std::string& value) {
    long long v = 0;
    const auto* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + value + "'");
    }
    return v;
}

std::uint64_t kv_to_u64(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    const auto* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError("key '" + key + "': expected an unsigned integer, got '" + value + "'");
    }
    return v;
}

bool kv_to_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + value + "'");
}

std::vector<int> kv_to_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos <= value.size()) {
        const auto comma = value.find(',', pos);
        const std::string piece(trim(std::string_view(value).substr(
            pos, comma == std::string::npos ? std::string::npos : comma - pos)));
        if (piece.empty()) throw ConfigError("key '" + key + "': empty list element in '" + value + "'");
        out.push_back(static_cast<int>(kv_to_int(key, piece)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

// binary_io file helpers live here to keep the I/O surface in one unit.
namespace io {

std::vector<char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "' for reading");
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<char>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw DataError("write to '" + path + "' failed");
}

void write_text_file(const std::string& path, std::string_view text) {
    write_file(path, std::vector<char>(text.begin(), text.end()));
}

}  // namespace io

}  // namespace mtd
