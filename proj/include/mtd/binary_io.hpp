#pragma once

// Little-endian encoding helpers shared by the corpus and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "mtd/errors.hpp"

namespace mtd::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    /// u64 length followed by the text bytes.
    void text(std::string_view s) {
        u64(s.size());
        bytes(s);
    }
    const std::vector<char>& buffer() const { return buf_; }

private:
    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    std::vector<char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

    std::uint64_t offset() const { return pos_; }
    bool at_end() const { return pos_ == data_.size(); }
    std::uint64_t remaining() const { return data_.size() - pos_; }

    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::uint32_t u32(const char* what) { return pod<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return pod<std::uint64_t>(what); }
    float f32(const char* what) { return pod<float>(what); }
    std::string text(const char* what) {
        const std::uint64_t n = u64(what);
        if (n > remaining()) throw FormatError(std::string("truncated ") + what, pos_);
        return bytes(static_cast<std::size_t>(n), what);
    }
    void need(std::size_t n, const char* what) const {
        if (n > data_.size() - pos_) throw FormatError(std::string("truncated ") + what, pos_);
    }

private:
    template <typename T>
    T pod(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::vector<char> data_;
    std::size_t pos_ = 0;
};

/// Whole-file read; missing/unreadable files raise DataError.
std::vector<char> read_file(const std::string& path);
/// Writes atomically enough for our purposes (truncate + write); failures raise DataError.
void write_file(const std::string& path, const std::vector<char>& data);
void write_text_file(const std::string& path, std::string_view text);

}  // namespace mtd::io
