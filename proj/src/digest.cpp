#include "mtd/digest.hpp"

#include <openssl/evp.h>

#include <memory>

#include "mtd/binary_io.hpp"
#include "mtd/errors.hpp"

namespace mtd {

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
    }
    void update(const void* data, std::size_t n) {
        if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error("sha256 update failed");
    }
    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        if (EVP_DigestFinal_ex(ctx_.get(), md, &len) != 1) throw Error("sha256 final failed");
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        out.reserve(2 * len);
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(digits[md[i] >> 4]);
            out.push_back(digits[md[i] & 0xF]);
        }
        return out;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha256_hex(std::span<const char> bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_hex(std::string_view text) { return sha256_hex(std::span<const char>(text.data(), text.size())); }

std::string sha256_file(const std::string& path) { return sha256_hex(io::read_file(path)); }

std::string parameter_digest(const ParameterMap& params) {
    Sha256 h;
    for (const auto& [name, t] : params) {
        h.update(name.data(), name.size());
        for (std::size_t d : t.shape()) {
            const auto d64 = static_cast<std::uint64_t>(d);
            h.update(&d64, sizeof d64);
        }
        h.update(t.values().data(), t.values().size() * sizeof(double));
    }
    return h.hex();
}

}  // namespace mtd
