#pragma once

#include <openssl/evp.h>

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "kdiga/checkpoint.hpp"
#include "kdiga/errors.hpp"

namespace kdiga {

inline std::string sha256_hex(const void* data, std::size_t size) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int length = 0;
    const bool ok = ctx && EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx.get(), data, size) == 1 &&
                    EVP_DigestFinal_ex(ctx.get(), digest.data(), &length) == 1;
    require(ok, ErrorKind::io, "sha256: digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * length);
    for (unsigned int i = 0; i < length; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

inline std::string sha256_hex(const std::string& text) { return sha256_hex(text.data(), text.size()); }

inline std::string sha256_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace kdiga
