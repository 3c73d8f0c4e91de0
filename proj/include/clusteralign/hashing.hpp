#ifndef CLUSTERALIGN_HASHING_HPP
#define CLUSTERALIGN_HASHING_HPP

#include <openssl/evp.h>

#include <array>
#include <string>
#include <string_view>

#include "numerics.hpp"

namespace clusteralign {

/// Lower-case hex SHA-256 of a byte string.
inline std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < length; ++i) {
        out += kHex[digest[i] >> 4];
        out += kHex[digest[i] & 0xF];
    }
    return out;
}

}  // namespace clusteralign

#endif  // CLUSTERALIGN_HASHING_HPP
