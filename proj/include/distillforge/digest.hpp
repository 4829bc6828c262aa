#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace distillforge {

using Sha256 = std::array<std::uint8_t, 32>;

/// Incremental SHA-256 (OpenSSL EVP underneath).
class Sha256Hasher {
public:
    Sha256Hasher();
    ~Sha256Hasher();
    Sha256Hasher(const Sha256Hasher&) = delete;
    Sha256Hasher& operator=(const Sha256Hasher&) = delete;

    void update(std::span<const std::uint8_t> bytes);
    void update(std::string_view text);
    Sha256 finish();

private:
    void* ctx_;
};

Sha256 sha256(std::span<const std::uint8_t> bytes);
std::string to_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

}  // namespace distillforge
