#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace distillforge {

/// A file that failed magic, version, length or checksum validation.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr std::uint16_t kEnvelopeVersion = 1;

/// Binary container shared by trajectory (`DFTJ`) and distilled-dataset (`DFDC`) files:
///
///   4 bytes   magic
///   u16 LE    format version (1)
///   u32 LE    metadata length L
///   L bytes   UTF-8 JSON metadata
///   4*M bytes little-endian IEEE-754 binary32 payload
///   32 bytes  SHA-256 over every preceding byte
struct Envelope {
    std::array<char, 4> magic{};
    nlohmann::json metadata;
    std::vector<float> payload;
};

std::vector<std::uint8_t> encode_envelope(const Envelope& e);
/// Verifies magic, version and checksum before anything is parsed.
Envelope decode_envelope(std::span<const std::uint8_t> bytes, std::array<char, 4> expected_magic);

/// Writes to a temporary sibling and renames it into place.
void write_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_atomic(const std::filesystem::path& path, const std::string& text);

void write_envelope(const std::filesystem::path& path, const Envelope& e);
Envelope read_envelope(const std::filesystem::path& path, std::array<char, 4> expected_magic);

}  // namespace distillforge
