#include "distillforge/envelope.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unistd.h>

#include "distillforge/digest.hpp"
#include "distillforge/image_io.hpp"

namespace distillforge {

static_assert(std::endian::native == std::endian::little, "envelope I/O assumes a little-endian host");

std::vector<std::uint8_t> encode_envelope(const Envelope& e) {
    const std::string meta = e.metadata.dump();
    std::vector<std::uint8_t> out;
    out.reserve(4 + 2 + 4 + meta.size() + 4 * e.payload.size() + 32);
    out.insert(out.end(), e.magic.begin(), e.magic.end());
    out.push_back(static_cast<std::uint8_t>(kEnvelopeVersion & 0xff));
    out.push_back(static_cast<std::uint8_t>(kEnvelopeVersion >> 8));
    const auto len = static_cast<std::uint32_t>(meta.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
    out.insert(out.end(), meta.begin(), meta.end());
    const auto* raw = reinterpret_cast<const std::uint8_t*>(e.payload.data());
    out.insert(out.end(), raw, raw + 4 * e.payload.size());
    const Sha256 d = sha256(out);
    out.insert(out.end(), d.begin(), d.end());
    return out;
}

Envelope decode_envelope(std::span<const std::uint8_t> bytes, std::array<char, 4> expected_magic) {
    const std::size_t header = 4 + 2 + 4;
    if (bytes.size() < header + 32) throw FormatError("file too short: checksum mismatch");
    const auto body = bytes.first(bytes.size() - 32);
    const Sha256 d = sha256(body);
    if (std::memcmp(d.data(), bytes.data() + body.size(), 32) != 0) throw FormatError("checksum mismatch");
    if (std::memcmp(bytes.data(), expected_magic.data(), 4) != 0)
        throw FormatError("bad magic, expected " + std::string(expected_magic.begin(), expected_magic.end()));
    const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
    if (version != kEnvelopeVersion) throw FormatError("unsupported format version " + std::to_string(version));
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[6 + i]) << (8 * i);
    if (header + len > body.size() || (body.size() - header - len) % 4 != 0)
        throw FormatError("metadata length inconsistent with file size");
    Envelope e;
    std::memcpy(e.magic.data(), bytes.data(), 4);
    try {
        e.metadata = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + header + len);
    } catch (const nlohmann::json::exception& ex) {
        throw FormatError(std::string("metadata is not valid JSON: ") + ex.what());
    }
    e.payload.resize((body.size() - header - len) / 4);
    std::memcpy(e.payload.data(), bytes.data() + header + len, 4 * e.payload.size());
    return e;
}

void write_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp-" + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_atomic(const std::filesystem::path& path, const std::string& text) {
    write_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_envelope(const std::filesystem::path& path, const Envelope& e) { write_atomic(path, encode_envelope(e)); }

Envelope read_envelope(const std::filesystem::path& path, std::array<char, 4> expected_magic) {
    const auto bytes = read_file(path);
    try {
        return decode_envelope(bytes, expected_magic);
    } catch (const FormatError& ex) {
        throw FormatError(path.string() + ": " + ex.what());
    }
}

}  // namespace distillforge
