#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace distillforge {

struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;  // 1 or 3
    std::vector<std::uint8_t> pixels;  // row-major, interleaved channels
};

/// Decodes an 8-bit grayscale or RGB PNG. Alpha is stripped. Throws DataError with the path.
Image8 decode_png(std::span<const std::uint8_t> bytes, const std::filesystem::path& origin);
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace distillforge
