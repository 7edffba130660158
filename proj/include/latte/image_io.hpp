#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "latte/tensor.hpp"

namespace latte {

/// Decodes PNG, JPEG or binary PPM/PGM (detected by magic bytes) into a
/// [0, 1] image. Throws IoError on unreadable or undecodable input.
Image read_image(const std::filesystem::path& path);
Image decode_image(std::span<const std::uint8_t> bytes);

/// 8-bit PNG (gray or RGB), values clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);

/// Baseline JPEG: islow DCT, 4:2:0 chroma subsampling, no optimization pass.
std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality);
Image decode_jpeg(std::span<const std::uint8_t> bytes);

/// Rounds every value to the nearest of 256 levels in [0, 1].
Image quantize8(const Image& image);

}  // namespace latte
