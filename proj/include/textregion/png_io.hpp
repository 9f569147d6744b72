#pragma once

#include "textregion/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace textregion {

class PngError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using Rgb = std::array<std::uint8_t, 3>;

/// The 256-entry PASCAL VOC colour map (index 255 is the conventional ignore colour).
const std::array<Rgb, 256>& class_palette();

void write_indexed_png(const std::filesystem::path& path, Grid size, std::span<const std::uint8_t> indices,
                       std::span<const Rgb> palette);
void write_gray_png(const std::filesystem::path& path, Grid size, std::span<const std::uint8_t> values);
void write_rgb_png(const std::filesystem::path& path, Grid size, std::span<const std::uint8_t> rgb);

struct LabelImage {
    Grid size;
    std::vector<std::uint8_t> values;
};

/// Reads an 8-bit palette or grayscale PNG, returning raw indices / gray levels.
LabelImage read_label_png(const std::filesystem::path& path);

} // namespace textregion
