#include "textregion/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>

namespace textregion {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f != nullptr) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) {
        throw PngError("cannot open '" + path.string() + "'");
    }
    return f;
}

void check_size(Grid size, std::size_t have, std::size_t channels) {
    if (size.rows <= 0 || size.cols <= 0 || have != size.area() * channels) {
        throw PngError("png: pixel buffer does not match image size");
    }
}

// libpng reports errors through longjmp; nothing with a destructor lives between setjmp and the
// libpng calls below.
bool write_png(std::FILE* fp, Grid size, const std::uint8_t* pixels, int color_type, std::size_t channels,
               std::span<const Rgb> palette) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png == nullptr) {
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (info == nullptr || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        return false;
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(size.cols), static_cast<png_uint_32>(size.rows), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_color colors[256];
    if (color_type == PNG_COLOR_TYPE_PALETTE) {
        for (std::size_t k = 0; k < palette.size(); ++k) {
            colors[k] = {palette[k][0], palette[k][1], palette[k][2]};
        }
        png_set_PLTE(png, info, colors, static_cast<int>(palette.size()));
    }
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(size.cols) * channels;
    for (int r = 0; r < size.rows; ++r) {
        png_write_row(png, pixels + static_cast<std::size_t>(r) * stride);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return true;
}

void write_file(const std::filesystem::path& path, Grid size, const std::uint8_t* pixels, int color_type,
                std::size_t channels, std::span<const Rgb> palette) {
    FilePtr f = open_file(path, "wb");
    if (!write_png(f.get(), size, pixels, color_type, channels, palette)) {
        throw PngError("failed encoding '" + path.string() + "'");
    }
    if (std::fflush(f.get()) != 0) {
        throw PngError("failed writing '" + path.string() + "'");
    }
}

enum class ReadStatus { ok, libpng_error, unsupported };

ReadStatus read_png(std::FILE* fp, LabelImage& out) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (png == nullptr) {
        return ReadStatus::libpng_error;
    }
    png_infop info = png_create_info_struct(png);
    if (info == nullptr || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        return ReadStatus::libpng_error;
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const int color_type = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if ((color_type != PNG_COLOR_TYPE_PALETTE && color_type != PNG_COLOR_TYPE_GRAY) || depth > 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        return ReadStatus::unsupported;
    }
    if (depth < 8) {
        png_set_packing(png);
        if (color_type == PNG_COLOR_TYPE_GRAY) {
            png_set_expand_gray_1_2_4_to_8(png);
        }
    }
    png_read_update_info(png, info);
    out.size = {static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info))};
    out.values.resize(out.size.area());
    for (int r = 0; r < out.size.rows; ++r) {
        png_read_row(png, out.values.data() + static_cast<std::size_t>(r) * out.size.cols, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return ReadStatus::ok;
}

} // namespace

const std::array<Rgb, 256>& class_palette() {
    static const std::array<Rgb, 256> palette = [] {
        std::array<Rgb, 256> p{};
        for (int i = 0; i < 256; ++i) {
            int c = i;
            int r = 0;
            int g = 0;
            int b = 0;
            for (int j = 0; j < 8; ++j) {
                r |= ((c >> 0) & 1) << (7 - j);
                g |= ((c >> 1) & 1) << (7 - j);
                b |= ((c >> 2) & 1) << (7 - j);
                c >>= 3;
            }
            p[static_cast<std::size_t>(i)] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                              static_cast<std::uint8_t>(b)};
        }
        return p;
    }();
    return palette;
}

void write_indexed_png(const std::filesystem::path& path, Grid size, std::span<const std::uint8_t> indices,
                       std::span<const Rgb> palette) {
    check_size(size, indices.size(), 1);
    if (palette.empty() || palette.size() > 256) {
        throw PngError("png: palette must hold 1..256 entries");
    }
    write_file(path, size, indices.data(), PNG_COLOR_TYPE_PALETTE, 1, palette);
}

void write_gray_png(const std::filesystem::path& path, Grid size, std::span<const std::uint8_t> values) {
    check_size(size, values.size(), 1);
    write_file(path, size, values.data(), PNG_COLOR_TYPE_GRAY, 1, {});
}

void write_rgb_png(const std::filesystem::path& path, Grid size, std::span<const std::uint8_t> rgb) {
    check_size(size, rgb.size(), 3);
    write_file(path, size, rgb.data(), PNG_COLOR_TYPE_RGB, 3, {});
}

LabelImage read_label_png(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    LabelImage image;
    switch (read_png(f.get(), image)) {
    case ReadStatus::ok:
        return image;
    case ReadStatus::unsupported:
        throw PngError("'" + path.string() + "' is not an 8-bit palette or grayscale PNG");
    case ReadStatus::libpng_error:
        break;
    }
    throw PngError("'" + path.string() + "' is not a readable PNG");
}

} // namespace textregion
