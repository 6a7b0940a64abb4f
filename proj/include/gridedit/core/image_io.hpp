#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "gridedit/core/error.hpp"
#include "gridedit/core/image.hpp"

namespace gridedit {

inline unsigned char quantize8(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<unsigned char>(std::lround(c * 255.0f));
}

// Round-trips an image through 8-bit storage.
inline Image quantize(const Image& img) {
    Image out = img;
    for (auto& v : out.pixels) v = float(quantize8(v)) / 255.0f;
    return out;
}

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
}  // namespace detail

// 8-bit RGB PNG, no interlacing, fixed compression settings (byte-stable output).
inline void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 3) throw ShapeError("write_png: expected 3 channels, got " + std::to_string(img.channels));
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    std::vector<unsigned char> rows(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) rows[i] = quantize8(img.pixels[i]);
    std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) row_ptrs[y] = rows.data() + static_cast<std::size_t>(y) * img.width * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to write " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Reads any 8/16-bit PNG and converts it to RGB in [0,1].
inline Image read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError(path.string() + " is not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialisation failed");
    }
    Image img;
    std::vector<unsigned char> data;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_set_expand_gray_1_2_4_to_8(png);
        png_set_gray_to_rgb(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != static_cast<std::size_t>(w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path.string() + ": unsupported PNG layout");
    }
    data.resize(rowbytes * h);
    row_ptrs.resize(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) row_ptrs[y] = data.data() + rowbytes * y;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    img = Image(h, w, 3);
    for (std::size_t i = 0; i < data.size(); ++i) img.pixels[i] = float(data[i]) / 255.0f;
    return img;
}

}  // namespace gridedit
