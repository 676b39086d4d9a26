#pragma once

#include <png.h>

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "array.hpp"

namespace patchproto {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline void write_png(const std::string& path, int w, int h, int bit_depth, int color_type,
                      const std::vector<png_bytep>& rows) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h),
                 bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    // fixed settings keep output bytes deterministic
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_write_info(png, info);
    png_write_image(png, const_cast<png_bytep*>(rows.data()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// Writes an {H, W} array of [0,1] values as an 8-bit grayscale PNG.
inline void write_png_gray8(const std::string& path, const Array& img) {
    if (img.rank() != 2) throw ShapeError("write_png_gray8 expects rank-2");
    int h = img.shape[0], w = img.shape[1];
    std::vector<png_byte> buf(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < buf.size(); ++i) {
        float v = std::clamp(img.data[i], 0.0f, 1.0f);
        buf[i] = static_cast<png_byte>(std::lround(v * 255.0f));
    }
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = &buf[static_cast<std::size_t>(y) * w];
    detail::write_png(path, w, h, 8, PNG_COLOR_TYPE_GRAY, rows);
}

/// Writes an {H, W} array of [0,1] values as a 16-bit grayscale PNG
/// (value/65535 recovers the original up to quantization).
inline void write_png_gray16(const std::string& path, const Array& img) {
    if (img.rank() != 2) throw ShapeError("write_png_gray16 expects rank-2");
    int h = img.shape[0], w = img.shape[1];
    std::vector<png_byte> buf(static_cast<std::size_t>(h) * w * 2);
    for (int i = 0; i < h * w; ++i) {
        float v = std::clamp(img.data[i], 0.0f, 1.0f);
        auto q = static_cast<unsigned>(std::lround(v * 65535.0f));
        buf[2 * i] = static_cast<png_byte>(q >> 8);      // network byte order
        buf[2 * i + 1] = static_cast<png_byte>(q & 0xff);
    }
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = &buf[static_cast<std::size_t>(y) * w * 2];
    detail::write_png(path, w, h, 16, PNG_COLOR_TYPE_GRAY, rows);
}

/// Writes an interleaved {H, W, 3} array of [0,1] values as an RGB PNG.
inline void write_png_rgb8(const std::string& path, const Array& img) {
    if (img.rank() != 3 || img.shape[2] != 3) throw ShapeError("write_png_rgb8 expects {H,W,3}");
    int h = img.shape[0], w = img.shape[1];
    std::vector<png_byte> buf(static_cast<std::size_t>(h) * w * 3);
    for (std::size_t i = 0; i < buf.size(); ++i) {
        float v = std::clamp(img.data[i], 0.0f, 1.0f);
        buf[i] = static_cast<png_byte>(std::lround(v * 255.0f));
    }
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = &buf[static_cast<std::size_t>(y) * w * 3];
    detail::write_png(path, w, h, 8, PNG_COLOR_TYPE_RGB, rows);
}

/// Reads a grayscale PNG (8- or 16-bit) to an {H, W} array of [0,1] values.
inline Array read_png_gray(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open for reading: " + path);
    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw DataError("not a PNG file: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("corrupt PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    int w = static_cast<int>(png_get_image_width(png, info));
    int h = static_cast<int>(png_get_image_height(png, info));
    int depth = png_get_bit_depth(png, info);
    int color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY) {
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    }
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    depth = png_get_bit_depth(png, info);
    std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> buf(rowbytes * static_cast<std::size_t>(h));
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = &buf[rowbytes * static_cast<std::size_t>(y)];
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Array img({h, w});
    if (depth == 16) {
        for (int i = 0; i < h * w; ++i) {
            unsigned v = (static_cast<unsigned>(buf[2 * i]) << 8) | buf[2 * i + 1];
            img.data[i] = static_cast<float>(v) / 65535.0f;
        }
    } else {
        for (int i = 0; i < h * w; ++i) img.data[i] = static_cast<float>(buf[i]) / 255.0f;
    }
    return img;
}

}  // namespace patchproto
