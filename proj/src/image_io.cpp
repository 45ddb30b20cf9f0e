#include "caal/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace caal {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const char* what) {
    throw DataError(path + ": " + what);
}

void write_png(const std::string& path, const Tensor& img, int bit_depth) {
    if (img.dim() != 2) throw ShapeError("png write: expected (H,W), got " + img.shape_str());
    int h = img.shape(0), w = img.shape(1);
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) fail(path, "cannot open for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail(path, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        fail(path, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(path, "libpng error during write");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    size_t row_bytes = bit_depth == 8 ? static_cast<size_t>(w) : (static_cast<size_t>(w) + 7) / 8;
    std::vector<unsigned char> row(row_bytes);
    for (int y = 0; y < h; ++y) {
        std::fill(row.begin(), row.end(), 0);
        for (int x = 0; x < w; ++x) {
            double v = img[static_cast<int64_t>(y) * w + x];
            if (bit_depth == 8) {
                double q = std::floor(v * 255.0 + 0.5);
                if (q < 0) q = 0;
                if (q > 255) q = 255;
                row[static_cast<size_t>(x)] = static_cast<unsigned char>(q);
            } else {
                if (v >= 0.5) row[static_cast<size_t>(x / 8)] |= 0x80u >> (x % 8);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::string& path, int expected_bit_depth) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) fail(path, "cannot open for reading");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
        fail(path, "not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail(path, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        fail(path, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "libpng error during read");
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    int w = static_cast<int>(png_get_image_width(png, info));
    int h = static_cast<int>(png_get_image_height(png, info));
    int depth = png_get_bit_depth(png, info);
    int color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || depth != expected_bit_depth) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "expected grayscale PNG of the recorded bit depth");
    }

    size_t row_bytes = png_get_rowbytes(png, info);
    std::vector<unsigned char> row(row_bytes);
    Tensor out = Tensor::zeros({h, w});
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            if (depth == 8) {
                out[static_cast<int64_t>(y) * w + x] = row[static_cast<size_t>(x)] / 255.0;
            } else {
                int bit = (row[static_cast<size_t>(x / 8)] >> (7 - x % 8)) & 1;
                out[static_cast<int64_t>(y) * w + x] = bit;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace

void write_png_gray(const std::string& path, const Tensor& img) { write_png(path, img, 8); }
Tensor read_png_gray(const std::string& path) { return read_png(path, 8); }
void write_png_mask(const std::string& path, const Tensor& mask) { write_png(path, mask, 1); }
Tensor read_png_mask(const std::string& path) { return read_png(path, 1); }

void snap_to_gray_grid(Tensor& img) {
    for (int64_t i = 0; i < img.size(); ++i) {
        double v = std::clamp(img[i], 0.0, 1.0);
        img[i] = std::floor(v * 255.0 + 0.5) / 255.0;
    }
}

}  // namespace caal
