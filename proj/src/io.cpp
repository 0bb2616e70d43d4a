#include "up/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>

namespace up {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_u8(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_png(const std::string& path, int width, int height, int color_type, int bit_depth,
               const std::vector<png_bytep>& rows) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot open for write: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16) png_set_swap(png);  // buffers are little-endian u16
    png_write_image(png, const_cast<png_bytepp>(rows.data()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

struct PngImage {
    int width = 0, height = 0, channels = 0, bit_depth = 0;
    std::vector<std::uint8_t> bytes;  // row-major, native channel order
};

PngImage read_png(const std::string& path, bool want_rgb) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("png read failed: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    if (want_rgb && (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA))
        png_set_gray_to_rgb(png);
    if (!want_rgb && (color_type == PNG_COLOR_TYPE_RGB || color_type == PNG_COLOR_TYPE_RGB_ALPHA ||
                      color_type == PNG_COLOR_TYPE_PALETTE))
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (bit_depth == 16) png_set_swap(png);
    png_read_update_info(png, info);

    PngImage out;
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.bit_depth = png_get_bit_depth(png, info);
    out.channels = png_get_channels(png, info);

    const size_t stride = png_get_rowbytes(png, info);
    out.bytes.resize(stride * out.height);
    std::vector<png_bytep> rows(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = out.bytes.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace

void write_png_rgb8(const std::string& path, const ImageBuffer& img) {
    if (img.channels != 3) throw std::invalid_argument("write_png_rgb8: need 3 channels");
    std::vector<std::uint8_t> bytes(static_cast<size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                bytes[(static_cast<size_t>(y) * img.width + x) * 3 + c] = to_u8(img.at(x, y, c));
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = bytes.data() + static_cast<size_t>(y) * img.width * 3;
    write_png(path, img.width, img.height, PNG_COLOR_TYPE_RGB, 8, rows);
}

void write_png_gray8(const std::string& path, const ImageBuffer& img) {
    if (img.channels != 1) throw std::invalid_argument("write_png_gray8: need 1 channel");
    std::vector<std::uint8_t> bytes(static_cast<size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            bytes[static_cast<size_t>(y) * img.width + x] = to_u8(img.at(x, y));
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = bytes.data() + static_cast<size_t>(y) * img.width;
    write_png(path, img.width, img.height, PNG_COLOR_TYPE_GRAY, 8, rows);
}

void write_png_gray16(const std::string& path, const ImageBuffer& meters, double depth_scale) {
    if (meters.channels != 1) throw std::invalid_argument("write_png_gray16: need 1 channel");
    std::vector<std::uint16_t> vals(static_cast<size_t>(meters.width) * meters.height);
    for (int y = 0; y < meters.height; ++y)
        for (int x = 0; x < meters.width; ++x) {
            const double raw = std::clamp(meters.at(x, y) * depth_scale, 0.0, 65535.0);
            vals[static_cast<size_t>(y) * meters.width + x] =
                static_cast<std::uint16_t>(std::lround(raw));
        }
    std::vector<png_bytep> rows(meters.height);
    for (int y = 0; y < meters.height; ++y)
        rows[y] = reinterpret_cast<png_bytep>(vals.data() + static_cast<size_t>(y) * meters.width);
    write_png(path, meters.width, meters.height, PNG_COLOR_TYPE_GRAY, 16, rows);
}

void write_png_mask(const std::string& path, const Mask& mask) {
    std::vector<std::uint8_t> bytes(mask.data.size());
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
    std::vector<png_bytep> rows(mask.height);
    for (int y = 0; y < mask.height; ++y) rows[y] = bytes.data() + static_cast<size_t>(y) * mask.width;
    write_png(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 8, rows);
}

ImageBuffer read_png_rgb8(const std::string& path) {
    const PngImage raw = read_png(path, true);
    if (raw.bit_depth != 8 || raw.channels != 3)
        throw std::runtime_error("expected 8-bit RGB png: " + path);
    ImageBuffer img(raw.width, raw.height, 3);
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = raw.bytes[i] / 255.0;
    return img;
}

ImageBuffer read_png_gray16(const std::string& path, double depth_scale) {
    const PngImage raw = read_png(path, false);
    if (raw.bit_depth != 16 || raw.channels != 1)
        throw std::runtime_error("expected 16-bit gray png: " + path);
    ImageBuffer img(raw.width, raw.height, 1);
    const auto* vals = reinterpret_cast<const std::uint16_t*>(raw.bytes.data());
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = vals[i] / depth_scale;
    return img;
}

std::vector<std::uint8_t> read_png_gray8(const std::string& path, int* width, int* height) {
    const PngImage raw = read_png(path, false);
    if (raw.bit_depth != 8 || raw.channels != 1)
        throw std::runtime_error("expected 8-bit gray png: " + path);
    if (width) *width = raw.width;
    if (height) *height = raw.height;
    return raw.bytes;
}

Mask read_png_mask(const std::string& path) {
    int w = 0, h = 0;
    const auto bytes = read_png_gray8(path, &w, &h);
    Mask m(w, h);
    for (size_t i = 0; i < bytes.size(); ++i) m.data[i] = bytes[i] != 0;
    return m;
}

std::vector<Mask> read_instance_masks(const std::string& path) {
    int w = 0, h = 0;
    const auto bytes = read_png_gray8(path, &w, &h);
    std::map<std::uint8_t, Mask> by_level;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::uint8_t level = bytes[static_cast<size_t>(y) * w + x];
            if (level == 0) continue;
            auto [it, inserted] = by_level.try_emplace(level, w, h);
            it->second.set(x, y, true);
        }
    std::vector<Mask> out;
    out.reserve(by_level.size());
    for (auto& [level, mask] : by_level) out.push_back(std::move(mask));
    return out;
}

// --- UPFT ----------------------------------------------------------------

namespace {
void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
}
}  // namespace

void write_feature_map(const std::string& path, const ImageBuffer& feat) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write("UPFT", 4);
    put_u32(os, static_cast<std::uint32_t>(feat.height));
    put_u32(os, static_cast<std::uint32_t>(feat.width));
    put_u32(os, static_cast<std::uint32_t>(feat.channels));
    std::vector<float> f32(feat.data.begin(), feat.data.end());
    os.write(reinterpret_cast<const char*>(f32.data()), f32.size() * sizeof(float));
    if (!os) throw std::runtime_error("short write: " + path);
}

ImageBuffer read_feature_map(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "UPFT", 4) != 0)
        throw std::runtime_error("not a UPFT file: " + path);
    const int h = static_cast<int>(get_u32(is));
    const int w = static_cast<int>(get_u32(is));
    const int c = static_cast<int>(get_u32(is));
    if (h <= 0 || w <= 0 || c <= 0 || static_cast<std::int64_t>(h) * w * c > (1 << 28))
        throw std::runtime_error("bad UPFT header: " + path);
    ImageBuffer img(w, h, c);
    std::vector<float> f32(img.data.size());
    is.read(reinterpret_cast<char*>(f32.data()), f32.size() * sizeof(float));
    if (!is) throw std::runtime_error("short read: " + path);
    for (size_t i = 0; i < f32.size(); ++i) img.data[i] = f32[i];
    return img;
}

}  // namespace up
