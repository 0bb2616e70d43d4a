// File I/O: PNG images (8-bit RGB / 8-bit gray / 16-bit gray) and the
// "UPFT" binary feature-map format that stands in for backbone features.

#pragma once

#include "up/geometry.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace up {

// --- PNG ---------------------------------------------------------------
// Color buffers are written as 8-bit RGB with values clamped from [0,1].
// Depth is written as 16-bit gray, value = round(meters * depth_scale).
// Masks and transmittance go to 8-bit gray.

void write_png_rgb8(const std::string& path, const ImageBuffer& img);     // img: HxWx3 in [0,1]
void write_png_gray8(const std::string& path, const ImageBuffer& img);    // img: HxWx1 in [0,1]
void write_png_gray16(const std::string& path, const ImageBuffer& meters, double depth_scale);
void write_png_mask(const std::string& path, const Mask& mask);           // true -> 255

ImageBuffer read_png_rgb8(const std::string& path);                       // -> HxWx3 in [0,1]
ImageBuffer read_png_gray16(const std::string& path, double depth_scale); // -> HxWx1 meters
// 8-bit gray as raw levels 0..255 (used for instance masks).
std::vector<std::uint8_t> read_png_gray8(const std::string& path, int* width, int* height);

Mask read_png_mask(const std::string& path);  // nonzero -> true
// Each distinct nonzero gray level becomes one instance mask.
std::vector<Mask> read_instance_masks(const std::string& path);

// --- UPFT feature maps ---------------------------------------------------
// magic "UPFT", then little-endian u32 height, width, channels, then
// f32 data row-major channel-last.

void write_feature_map(const std::string& path, const ImageBuffer& feat);
ImageBuffer read_feature_map(const std::string& path);

}  // namespace up
