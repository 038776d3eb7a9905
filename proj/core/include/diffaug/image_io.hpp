#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffaug/tensor.hpp"

namespace diffaug {

// Decoded raster in HWC byte layout, as read from disk.
struct RawImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<uint8_t> pixels;
};

RawImage decode_image(const std::string& path);

// Channel reduction to a single luminance plane in [0,255] doubles.
// 3/4-channel inputs use Rec.601 weights; other channel counts average.
Tensor to_grayscale(const RawImage& raw);

// Bilinear resampling with half-pixel-center alignment. Input/output are
// (H,W) tensors of [0,255] doubles.
Tensor bilinear_resize(const Tensor& gray, int out_h, int out_w);

// Full ingestion: grayscale, resize to size x size, map [0,255] -> [-1,+1].
// Result shape (1, size, size).
Tensor preprocess_image(const RawImage& raw, int size);

Tensor load_pixel_tensor(const std::string& path, int size);

// Writes a (1,S,S) tensor in [-1,+1] as 8-bit grayscale PNG. Values are
// mapped back to [0,255] with round-half-even and clamped.
void write_grayscale_png(const std::string& path, const Tensor& image);

// Round-trip byte quantization used by the PNG writer.
uint8_t pixel_to_byte(double v);

}  // namespace diffaug
