#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lbt {

// Interleaved RGB image, doubles in [0,1], row-major (y, x, channel).
// Generated images are quantized to the 8-bit grid so PNG round-trips are
// bit-identical.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> px;

    Image() = default;
    Image(int w, int h) : width(w), height(h), px(static_cast<std::size_t>(w) * h * 3, 0.0) {}

    double& at(int y, int x, int c) {
        return px[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    double at(int y, int x, int c) const {
        return px[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
};

// Mirror the pixel columns.
Image hflip_image(const Image& img);

// Snap every channel value to the nearest k/255.
void quantize_u8(Image& img);

// Lossless 8-bit RGB PNG. write throws on IO failure; read throws on missing
// or malformed files.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

}  // namespace lbt
