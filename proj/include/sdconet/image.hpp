#pragma once

#include <string>
#include <vector>

#include "sdconet/tensor.hpp"

namespace sdconet {

// Float image, row-major (h, w, c), values nominally in [0,1].
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> pix;

    Image() = default;
    Image(int h_, int w_, int c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), pix(static_cast<size_t>(h_) * w_ * c_, fill) {}

    double& at(int y, int x, int ch) {
        return pix[(static_cast<size_t>(y) * w + x) * c + ch];
    }
    double at(int y, int x, int ch) const {
        return pix[(static_cast<size_t>(y) * w + x) * c + ch];
    }
    size_t size() const { return pix.size(); }
};

// 8-bit PNG I/O; c must be 1 (gray) or 3 (rgb) on save.
Image load_png(const std::string& path);
void save_png(const std::string& path, const Image& img);

// Antialiased bicubic (a = -0.5) downscale by exactly 2. Even dims required.
// clamp01 = false keeps the raw linear combination (test mode).
Image bicubic_down2(const Image& img, bool clamp01 = true);

// Bicubic (a = -0.5) upscale by exactly 2, no antialias stretch.
Image bicubic_up2(const Image& img, bool clamp01 = true);

Image upsample_nearest2(const Image& img);

Tensor image_to_tensor(const Image& img, bool requires_grad = false);
Image tensor_to_image(const Tensor& t);

} // namespace sdconet
