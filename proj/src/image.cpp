#include "sdconet/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

namespace sdconet {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

double cubic_kernel(double d) {
    // Keys kernel with a = -0.5
    constexpr double a = -0.5;
    d = std::fabs(d);
    if (d < 1.0) return ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0;
    if (d < 2.0) return (((d - 5.0) * d + 8.0) * d - 4.0) * a;
    return 0.0;
}

uint8_t quantize(double v) {
    long q = std::lround(v * 255.0);
    if (q < 0) q = 0;
    if (q > 255) q = 255;
    return static_cast<uint8_t>(q);
}

} // namespace

Image load_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png reader init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt png: " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    // normalize everything to 8-bit RGB
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    Image img(static_cast<int>(h), static_cast<int>(w), 3);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                img.at(static_cast<int>(y), static_cast<int>(x), ch) =
                    row[x * 3 + ch] / 255.0;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void save_png(const std::string& path, const Image& img) {
    check_contract(img.c == 1 || img.c == 3, "save_png: 1 or 3 channels required");
    check_contract(img.h > 0 && img.w > 0, "save_png: empty image");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png writer init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png info init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w), static_cast<png_uint_32>(img.h), 8,
                 img.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(img.w) * img.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch)
                row[static_cast<size_t>(x) * img.c + ch] = quantize(img.at(y, x, ch));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

namespace {

// One resampling pass along a single axis at scale 1/2, window clipped to the
// image and weights renormalized.
struct Taps {
    int first = 0;
    std::vector<double> w;
};

std::vector<Taps> build_taps(int in_len, int out_len) {
    constexpr double scale = 2.0;   // in/out
    constexpr double support = 2.0 * scale;
    std::vector<Taps> taps(static_cast<size_t>(out_len));
    for (int o = 0; o < out_len; ++o) {
        double center = (o + 0.5) * scale;
        int lo = static_cast<int>(std::floor(center - support + 0.5));
        int hi = static_cast<int>(std::floor(center + support + 0.5));
        if (lo < 0) lo = 0;
        if (hi > in_len) hi = in_len;
        Taps t;
        t.first = lo;
        t.w.resize(static_cast<size_t>(hi - lo));
        double sum = 0;
        for (int i = lo; i < hi; ++i) {
            double v = cubic_kernel((i + 0.5 - center) / scale);
            t.w[static_cast<size_t>(i - lo)] = v;
            sum += v;
        }
        check_contract(sum > 0, "bicubic: degenerate tap window");
        for (double& v : t.w) v /= sum;
        taps[static_cast<size_t>(o)] = std::move(t);
    }
    return taps;
}

std::vector<Taps> build_up_taps(int in_len, int out_len) {
    constexpr double scale = 0.5; // in/out
    constexpr double support = 2.0;
    std::vector<Taps> taps(static_cast<size_t>(out_len));
    for (int o = 0; o < out_len; ++o) {
        double center = (o + 0.5) * scale;
        int lo = static_cast<int>(std::floor(center - support + 0.5));
        int hi = static_cast<int>(std::floor(center + support + 0.5));
        if (lo < 0) lo = 0;
        if (hi > in_len) hi = in_len;
        Taps t;
        t.first = lo;
        t.w.resize(static_cast<size_t>(hi - lo));
        double sum = 0;
        for (int i = lo; i < hi; ++i) {
            double v = cubic_kernel(i + 0.5 - center);
            t.w[static_cast<size_t>(i - lo)] = v;
            sum += v;
        }
        check_contract(sum > 0, "bicubic: degenerate tap window");
        for (double& v : t.w) v /= sum;
        taps[static_cast<size_t>(o)] = std::move(t);
    }
    return taps;
}

} // namespace

Image bicubic_down2(const Image& img, bool clamp01) {
    check_contract(img.h % 2 == 0 && img.w % 2 == 0, "bicubic_down2: even dims required");
    int oh = img.h / 2, ow = img.w / 2;

    // horizontal pass
    Image mid(img.h, ow, img.c);
    auto xt = build_taps(img.w, ow);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < ow; ++x) {
            const Taps& t = xt[static_cast<size_t>(x)];
            for (int ch = 0; ch < img.c; ++ch) {
                double acc = 0;
                for (size_t k = 0; k < t.w.size(); ++k)
                    acc += t.w[k] * img.at(y, t.first + static_cast<int>(k), ch);
                mid.at(y, x, ch) = acc;
            }
        }
    // vertical pass
    Image out(oh, ow, img.c);
    auto yt = build_taps(img.h, oh);
    for (int y = 0; y < oh; ++y) {
        const Taps& t = yt[static_cast<size_t>(y)];
        for (int x = 0; x < ow; ++x)
            for (int ch = 0; ch < img.c; ++ch) {
                double acc = 0;
                for (size_t k = 0; k < t.w.size(); ++k)
                    acc += t.w[k] * mid.at(t.first + static_cast<int>(k), x, ch);
                if (clamp01) acc = acc < 0 ? 0 : (acc > 1 ? 1 : acc);
                out.at(y, x, ch) = acc;
            }
    }
    return out;
}

Image bicubic_up2(const Image& img, bool clamp01) {
    check_contract(img.h >= 1 && img.w >= 1, "bicubic_up2: empty image");
    int oh = img.h * 2, ow = img.w * 2;

    Image mid(img.h, ow, img.c);
    auto xt = build_up_taps(img.w, ow);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < ow; ++x) {
            const Taps& t = xt[static_cast<size_t>(x)];
            for (int ch = 0; ch < img.c; ++ch) {
                double acc = 0;
                for (size_t k = 0; k < t.w.size(); ++k)
                    acc += t.w[k] * img.at(y, t.first + static_cast<int>(k), ch);
                mid.at(y, x, ch) = acc;
            }
        }
    Image out(oh, ow, img.c);
    auto yt = build_up_taps(img.h, oh);
    for (int y = 0; y < oh; ++y) {
        const Taps& t = yt[static_cast<size_t>(y)];
        for (int x = 0; x < ow; ++x)
            for (int ch = 0; ch < img.c; ++ch) {
                double acc = 0;
                for (size_t k = 0; k < t.w.size(); ++k)
                    acc += t.w[k] * mid.at(t.first + static_cast<int>(k), x, ch);
                if (clamp01) acc = acc < 0 ? 0 : (acc > 1 ? 1 : acc);
                out.at(y, x, ch) = acc;
            }
    }
    return out;
}

Image upsample_nearest2(const Image& img) {
    Image out(img.h * 2, img.w * 2, img.c);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(y / 2, x / 2, ch);
    return out;
}

Tensor image_to_tensor(const Image& img, bool requires_grad) {
    return Tensor::from(img.pix, {img.h, img.w, img.c}, requires_grad);
}

Image tensor_to_image(const Tensor& t) {
    check_shape(t.rank() == 3, "tensor_to_image: (H,W,C) required");
    Image img(t.dim(0), t.dim(1), t.dim(2));
    img.pix = t.values();
    return img;
}

} // namespace sdconet
