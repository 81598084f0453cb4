#include "bpim/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace bpim::image {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw std::runtime_error(path.string() + " is not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialisation failed");
    }
    std::vector<png_bytep> rows;
    std::vector<unsigned char> buf;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("failed to decode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    buf.resize(stride * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Tensor img({3, static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)});
    const std::int64_t plane = static_cast<std::int64_t>(w) * h;
    for (png_uint_32 y = 0; y < h; ++y)
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img[c * plane + static_cast<std::int64_t>(y) * w + x] = buf[y * stride + x * 3 + c] / 255.0;
    return img;
}

void write_png(const std::filesystem::path& path, const Tensor& img) {
    require(img.rank() == 3 && img.dim(0) == 3, "write_png: expected [3, H, W]");
    const std::int64_t h = img.dim(1), w = img.dim(2), plane = h * w;
    std::vector<unsigned char> buf(static_cast<std::size_t>(plane * 3));
    for (std::int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            buf[static_cast<std::size_t>(i * 3 + c)] =
                static_cast<unsigned char>(std::lround(std::clamp(img[c * plane + i], 0.0, 1.0) * 255.0));

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialisation failed");
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (std::int64_t y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + y * w * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("failed to encode " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor resize_bilinear(const Tensor& img, std::int64_t oh, std::int64_t ow) {
    require(img.rank() == 3, "resize_bilinear: expected [C, H, W]");
    require(oh > 0 && ow > 0, "resize_bilinear: target size must be positive");
    const std::int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (oh == h && ow == w) return img;
    Tensor out({c, oh, ow});
    const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
    for (std::int64_t y = 0; y < oh; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const auto y0 = static_cast<std::int64_t>(fy);
        const std::int64_t y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - y0;
        for (std::int64_t x = 0; x < ow; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const auto x0 = static_cast<std::int64_t>(fx);
            const std::int64_t x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - x0;
            for (std::int64_t k = 0; k < c; ++k) {
                const double* p = img.ptr() + k * h * w;
                const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
                const double bot = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
                out[(k * oh + y) * ow + x] = top * (1 - ty) + bot * ty;
            }
        }
    }
    return out;
}

void draw_rect(Tensor& img, std::int64_t x1, std::int64_t y1, std::int64_t x2, std::int64_t y2, const Rgb& color,
               int thickness) {
    require(img.rank() == 3 && img.dim(0) == 3, "draw_rect: expected [3, H, W]");
    const std::int64_t h = img.dim(1), w = img.dim(2);
    auto put = [&](std::int64_t x, std::int64_t y) {
        if (x < 0 || y < 0 || x >= w || y >= h) return;
        for (int c = 0; c < 3; ++c) img[(c * h + y) * w + x] = color[static_cast<std::size_t>(c)];
    };
    for (int t = 0; t < thickness; ++t) {
        for (std::int64_t x = x1; x < x2; ++x) {
            put(x, y1 + t);
            put(x, y2 - 1 - t);
        }
        for (std::int64_t y = y1; y < y2; ++y) {
            put(x1 + t, y);
            put(x2 - 1 - t, y);
        }
    }
}

std::array<std::int64_t, 4> pixel_corners(const geometry::Box& box, std::int64_t width, std::int64_t height) {
    auto clampi = [](double v, std::int64_t hi) {
        return std::clamp<std::int64_t>(static_cast<std::int64_t>(v), 0, hi);
    };
    return {clampi(std::floor(box.x1() * width + 1e-9), width), clampi(std::floor(box.y1() * height + 1e-9), height),
            clampi(std::ceil(box.x2() * width - 1e-9), width), clampi(std::ceil(box.y2() * height - 1e-9), height)};
}

Rgb class_color(int cls) {
    static constexpr Rgb palette[] = {{1.0, 0.22, 0.22}, {0.2, 0.85, 0.3}, {0.25, 0.45, 1.0},
                                      {1.0, 0.8, 0.1},   {0.8, 0.3, 0.9},  {0.1, 0.85, 0.85}};
    return palette[static_cast<std::size_t>(cls) % std::size(palette)];
}

}  // namespace bpim::image
