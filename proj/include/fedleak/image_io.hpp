#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedleak/tensor.hpp"

// Minimal 8-bit PNG reader/writer (gray, gray+alpha, RGB, RGBA; no interlace,
// no palette). zlib does the compression; filtering is handled here. Images
// cross this boundary as [C,H,W] tensors in [0,1].

namespace fedleak::img {

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void write_chunk(std::vector<unsigned char>& out, const char type[4], const unsigned char* data,
                        std::size_t len) {
    put_u32(out, static_cast<std::uint32_t>(len));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (len) out.insert(out.end(), data, data + len);
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
    put_u32(out, crc);
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 or 3 after alpha stripping
    std::vector<unsigned char> pixels;  // row-major, interleaved
};

inline std::vector<unsigned char> encode_png(const RawImage& im) {
    if (im.channels != 1 && im.channels != 3) throw std::invalid_argument("encode_png: channels must be 1 or 3");
    std::vector<unsigned char> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

    unsigned char ihdr[13];
    ihdr[0] = static_cast<unsigned char>(im.width >> 24);
    ihdr[1] = static_cast<unsigned char>(im.width >> 16);
    ihdr[2] = static_cast<unsigned char>(im.width >> 8);
    ihdr[3] = static_cast<unsigned char>(im.width);
    ihdr[4] = static_cast<unsigned char>(im.height >> 24);
    ihdr[5] = static_cast<unsigned char>(im.height >> 16);
    ihdr[6] = static_cast<unsigned char>(im.height >> 8);
    ihdr[7] = static_cast<unsigned char>(im.height);
    ihdr[8] = 8;                                            // bit depth
    ihdr[9] = im.channels == 1 ? 0 : 2;                     // color type
    ihdr[10] = ihdr[11] = ihdr[12] = 0;                     // compression/filter/interlace
    detail::write_chunk(out, "IHDR", ihdr, sizeof(ihdr));

    const std::size_t stride = static_cast<std::size_t>(im.width) * im.channels;
    std::vector<unsigned char> raw;
    raw.reserve((stride + 1) * static_cast<std::size_t>(im.height));
    for (int y = 0; y < im.height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), im.pixels.begin() + static_cast<std::ptrdiff_t>(y * stride),
                   im.pixels.begin() + static_cast<std::ptrdiff_t>((y + 1) * stride));
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("encode_png: deflate failed");
    compressed.resize(bound);
    detail::write_chunk(out, "IDAT", compressed.data(), compressed.size());
    detail::write_chunk(out, "IEND", nullptr, 0);
    return out;
}

inline RawImage decode_png(const std::vector<unsigned char>& bytes, const std::string& name = "<memory>") {
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw std::runtime_error("decode_png: " + name + ": not a PNG file");

    int width = 0, height = 0, bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<unsigned char> idat;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = detail::get_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("decode_png: " + name + ": truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const unsigned char* data = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            width = static_cast<int>(detail::get_u32(data));
            height = static_cast<int>(detail::get_u32(data + 4));
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (width <= 0 || height <= 0) throw std::runtime_error("decode_png: " + name + ": missing IHDR");
    if (bit_depth != 8) throw std::runtime_error("decode_png: " + name + ": only 8-bit PNGs supported");
    if (interlace != 0) throw std::runtime_error("decode_png: " + name + ": interlaced PNGs not supported");
    int src_channels;
    switch (color_type) {
        case 0: src_channels = 1; break;
        case 2: src_channels = 3; break;
        case 4: src_channels = 2; break;
        case 6: src_channels = 4; break;
        default: throw std::runtime_error("decode_png: " + name + ": unsupported color type");
    }

    const std::size_t stride = static_cast<std::size_t>(width) * src_channels;
    std::vector<unsigned char> raw((stride + 1) * static_cast<std::size_t>(height));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_len != raw.size())
        throw std::runtime_error("decode_png: " + name + ": inflate failed");

    // Undo per-row filters in place.
    std::vector<unsigned char> img(stride * static_cast<std::size_t>(height));
    const int bpp = src_channels;
    for (int y = 0; y < height; ++y) {
        const unsigned char filter = raw[(stride + 1) * static_cast<std::size_t>(y)];
        const unsigned char* src = raw.data() + (stride + 1) * static_cast<std::size_t>(y) + 1;
        unsigned char* dst = img.data() + stride * static_cast<std::size_t>(y);
        const unsigned char* prev = y > 0 ? img.data() + stride * static_cast<std::size_t>(y - 1) : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<std::size_t>(bpp) ? dst[x - bpp] : 0;
            const int b = prev ? prev[x] : 0;
            const int c = (prev && x >= static_cast<std::size_t>(bpp)) ? prev[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw std::runtime_error("decode_png: " + name + ": bad filter byte");
            }
            dst[x] = static_cast<unsigned char>(v & 0xff);
        }
    }

    RawImage out;
    out.width = width;
    out.height = height;
    if (src_channels == 1 || src_channels == 3) {
        out.channels = src_channels;
        out.pixels = std::move(img);
    } else {
        // Strip the alpha channel.
        out.channels = src_channels == 2 ? 1 : 3;
        out.pixels.resize(static_cast<std::size_t>(width) * height * out.channels);
        std::size_t j = 0;
        for (std::size_t i = 0; i < img.size(); i += src_channels)
            for (int ch = 0; ch < out.channels; ++ch) out.pixels[j++] = img[i + static_cast<std::size_t>(ch)];
    }
    return out;
}

inline RawImage read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_png: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_png(bytes, path);
}

inline void write_png(const std::string& path, const RawImage& im) {
    const auto bytes = encode_png(im);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_png: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write_png: short write to " + path);
}

// --- tensor conversions ---

inline Tensor to_tensor(const RawImage& im) {
    Tensor t(Shape{im.channels, im.height, im.width});
    for (int c = 0; c < im.channels; ++c)
        for (int y = 0; y < im.height; ++y)
            for (int x = 0; x < im.width; ++x)
                t.at3(c, y, x) =
                    im.pixels[(static_cast<std::size_t>(y) * im.width + x) * im.channels + static_cast<std::size_t>(c)] /
                    255.0;
    return t;
}

inline RawImage from_tensor(const Tensor& t) {
    if (t.ndim() != 3) throw std::invalid_argument("from_tensor: expected [C,H,W]");
    RawImage im;
    im.channels = t.dim(0);
    im.height = t.dim(1);
    im.width = t.dim(2);
    im.pixels.resize(static_cast<std::size_t>(im.channels) * im.height * im.width);
    for (int c = 0; c < im.channels; ++c)
        for (int y = 0; y < im.height; ++y)
            for (int x = 0; x < im.width; ++x) {
                double v = t.at3(c, y, x);
                v = std::min(1.0, std::max(0.0, v));
                im.pixels[(static_cast<std::size_t>(y) * im.width + x) * im.channels + static_cast<std::size_t>(c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    return im;
}

inline Tensor load_image(const std::string& path) { return to_tensor(read_png(path)); }
inline void save_image(const std::string& path, const Tensor& t) { write_png(path, from_tensor(t)); }

// Bilinear resize of a [C,H,W] tensor.
inline Tensor resize_bilinear(const Tensor& src, int out_h, int out_w) {
    const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
    if (h == out_h && w == out_w) return src;
    Tensor out(Shape{c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < out_h; ++y) {
            const double sy = out_h > 1 ? static_cast<double>(y) * (h - 1) / (out_h - 1) : 0.0;
            const int y0 = static_cast<int>(sy);
            const int y1 = std::min(y0 + 1, h - 1);
            const double fy = sy - y0;
            for (int x = 0; x < out_w; ++x) {
                const double sx = out_w > 1 ? static_cast<double>(x) * (w - 1) / (out_w - 1) : 0.0;
                const int x0 = static_cast<int>(sx);
                const int x1 = std::min(x0 + 1, w - 1);
                const double fx = sx - x0;
                out.at3(ch, y, x) = (1 - fy) * ((1 - fx) * src.at3(ch, y0, x0) + fx * src.at3(ch, y0, x1)) +
                                    fy * ((1 - fx) * src.at3(ch, y1, x0) + fx * src.at3(ch, y1, x1));
            }
        }
    return out;
}

// Gray <-> color conversions used when a dataset pins the channel count.
inline Tensor convert_channels(const Tensor& src, int channels) {
    if (src.dim(0) == channels) return src;
    const int h = src.dim(1), w = src.dim(2);
    Tensor out(Shape{channels, h, w});
    if (src.dim(0) == 1) {
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) out.at3(c, y, x) = src.at3(0, y, x);
    } else if (channels == 1) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int c = 0; c < src.dim(0); ++c) s += src.at3(c, y, x);
                out.at3(0, y, x) = s / src.dim(0);
            }
    } else {
        throw std::invalid_argument("convert_channels: unsupported conversion");
    }
    return out;
}

}  // namespace fedleak::img
