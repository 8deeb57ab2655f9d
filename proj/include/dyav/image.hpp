#pragma once

#include <dyav/core.hpp>

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace dyav {

// Planar-free interleaved image, row-major, `channels` floats per pixel.
struct Image {
    int h = 0, w = 0, channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h_, int w_, int c_, float fill = 0.f)
        : h(h_), w(w_), channels(c_),
          data(static_cast<size_t>(h_) * w_ * c_, fill) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * w + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * w + x) * channels + c];
    }
    size_t numel() const { return data.size(); }
};

inline Image resize_bilinear(const Image& src, int h, int w) {
    check(src.h > 0 && src.w > 0, "resize: empty image");
    Image out(h, w, src.channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float sy = (float(y) + 0.5f) * float(src.h) / float(h) - 0.5f;
            float sx = (float(x) + 0.5f) * float(src.w) / float(w) - 0.5f;
            int y0 = int(std::floor(sy)), x0 = int(std::floor(sx));
            float fy = sy - float(y0), fx = sx - float(x0);
            auto cl = [](int v, int hi) { return std::min(std::max(v, 0), hi - 1); };
            int y1 = cl(y0 + 1, src.h), x1 = cl(x0 + 1, src.w);
            y0 = cl(y0, src.h);
            x0 = cl(x0, src.w);
            for (int c = 0; c < src.channels; ++c)
                out.at(y, x, c) = (1 - fy) * ((1 - fx) * src.at(y0, x0, c) + fx * src.at(y0, x1, c)) +
                                  fy * ((1 - fx) * src.at(y1, x0, c) + fx * src.at(y1, x1, c));
        }
    return out;
}

namespace detail {

inline void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

inline uint32_t get_u32be(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
           (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void png_chunk(std::vector<uint8_t>& out, const char type[4],
                      const uint8_t* payload, size_t n) {
    put_u32be(out, uint32_t(n));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload, payload + n);
    uint32_t crc = crc32(0L, out.data() + start, uInt(4 + n));
    put_u32be(out, crc);
}

inline std::vector<uint8_t> zlib_deflate(const uint8_t* src, size_t n) {
    uLongf bound = compressBound(uLong(n));
    std::vector<uint8_t> out(bound);
    check(compress2(out.data(), &bound, src, uLong(n), 6) == Z_OK,
          "zlib compression failed");
    out.resize(bound);
    return out;
}

inline std::vector<uint8_t> zlib_inflate(const uint8_t* src, size_t n,
                                         size_t expected) {
    std::vector<uint8_t> out(expected);
    uLongf dst = uLongf(expected);
    int rc = uncompress(out.data(), &dst, src, uLong(n));
    check(rc == Z_OK && dst == expected, "zlib decompression failed");
    return out;
}

inline uint8_t paeth(uint8_t a, uint8_t b, uint8_t c) {
    int p = int(a) + int(b) - int(c);
    int pa = std::abs(p - int(a)), pb = std::abs(p - int(b)),
        pc = std::abs(p - int(c));
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

// Encodes an image as 8-bit PNG (gray, RGB, or RGBA by channel count).
// Values are clamped to [0,1] and rounded to the nearest byte.
inline std::vector<uint8_t> encode_png(const Image& img) {
    check(img.channels == 1 || img.channels == 3 || img.channels == 4,
          "encode_png: unsupported channel count " +
              std::to_string(img.channels));
    check(img.h > 0 && img.w > 0, "encode_png: empty image");
    const int c = img.channels;
    const size_t stride = size_t(img.w) * c;
    std::vector<uint8_t> raw((stride + 1) * img.h);
    for (int y = 0; y < img.h; ++y) {
        uint8_t* row = raw.data() + size_t(y) * (stride + 1);
        row[0] = 0;  // filter: none
        for (size_t i = 0; i < stride; ++i) {
            float v = img.data[size_t(y) * stride + i];
            v = std::min(1.f, std::max(0.f, v));
            row[1 + i] = uint8_t(std::lround(v * 255.f));
        }
    }
    std::vector<uint8_t> idat = detail::zlib_deflate(raw.data(), raw.size());

    std::vector<uint8_t> out;
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.insert(out.end(), sig, sig + 8);
    uint8_t ihdr[13];
    ihdr[0] = uint8_t(uint32_t(img.w) >> 24);
    ihdr[1] = uint8_t(uint32_t(img.w) >> 16);
    ihdr[2] = uint8_t(uint32_t(img.w) >> 8);
    ihdr[3] = uint8_t(uint32_t(img.w));
    ihdr[4] = uint8_t(uint32_t(img.h) >> 24);
    ihdr[5] = uint8_t(uint32_t(img.h) >> 16);
    ihdr[6] = uint8_t(uint32_t(img.h) >> 8);
    ihdr[7] = uint8_t(uint32_t(img.h));
    ihdr[8] = 8;                                   // bit depth
    ihdr[9] = c == 1 ? 0 : (c == 3 ? 2 : 6);       // color type
    ihdr[10] = ihdr[11] = ihdr[12] = 0;            // deflate/adaptive/none
    detail::png_chunk(out, "IHDR", ihdr, 13);
    detail::png_chunk(out, "IDAT", idat.data(), idat.size());
    detail::png_chunk(out, "IEND", nullptr, 0);
    return out;
}

inline Image decode_png(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    check(bytes.size() > 8 && std::memcmp(bytes.data(), sig, 8) == 0,
          "decode_png: bad signature");
    size_t pos = 8;
    int w = 0, h = 0, channels = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        uint32_t len = detail::get_u32be(bytes.data() + pos);
        check(pos + 12 + len <= bytes.size(), "decode_png: truncated chunk");
        std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4),
                         4);
        const uint8_t* payload = bytes.data() + pos + 8;
        if (type == "IHDR") {
            check(len == 13, "decode_png: bad IHDR");
            w = int(detail::get_u32be(payload));
            h = int(detail::get_u32be(payload + 4));
            check(payload[8] == 8, "decode_png: only 8-bit depth supported");
            int ct = payload[9];
            channels = ct == 0 ? 1 : (ct == 2 ? 3 : (ct == 6 ? 4 : -1));
            check(channels > 0, "decode_png: unsupported color type");
            check(payload[12] == 0, "decode_png: interlacing unsupported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    check(w > 0 && h > 0 && !idat.empty(), "decode_png: missing chunks");

    const size_t stride = size_t(w) * channels;
    std::vector<uint8_t> raw =
        detail::zlib_inflate(idat.data(), idat.size(), (stride + 1) * h);

    Image img(h, w, channels);
    std::vector<uint8_t> prev(stride, 0), cur(stride);
    const int bpp = channels;  // bytes per pixel at 8-bit depth
    for (int y = 0; y < h; ++y) {
        const uint8_t* row = raw.data() + size_t(y) * (stride + 1);
        uint8_t filter = row[0];
        for (size_t i = 0; i < stride; ++i) {
            uint8_t x = row[1 + i];
            uint8_t a = i >= size_t(bpp) ? cur[i - bpp] : 0;
            uint8_t b = prev[i];
            uint8_t cc = i >= size_t(bpp) ? prev[i - bpp] : 0;
            switch (filter) {
                case 0: break;
                case 1: x = uint8_t(x + a); break;
                case 2: x = uint8_t(x + b); break;
                case 3: x = uint8_t(x + (int(a) + int(b)) / 2); break;
                case 4: x = uint8_t(x + detail::paeth(a, b, cc)); break;
                default: check(false, "decode_png: bad filter byte");
            }
            cur[i] = x;
            img.data[size_t(y) * stride + i] = float(x) / 255.f;
        }
        std::swap(prev, cur);
    }
    return img;
}

inline void save_png(const std::string& path, const Image& img) {
    auto bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    check(bool(f), "save_png: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
    check(bool(f), "save_png: write failed for " + path);
}

inline Image load_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(bool(f), "load_png: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

// Raw f32 dump: header "DYIM" + h,w,c as little-endian u32, then row-major
// little-endian f32 payload. Used by test oracles where PNG quantization
// would mask sub-8-bit differences.
inline void save_raw(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    check(bool(f), "save_raw: cannot open " + path);
    f.write("DYIM", 4);
    uint32_t dims[3] = {uint32_t(img.h), uint32_t(img.w),
                        uint32_t(img.channels)};
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    f.write(reinterpret_cast<const char*>(img.data.data()),
            std::streamsize(img.data.size() * sizeof(float)));
    check(bool(f), "save_raw: write failed for " + path);
}

inline Image load_raw(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(bool(f), "load_raw: cannot open " + path);
    char magic[4];
    uint32_t dims[3];
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(dims), sizeof(dims));
    check(bool(f) && std::memcmp(magic, "DYIM", 4) == 0,
          "load_raw: bad header in " + path);
    Image img(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
              static_cast<int>(dims[2]));
    f.read(reinterpret_cast<char*>(img.data.data()),
           std::streamsize(img.data.size() * sizeof(float)));
    check(bool(f), "load_raw: truncated payload in " + path);
    return img;
}

}  // namespace dyav
