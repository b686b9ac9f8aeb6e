#pragma once

// 8-bit PNG writing for preview and turntable frames (grayscale or rgb,
// unfiltered scanlines, zlib-deflated IDAT), plus a reader restricted to
// that same subset so tests can round-trip what we emit.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "common.hpp"
#include "image.hpp"

namespace csplat {

namespace detail {

inline void png_be32(std::string& out, std::uint32_t v)
{
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

inline std::uint32_t png_read_be32(const unsigned char* p)
{
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

inline void png_chunk(std::string& out, const char type[5], const std::string& payload)
{
    png_be32(out, static_cast<std::uint32_t>(payload.size()));
    std::string body = type + payload;
    out += body;
    const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                           static_cast<uInt>(body.size()));
    png_be32(out, static_cast<std::uint32_t>(crc));
}

inline std::string zlib_deflate(const std::string& raw)
{
    uLongf cap = compressBound(static_cast<uLong>(raw.size()));
    std::string out(cap, '\0');
    if (compress2(reinterpret_cast<Bytef*>(out.data()), &cap,
                  reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                  Z_BEST_SPEED) != Z_OK)
        throw IoError("png: deflate failed");
    out.resize(cap);
    return out;
}

} // namespace detail

inline constexpr char kPngSignature[8] = {'\x89', 'P', 'N', 'G', '\r', '\n', '\x1a', '\n'};

// Values are clamped to [0,1] and quantized to 8 bits. 1 channel writes
// grayscale, 3 channels rgb.
inline std::string encode_png(const Image& img)
{
    if (img.c != 1 && img.c != 3)
        throw ValidationError("png: only 1- or 3-channel images are supported");
    if (img.h < 1 || img.w < 1) throw ValidationError("png: empty image");

    std::string raw;
    raw.reserve(static_cast<size_t>(img.h) * (1 + static_cast<size_t>(img.w) * img.c));
    for (int y = 0; y < img.h; ++y) {
        raw.push_back('\0'); // filter: none
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) {
                const double v = std::clamp(img.at(y, x, ch), 0.0, 1.0);
                raw.push_back(static_cast<char>(std::lround(v * 255.0)));
            }
    }

    std::string ihdr;
    detail::png_be32(ihdr, static_cast<std::uint32_t>(img.w));
    detail::png_be32(ihdr, static_cast<std::uint32_t>(img.h));
    ihdr.push_back(8);                        // bit depth
    ihdr.push_back(img.c == 3 ? 2 : 0);       // color type: rgb / grayscale
    ihdr.push_back(0);                        // compression
    ihdr.push_back(0);                        // filter method
    ihdr.push_back(0);                        // no interlace

    std::string out(kPngSignature, 8);
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT", detail::zlib_deflate(raw));
    detail::png_chunk(out, "IEND", "");
    return out;
}

// Reads only what encode_png emits: 8-bit grayscale/rgb, filter 0 scanlines.
inline Image decode_png(const std::string& bytes)
{
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSignature, 8) != 0)
        throw ParseError("png: bad signature");

    int w = 0, h = 0, channels = 0;
    bool ended = false;
    std::string idat;
    size_t pos = 8;
    while (pos + 12 <= bytes.size()) {
        const std::uint32_t len = detail::png_read_be32(p + pos);
        if (pos + 12 + len > bytes.size()) throw ParseError("png: truncated chunk");
        const std::string type(bytes, pos + 4, 4);
        const auto crc_got = detail::png_read_be32(p + pos + 8 + len);
        const auto crc_want = crc32(0L, p + pos + 4, static_cast<uInt>(4 + len));
        if (crc_got != static_cast<std::uint32_t>(crc_want))
            throw ParseError("png: crc mismatch in " + type);
        if (type == "IHDR") {
            if (len != 13) throw ParseError("png: bad IHDR length");
            w = static_cast<int>(detail::png_read_be32(p + pos + 8));
            h = static_cast<int>(detail::png_read_be32(p + pos + 12));
            const int depth = p[pos + 16], color = p[pos + 17], interlace = p[pos + 20];
            if (depth != 8 || (color != 0 && color != 2) || interlace != 0)
                throw ParseError("png: unsupported format (reader handles own output only)");
            channels = color == 2 ? 3 : 1;
        } else if (type == "IDAT") {
            idat.append(bytes, pos + 8, len);
        } else if (type == "IEND") {
            ended = true;
            break;
        }
        pos += 12 + len;
    }
    if (!ended) throw ParseError("png: stream ends before IEND");
    if (w < 1 || h < 1 || channels == 0) throw ParseError("png: missing IHDR");

    const size_t raw_size = static_cast<size_t>(h) * (1 + static_cast<size_t>(w) * channels);
    std::string raw(raw_size, '\0');
    uLongf got = static_cast<uLongf>(raw_size);
    if (uncompress(reinterpret_cast<Bytef*>(raw.data()), &got,
                   reinterpret_cast<const Bytef*>(idat.data()),
                   static_cast<uLong>(idat.size())) != Z_OK ||
        got != raw_size)
        throw ParseError("png: inflate failed");

    Image img(h, w, channels);
    for (int y = 0; y < h; ++y) {
        const size_t row = static_cast<size_t>(y) * (1 + static_cast<size_t>(w) * channels);
        if (raw[row] != 0) throw ParseError("png: unsupported scanline filter");
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < channels; ++ch)
                img.at(y, x, ch) =
                    static_cast<unsigned char>(raw[row + 1 + static_cast<size_t>(x) * channels + ch]) /
                    255.0;
    }
    return img;
}

inline void write_png(const std::filesystem::path& path, const Image& img)
{
    const std::string bytes = encode_png(img);
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw IoError("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) throw IoError("short write: " + path.string());
}

} // namespace csplat
