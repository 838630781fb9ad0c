#pragma once

#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "msflow/error.hpp"
#include "msflow/tensor.hpp"

namespace msflow {

// TensorFile layout (all integers u32 little-endian):
//   "MSFT" | version | dtype | ndim | dims[ndim] | f32 payload, row-major

inline constexpr std::array<char, 4> kTensorMagic{'M', 'S', 'F', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 0;
inline constexpr std::uint32_t kMaxTensorRank = 8;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io, "short write to " + path.string());
}

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const Tensor<float>& t) {
    std::vector<unsigned char> out(kTensorMagic.begin(), kTensorMagic.end());
    detail::put_u32(out, kTensorVersion);
    detail::put_u32(out, kDtypeF32);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.dims()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    out.reserve(out.size() + 4 * t.size());
    for (float v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

/// Parses a TensorFile image held in memory. `source` names it in errors.
inline Tensor<float> decode_tensor(const std::vector<unsigned char>& bytes, const std::string& source = "buffer") {
    using Kind = FormatError::Kind;
    if (bytes.size() < 16) throw FormatError(Kind::truncated, source + ": truncated header");
    if (std::memcmp(bytes.data(), kTensorMagic.data(), 4) != 0) throw FormatError(Kind::bad_magic, source + ": bad magic");
    const std::uint32_t version = detail::get_u32(bytes.data() + 4);
    if (version != kTensorVersion) {
        throw FormatError(Kind::bad_version, source + ": unsupported version " + std::to_string(version));
    }
    const std::uint32_t dtype = detail::get_u32(bytes.data() + 8);
    if (dtype != kDtypeF32) {
        throw FormatError(Kind::unsupported_dtype, source + ": unsupported dtype " + std::to_string(dtype));
    }
    const std::uint32_t ndim = detail::get_u32(bytes.data() + 12);
    if (ndim == 0 || ndim > kMaxTensorRank) {
        throw FormatError(Kind::bad_header, source + ": invalid rank " + std::to_string(ndim));
    }
    const std::size_t header = 16 + 4 * static_cast<std::size_t>(ndim);
    if (bytes.size() < header) throw FormatError(Kind::truncated, source + ": truncated header");
    Shape dims(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i) {
        dims[i] = detail::get_u32(bytes.data() + 16 + 4 * i);
        if (dims[i] == 0) throw FormatError(Kind::bad_header, source + ": zero-sized dimension");
    }
    const std::size_t n = shape_numel(dims);
    const std::size_t expected = header + 4 * n;
    if (bytes.size() < expected) {
        throw FormatError(Kind::truncated, source + ": truncated payload (" + std::to_string(bytes.size() - header) +
                                               " of " + std::to_string(4 * n) + " bytes)");
    }
    if (bytes.size() > expected) throw FormatError(Kind::bad_header, source + ": trailing bytes after payload");
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + header + 4 * i));
    return Tensor<float>(std::move(dims), std::move(values));
}

inline void write_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
    detail::write_file(path, encode_tensor(t));
}

inline Tensor<float> read_tensor(const std::filesystem::path& path) {
    return decode_tensor(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Netpbm images: P6 (RGB) and P5 (gray), maxval <= 255.

namespace detail {

inline std::size_t pnm_token(const std::vector<unsigned char>& b, std::size_t& pos, const std::string& source) {
    for (;;) {
        while (pos < b.size() && std::isspace(b[pos])) ++pos;
        if (pos < b.size() && b[pos] == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    std::size_t v = 0, digits = 0;
    while (pos < b.size() && std::isdigit(b[pos])) {
        v = v * 10 + static_cast<std::size_t>(b[pos++] - '0');
        if (++digits > 9) break;
    }
    if (digits == 0 || digits > 9) throw FormatError(FormatError::Kind::bad_header, source + ": malformed netpbm header");
    return v;
}

}  // namespace detail

/// Reads a P6 or P5 file into [channels, H, W] with values in [0, 1].
inline Tensor<float> read_pnm(const std::filesystem::path& path) {
    using Kind = FormatError::Kind;
    const auto b = detail::read_file(path);
    const std::string source = path.string();
    if (b.size() < 2 || b[0] != 'P' || (b[1] != '6' && b[1] != '5')) {
        throw FormatError(Kind::bad_magic, source + ": not a binary PPM/PGM file");
    }
    const std::size_t channels = b[1] == '6' ? 3 : 1;
    std::size_t pos = 2;
    const std::size_t w = detail::pnm_token(b, pos, source);
    const std::size_t h = detail::pnm_token(b, pos, source);
    const std::size_t maxval = detail::pnm_token(b, pos, source);
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
        throw FormatError(Kind::unsupported_dtype, source + ": only 8-bit images of positive size are supported");
    }
    if (pos >= b.size() || !std::isspace(b[pos])) throw FormatError(Kind::bad_header, source + ": malformed header");
    ++pos;
    const std::size_t n = channels * h * w;
    if (b.size() - pos < n) throw FormatError(Kind::truncated, source + ": truncated pixel data");
    Tensor<float> img({channels, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < channels; ++c)
                img.at(c, y, x) = static_cast<float>(b[pos + (y * w + x) * channels + c]) / static_cast<float>(maxval);
    return img;
}

/// Writes [3,H,W] as P6 or [1,H,W] / [H,W] as P5; values are clamped to [0,1].
inline void write_pnm(const std::filesystem::path& path, const Tensor<float>& img) {
    const std::size_t channels = img.rank() == 2 ? 1 : img.channels();
    if ((img.rank() != 2 && img.rank() != 3) || (channels != 1 && channels != 3)) {
        throw ShapeError("write_pnm: expected [1|3,H,W] or [H,W], got " + shape_string(img.dims()));
    }
    const std::size_t h = img.height(), w = img.width();
    const std::string header =
        std::string(channels == 3 ? "P6" : "P5") + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    out.reserve(out.size() + channels * h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                const float v = img[(c * h + y) * w + x];
                const float clamped = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
                out.push_back(static_cast<unsigned char>(std::lround(clamped * 255.f)));
            }
        }
    }
    detail::write_file(path, out);
}

}  // namespace msflow
