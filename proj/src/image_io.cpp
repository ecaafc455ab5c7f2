#include "dcl/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <vector>

namespace dcl {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uint32_t crc =
        crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32(out, crc);
}

uint8_t paeth(uint8_t a, uint8_t b, uint8_t c) {
    int p = int(a) + int(b) - int(c);
    int pa = std::abs(p - int(a)), pb = std::abs(p - int(b)), pc = std::abs(p - int(c));
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

Tensor quantize_8bit(const Tensor& x) {
    if (!x.valid()) throw std::invalid_argument("quantize_8bit: empty tensor handle");
    Tensor out = from_data(x.shape(), x.data());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = std::round(std::clamp(out[i], 0.0, 1.0) * 255.0) / 255.0;
    return out;
}

double psnr(const Tensor& a, const Tensor& b) {
    if (!a.valid() || !b.valid()) throw std::invalid_argument("psnr: empty tensor handle");
    if (a.shape() != b.shape())
        throw std::invalid_argument("psnr: shape mismatch " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
    double mse = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

void write_png(const std::string& path, const Tensor& image) {
    if (!image.valid() || image.rank() != 3)
        throw std::invalid_argument("write_png: expected an [H x W x C] image");
    size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (c != 1 && c != 3)
        throw std::invalid_argument("write_png: " + std::to_string(c) +
                                    " channels; only grayscale (1) and RGB (3) are written");

    // filter byte 0 per scanline, then raw bytes
    std::vector<uint8_t> raw;
    raw.reserve(h * (1 + w * c));
    for (size_t y = 0; y < h; ++y) {
        raw.push_back(0);
        for (size_t x = 0; x < w * c; ++x) {
            double v = std::clamp(image[(y * w * c) + x], 0.0, 1.0);
            raw.push_back(static_cast<uint8_t>(std::lround(v * 255.0)));
        }
    }
    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> comp(comp_size);
    if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw std::runtime_error("write_png: deflate failed for " + path);
    comp.resize(comp_size);

    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(w));
    put_u32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);                      // bit depth
    ihdr.push_back(c == 3 ? 2 : 0);         // color type
    ihdr.push_back(0);                      // compression
    ihdr.push_back(0);                      // filter method
    ihdr.push_back(0);                      // no interlace

    std::vector<uint8_t> file = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    append_chunk(file, "IHDR", ihdr);
    append_chunk(file, "IDAT", comp);
    append_chunk(file, "IEND", {});

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_png: cannot open " + path);
    out.write(reinterpret_cast<const char*>(file.data()),
              static_cast<std::streamsize>(file.size()));
    if (!out) throw std::runtime_error("write_png: short write to " + path);
}

Tensor read_png(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_png: cannot open " + path);
    std::vector<uint8_t> file((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
        throw std::runtime_error("read_png: " + path + " is not a PNG file");

    size_t w = 0, h = 0, channels = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    while (pos + 8 <= file.size()) {
        uint32_t len = get_u32(&file[pos]);
        if (pos + 12 + len > file.size())
            throw std::runtime_error("read_png: truncated chunk in " + path);
        const char* type = reinterpret_cast<const char*>(&file[pos + 4]);
        const uint8_t* payload = &file[pos + 8];
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error("read_png: malformed header in " + path);
            w = get_u32(payload);
            h = get_u32(payload + 4);
            uint8_t depth = payload[8], color = payload[9], interlace = payload[12];
            if (depth != 8)
                throw std::runtime_error("read_png: only 8-bit depth supported, " + path +
                                         " has " + std::to_string(depth));
            if (interlace != 0)
                throw std::runtime_error("read_png: interlaced PNG not supported: " + path);
            switch (color) {
                case 0: channels = 1; break;
                case 2: channels = 3; break;
                case 6: channels = 4; break;
                default:
                    throw std::runtime_error("read_png: unsupported color type " +
                                             std::to_string(color) + " in " + path);
            }
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (w == 0 || h == 0 || channels == 0 || idat.empty())
        throw std::runtime_error("read_png: missing image data in " + path);

    size_t stride = w * channels;
    std::vector<uint8_t> raw(h * (1 + stride));
    uLongf raw_size = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
        raw_size != raw.size())
        throw std::runtime_error("read_png: inflate failed for " + path);

    // undo per-scanline filters in place; bpp = bytes per pixel
    size_t bpp = channels;
    std::vector<uint8_t> prev(stride, 0), cur(stride);
    Tensor out = zeros({h, w, channels});
    for (size_t y = 0; y < h; ++y) {
        uint8_t filter = raw[y * (1 + stride)];
        const uint8_t* line = &raw[y * (1 + stride) + 1];
        for (size_t x = 0; x < stride; ++x) {
            uint8_t a = x >= bpp ? cur[x - bpp] : 0;
            uint8_t b = prev[x];
            uint8_t cc = x >= bpp ? prev[x - bpp] : 0;
            uint8_t v;
            switch (filter) {
                case 0: v = line[x]; break;
                case 1: v = static_cast<uint8_t>(line[x] + a); break;
                case 2: v = static_cast<uint8_t>(line[x] + b); break;
                case 3: v = static_cast<uint8_t>(line[x] + (int(a) + int(b)) / 2); break;
                case 4: v = static_cast<uint8_t>(line[x] + paeth(a, b, cc)); break;
                default:
                    throw std::runtime_error("read_png: unknown filter " +
                                             std::to_string(filter) + " in " + path);
            }
            cur[x] = v;
            out[y * stride + x] = static_cast<double>(v) / 255.0;
        }
        std::swap(prev, cur);
    }
    return out;
}

}  // namespace dcl
