#include "haarnet/pnm.hpp"

#include <fstream>

namespace haarnet {

namespace {

struct ByteReader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;
    const std::string& origin;

    int peek() const { return pos < buf.size() ? buf[pos] : -1; }
    int get() { return pos < buf.size() ? buf[pos++] : -1; }

    void skip_space_and_comments() {
        while (pos < buf.size()) {
            const int c = peek();
            if (c == '#') {
                while (pos < buf.size() && get() != '\n') {
                }
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    int64_t read_int(const char* what) {
        skip_space_and_comments();
        if (pos >= buf.size() || peek() < '0' || peek() > '9') {
            throw FormatError(origin + ": expected " + std::string(what) + " at byte offset " +
                              std::to_string(pos));
        }
        int64_t v = 0;
        while (pos < buf.size() && peek() >= '0' && peek() <= '9') {
            v = v * 10 + (get() - '0');
        }
        return v;
    }
};

}  // namespace

Tensor decode_pnm(const std::vector<uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 2) throw FormatError(origin + ": too short for a PNM header");
    const char m0 = static_cast<char>(bytes[0]);
    const char m1 = static_cast<char>(bytes[1]);
    if (m0 != 'P' || (m1 != '5' && m1 != '6')) {
        if (m0 == 'P' && (m1 == '2' || m1 == '3')) {
            throw FormatError(origin + ": ASCII PNM variants are unsupported (use binary P5/P6)");
        }
        throw FormatError(origin + ": not a binary PGM/PPM file");
    }
    const int64_t channels = m1 == '5' ? 1 : 3;
    ByteReader r{bytes, 2, origin};
    const int64_t w = r.read_int("width");
    const int64_t h = r.read_int("height");
    const int64_t maxval = r.read_int("maxval");
    if (maxval != 255) {
        throw FormatError(origin + ": unsupported maxval " + std::to_string(maxval) + " (only 255)");
    }
    // Exactly one whitespace byte separates the header from the raster.
    const int sep = r.get();
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') {
        throw FormatError(origin + ": missing whitespace before raster data");
    }
    if (w < 1 || h < 1) throw FormatError(origin + ": empty raster " + std::to_string(w) + "x" + std::to_string(h));
    const size_t expected = static_cast<size_t>(w * h * channels);
    if (bytes.size() - r.pos < expected) {
        throw FormatError(origin + ": truncated raster (expected " + std::to_string(expected) +
                          " bytes, have " + std::to_string(bytes.size() - r.pos) + ")");
    }
    std::vector<float> data(static_cast<size_t>(channels * h * w));
    const uint8_t* px = bytes.data() + r.pos;
    // PNM rasters interleave channels per pixel; tensors are planar.
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            for (int64_t c = 0; c < channels; ++c) {
                data[static_cast<size_t>((c * h + y) * w + x)] =
                    static_cast<float>(px[(y * w + x) * channels + c]) / 255.0f;
            }
        }
    }
    return Tensor::from_vector({1, channels, h, w}, std::move(data));
}

Tensor load_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_pnm(bytes, path);
}

namespace {

void write_pnm(const std::string& path, const char* magic, const std::vector<uint8_t>& raster, int64_t h,
               int64_t w, int64_t channels) {
    if (static_cast<int64_t>(raster.size()) != h * w * channels) {
        throw ContractError(path + ": raster length does not match extents");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path + ": cannot open for writing");
    out << magic << "\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
    if (!out) throw IoError(path + ": write failed");
}

}  // namespace

void save_pgm(const std::string& path, const std::vector<uint8_t>& gray, int64_t h, int64_t w) {
    write_pnm(path, "P5", gray, h, w, 1);
}

void save_ppm(const std::string& path, const std::vector<uint8_t>& rgb, int64_t h, int64_t w) {
    write_pnm(path, "P6", rgb, h, w, 3);
}

}  // namespace haarnet
