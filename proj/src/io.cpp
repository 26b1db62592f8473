#include "trisparse/io.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <limits>

namespace trisparse {

namespace {

static_assert(std::endian::native == std::endian::little, "tensor I/O assumes a little-endian host");

constexpr std::size_t kHeaderFixed = 7;  // magic + version + dtype + ndim

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype) {
    if (t.ndim() > 255) throw ShapeError("tensor rank exceeds 255");
    std::vector<std::uint8_t> out(kTensorMagic, kTensorMagic + 4);
    out.push_back(kTensorVersion);
    out.push_back(static_cast<std::uint8_t>(dtype));
    out.push_back(static_cast<std::uint8_t>(t.ndim()));
    for (std::size_t d : t.shape()) {
        if (d > std::numeric_limits<std::uint32_t>::max()) throw ShapeError("tensor dim exceeds u32");
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    const std::size_t width = dtype == DType::F32 ? 4 : 8;
    const std::size_t header = out.size();
    out.resize(header + t.size() * width);
    std::uint8_t* dst = out.data() + header;
    for (double v : t.data()) {
        if (dtype == DType::F32) {
            const auto f = static_cast<float>(v);
            std::memcpy(dst, &f, 4);
        } else {
            std::memcpy(dst, &v, 8);
        }
        dst += width;
    }
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < kHeaderFixed) throw FormatError("tensor header truncated", bytes.size());
    if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) throw FormatError("bad tensor magic, expected \"SPVT\"", 0);
    if (bytes[4] != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(bytes[4]), 4);
    const std::uint8_t code = bytes[5];
    if (code != static_cast<std::uint8_t>(DType::F32) && code != static_cast<std::uint8_t>(DType::F64)) {
        throw FormatError("unknown dtype code " + std::to_string(code), 5);
    }
    const std::size_t width = code == 1 ? 4 : 8;
    const std::size_t ndim = bytes[6];
    std::size_t pos = kHeaderFixed;
    if (bytes.size() < pos + 4 * ndim) throw FormatError("tensor dims truncated", bytes.size());
    Shape shape(ndim);
    std::size_t numel = 1;
    for (std::size_t i = 0; i < ndim; ++i, pos += 4) {
        shape[i] = get_u32(bytes.data() + pos);
        if (shape[i] != 0 && numel > std::numeric_limits<std::size_t>::max() / width / shape[i]) {
            throw FormatError("tensor dims overflow addressable size", pos);
        }
        numel *= shape[i];
    }
    const std::size_t expected = numel * width;
    const std::size_t actual = bytes.size() - pos;
    if (actual != expected) {
        throw FormatError("tensor payload size mismatch: expected " + std::to_string(expected) + " bytes, found " +
                              std::to_string(actual),
                          pos + std::min(actual, expected));
    }
    std::vector<double> data(numel);
    const std::uint8_t* src = bytes.data() + pos;
    for (std::size_t i = 0; i < numel; ++i, src += width) {
        if (width == 4) {
            float f;
            std::memcpy(&f, src, 4);
            data[i] = f;
        } else {
            std::memcpy(&data[i], src, 8);
        }
    }
    return Tensor(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
    write_file_bytes(path, encode_tensor(t, dtype));
}

Tensor read_tensor(const std::filesystem::path& path) {
    try {
        return decode_tensor(read_file_bytes(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what(), e.offset());
    }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to " + path.string());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return {bytes.begin(), bytes.end()};
}

void write_pnm(const std::filesystem::path& path, const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw ShapeError("PNM supports 1 or 3 channels");
    if (img.pixels.size() != img.width * img.height * img.channels) throw ShapeError("PNM pixel buffer size mismatch");
    const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                               std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
    write_file_bytes(path, bytes);
}

Image8 read_pnm(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    std::size_t pos = 0;
    auto skip_ws = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> std::size_t {
        skip_ws();
        const std::size_t start = pos;
        std::size_t v = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
            if (v > (1u << 24)) throw FormatError(path.string() + ": PNM dimension too large", start);
            ++pos;
        }
        if (pos == start) throw FormatError(path.string() + ": expected integer in PNM header", pos);
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw FormatError(path.string() + ": not a binary PGM/PPM", 0);
    }
    Image8 img;
    img.channels = bytes[1] == '5' ? 1 : 3;
    pos = 2;
    img.width = read_int();
    img.height = read_int();
    const std::size_t maxval = read_int();
    if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported", pos);
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(path.string() + ": malformed PNM header", pos);
    ++pos;
    const std::size_t expected = img.width * img.height * img.channels;
    if (bytes.size() - pos != expected) {
        throw FormatError(path.string() + ": PNM payload expected " + std::to_string(expected) + " bytes, found " +
                              std::to_string(bytes.size() - pos),
                          pos);
    }
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    return img;
}

}  // namespace trisparse
