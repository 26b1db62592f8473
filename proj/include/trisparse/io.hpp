#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "trisparse/tensor.hpp"

namespace trisparse {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

// Binary tensor file:
//   "SPVT" | u8 version (1) | u8 dtype (1=f32, 2=f64) | u8 ndim | ndim x u32 LE dims | LE payload
inline constexpr char kTensorMagic[4] = {'S', 'P', 'V', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype = DType::F64);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::F64);
Tensor read_tensor(const std::filesystem::path& path);

/// 8-bit raster with interleaved channels (1 for PGM, 3 for PPM).
struct Image8 {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 1;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
    friend bool operator==(const Image8&, const Image8&) = default;
};

/// Binary PGM (P5) / PPM (P6), maxval 255.
void write_pnm(const std::filesystem::path& path, const Image8& img);
Image8 read_pnm(const std::filesystem::path& path);

/// Whole-file helpers.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace trisparse
