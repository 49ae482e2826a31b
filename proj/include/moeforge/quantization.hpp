// quantization.hpp - INT4 affine blocks with shared scale/zero-point, FP16 codec
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moeforge/matrix.hpp"

namespace moeforge {

// One quantized block: 4-bit codes packed two per byte (low nibble holds the
// even index), one scale and zero point shared by the whole block.
// Dequantized value = scale * (code - zero_point).
struct QuantBlock {
    std::vector<std::uint8_t> codes;  // packed nibbles
    double scale = 1.0;
    int zero_point = 0;  // in [0, 15]
    std::size_t count = 0;

    bool operator==(const QuantBlock&) const = default;
};

// scale = (max - min)/15 (1 when degenerate), zero_point = round(-min/scale)
// clamped to [0,15], codes = clamp(round(v/scale + zero_point), 0, 15) with
// round-half-to-even. Non-finite input is an error.
QuantBlock quantize_group(std::span<const double> values);

std::vector<double> dequantize_group(const QuantBlock& q);

// Nibble packing; odd-length blocks zero-pad the final high nibble.
std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes);
std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count);

// IEEE 754 binary16 with round-to-nearest-even; out-of-range values saturate
// to +-65504 and bump the overflow counter.
struct Fp16Payload {
    std::vector<std::uint16_t> bits;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t overflow_count = 0;
};

Fp16Payload encode_fp16(const Matrix& m);
Matrix decode_fp16(const Fp16Payload& payload);

std::uint16_t fp16_from_double(double v, std::size_t* overflow_counter = nullptr);
double fp16_to_double(std::uint16_t bits);

}  // namespace moeforge
