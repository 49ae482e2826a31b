#include "moeforge/quantization.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace moeforge {

namespace {

// round-half-to-even, independent of the ambient FP rounding mode
double round_even(double v) {
    const double r = std::nearbyint(v);
    if (std::abs(v - std::trunc(v)) == 0.5) {
        const double lo = std::floor(v), hi = std::ceil(v);
        return std::fmod(lo, 2.0) == 0.0 ? lo : hi;
    }
    return r;
}

}  // namespace

QuantBlock quantize_group(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("quantize_group: empty block");
    double lo = values[0], hi = values[0];
    for (double v : values) {
        if (!std::isfinite(v)) throw std::invalid_argument("quantize_group: non-finite value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    QuantBlock q;
    q.count = values.size();
    q.scale = hi == lo ? 1.0 : (hi - lo) / 15.0;
    q.zero_point = static_cast<int>(std::clamp(round_even(-lo / q.scale), 0.0, 15.0));
    std::vector<std::uint8_t> codes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double c = round_even(values[i] / q.scale + q.zero_point);
        codes[i] = static_cast<std::uint8_t>(std::clamp(c, 0.0, 15.0));
    }
    q.codes = pack_nibbles(codes);
    return q;
}

std::vector<double> dequantize_group(const QuantBlock& q) {
    const std::vector<std::uint8_t> codes = unpack_nibbles(q.codes, q.count);
    std::vector<double> out(q.count);
    for (std::size_t i = 0; i < q.count; ++i)
        out[i] = q.scale * (static_cast<int>(codes[i]) - q.zero_point);
    return out;
}

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
    std::vector<std::uint8_t> packed((codes.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > 15) throw std::invalid_argument("pack_nibbles: code out of range");
        if (i % 2 == 0)
            packed[i / 2] = codes[i];
        else
            packed[i / 2] |= static_cast<std::uint8_t>(codes[i] << 4);
    }
    return packed;
}

std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed,
                                         std::size_t count) {
    if (packed.size() != (count + 1) / 2)
        throw std::invalid_argument("unpack_nibbles: packed length mismatch");
    std::vector<std::uint8_t> codes(count);
    for (std::size_t i = 0; i < count; ++i)
        codes[i] = i % 2 == 0 ? (packed[i / 2] & 0x0F) : (packed[i / 2] >> 4);
    return codes;
}

std::uint16_t fp16_from_double(double v, std::size_t* overflow_counter) {
    // Round to binary32 first (exact for the binary16 range we care about),
    // then narrow with explicit round-to-nearest-even on the significand.
    const float f = static_cast<float>(v);
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::int32_t exp = static_cast<std::int32_t>((bits >> 23) & 0xFF) - 127;
    const std::uint32_t mant = bits & 0x7FFFFFu;

    if (std::isnan(v)) return static_cast<std::uint16_t>(sign | 0x7E00u);
    if (std::isinf(v)) return static_cast<std::uint16_t>(sign | 0x7C00u);

    if (exp > 15 || (exp == 15 && mant > 0x7FE000u + 0x1000u - 1)) {
        // Beyond +-65504: saturate rather than produce an infinity.
        if (overflow_counter) ++(*overflow_counter);
        return static_cast<std::uint16_t>(sign | 0x7BFFu);
    }
    if (exp >= -14) {
        // Normal half: keep 10 mantissa bits, round-to-nearest-even on bit 13.
        std::uint32_t m = mant;
        const std::uint32_t round_bit = 0x1000u;
        std::uint32_t half = static_cast<std::uint32_t>(((exp + 15) << 10) | (m >> 13));
        if ((m & round_bit) && ((m & (round_bit - 1)) || (m & (round_bit << 1))))
            ++half;
        if ((half & 0x7C00u) == 0x7C00u) {
            // Rounded up past the largest normal.
            if (overflow_counter) ++(*overflow_counter);
            return static_cast<std::uint16_t>(sign | 0x7BFFu);
        }
        return static_cast<std::uint16_t>(sign | half);
    }
    if (exp >= -25) {
        // Subnormal half (exp -25 covers values that round up to the
        // smallest subnormal 2^-24).
        std::uint32_t m = mant | 0x800000u;  // implicit leading 1
        const int shift = -exp - 14 + 13;    // 13 = 23 - 10
        const std::uint32_t rounded = m >> shift;
        const std::uint32_t round_bit = 1u << (shift - 1);
        std::uint32_t half = rounded;
        if ((m & round_bit) && ((m & (round_bit - 1)) || (rounded & 1))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    return sign;  // underflow to signed zero
}

double fp16_to_double(std::uint16_t bits) {
    const std::uint32_t sign = (bits & 0x8000u) << 16;
    const std::uint32_t exp = (bits >> 10) & 0x1F;
    const std::uint32_t mant = bits & 0x3FF;
    std::uint32_t out;
    if (exp == 0x1F) {
        out = sign | 0x7F800000u | (mant << 13);
    } else if (exp == 0) {
        if (mant == 0) {
            out = sign;
        } else {
            // Normalize the subnormal: value = (mant / 1024) * 2^-14.
            int e = 0;
            std::uint32_t m = mant;
            while ((m & 0x400u) == 0) {
                m <<= 1;
                --e;
            }
            out = sign | static_cast<std::uint32_t>((e + 127 - 14) << 23) | ((m & 0x3FF) << 13);
        }
    } else {
        out = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return static_cast<double>(std::bit_cast<float>(out));
}

Fp16Payload encode_fp16(const Matrix& m) {
    Fp16Payload p;
    p.rows = m.rows();
    p.cols = m.cols();
    p.bits.resize(m.size());
    for (std::size_t i = 0; i < m.size(); ++i)
        p.bits[i] = fp16_from_double(m.data()[i], &p.overflow_count);
    return p;
}

Matrix decode_fp16(const Fp16Payload& payload) {
    if (payload.bits.size() != payload.rows * payload.cols)
        throw std::invalid_argument("decode_fp16: payload size mismatch");
    Matrix m(payload.rows, payload.cols);
    for (std::size_t i = 0; i < payload.bits.size(); ++i)
        m.data()[i] = fp16_to_double(payload.bits[i]);
    return m;
}

}  // namespace moeforge
