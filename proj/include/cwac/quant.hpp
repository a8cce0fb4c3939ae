// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "cwac/tensor.hpp"

namespace cwac {

/// Supported bit-widths. Codes are stored as u8, the narrowest integer that
/// holds 2^b - 1 for every supported b.
inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;

/// Scale used when a tensor's range collapses to a single value.
inline constexpr double kDegenerateScale = 0x1p-20;

enum class Scheme { per_tensor, per_channel };

std::string_view to_string(Scheme s);
Scheme scheme_from_string(std::string_view name);

void check_bits(int bits);

/// Round to nearest, ties to even.
double round_half_even(double x);

/// Unsigned asymmetric quantization parameters: x ~ s * (q - z), q in
/// [0, 2^b - 1]. Per-channel parameters index the tensor's leading dim.
struct QuantParams {
  int bits = 8;
  Scheme scheme = Scheme::per_tensor;
  std::vector<double> scales;
  std::vector<std::int32_t> zero_points;

  std::int32_t qmax() const { return (std::int32_t{1} << bits) - 1; }
  std::size_t channels() const { return scales.size(); }
  double scale(std::size_t c = 0) const {
    return scales[scheme == Scheme::per_tensor ? 0 : c];
  }
  std::int32_t zero_point(std::size_t c = 0) const {
    return zero_points[scheme == Scheme::per_tensor ? 0 : c];
  }
  void validate() const;

  bool operator==(const QuantParams &) const = default;
};

enum class RangeKind { minmax, percentile };

std::string_view to_string(RangeKind k);
RangeKind range_kind_from_string(std::string_view name);

struct RangeEstimator {
  RangeKind kind = RangeKind::minmax;
  double percentile = 1.0;  // used when kind == percentile, in (0.5, 1]

  static RangeEstimator minmax() { return {}; }
  static RangeEstimator clipped(double p) { return {RangeKind::percentile, p}; }
  void validate() const;

  bool operator==(const RangeEstimator &) const = default;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Empirical [lo, hi]: min/max, or the (1 - p) and p quantiles with linear
/// interpolation between order statistics.
Range estimate_range(std::span<const float> x, const RangeEstimator &est);

/// s = (hi - lo) / (2^b - 1), z = clip(round(-lo / s), 0, 2^b - 1).
/// A collapsed range uses kDegenerateScale.
QuantParams params_from_range(Range r, int bits);

QuantParams compute_affine_params(const TensorF &x, int bits,
                                  const RangeEstimator &est);

inline std::uint8_t quantize_value(double x, double scale, std::int32_t zp,
                                   std::int32_t qmax) {
  double q = round_half_even(x / scale) + zp;
  q = q < 0.0 ? 0.0 : (q > qmax ? qmax : q);
  return static_cast<std::uint8_t>(q);
}

TensorU8 quantize_uniform(const TensorF &x, const QuantParams &params);
TensorF dequantize(const TensorU8 &q, const QuantParams &params);
/// dequantize(quantize_uniform(x)).
TensorF fake_quantize(const TensorF &x, const QuantParams &params);

struct WeightQuant {
  TensorU8 codes;
  QuantParams params;

  bool operator==(const WeightQuant &) const = default;
};

/// One min-max (s, z) per output channel (leading dim).
WeightQuant quantize_weights_per_channel(const TensorF &w, int bits);
/// One min-max (s, z) for the whole tensor.
WeightQuant quantize_weights_per_tensor(const TensorF &w, int bits);

/// Power-of-two quantization: |x| ~ max|x| * 2^-code. Exact zeros are kept
/// as sign 0 and reconstruct to 0.
struct Log2Quantized {
  TensorU8 codes;
  std::vector<std::int8_t> signs;  // -1, 0 or +1 per element
  double max_abs = 0.0;
  int bits = 4;
};

Log2Quantized quantize_log2(const TensorF &x, int bits);
TensorF dequantize_log2(const Log2Quantized &q);

}  // namespace cwac
