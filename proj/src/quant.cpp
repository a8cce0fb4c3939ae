// SPDX-License-Identifier: Apache-2.0
#include "cwac/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cwac {

std::string_view to_string(Scheme s) {
  return s == Scheme::per_tensor ? "per_tensor" : "per_channel";
}

Scheme scheme_from_string(std::string_view name) {
  if (name == "per_tensor") return Scheme::per_tensor;
  if (name == "per_channel") return Scheme::per_channel;
  throw ConfigError("unknown quantization scheme '" + std::string(name) + "'");
}

std::string_view to_string(RangeKind k) {
  return k == RangeKind::minmax ? "minmax" : "percentile";
}

RangeKind range_kind_from_string(std::string_view name) {
  if (name == "minmax") return RangeKind::minmax;
  if (name == "percentile") return RangeKind::percentile;
  throw ConfigError("unknown range estimator '" + std::string(name) + "'");
}

void check_bits(int bits) {
  if (bits < kMinBits || bits > kMaxBits) {
    throw ConfigError("bit-width " + std::to_string(bits) + " outside [" +
                      std::to_string(kMinBits) + ", " +
                      std::to_string(kMaxBits) + "]");
  }
}

double round_half_even(double x) { return std::nearbyint(x); }

void QuantParams::validate() const {
  check_bits(bits);
  if (scales.empty() || scales.size() != zero_points.size()) {
    throw ConfigError("quant params need matching non-empty scale/zero-point arrays");
  }
  if (scheme == Scheme::per_tensor && scales.size() != 1) {
    throw ConfigError("per_tensor params must hold exactly one scale");
  }
  for (double s : scales) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw ConfigError("quantization scale must be positive and finite");
    }
  }
  for (std::int32_t z : zero_points) {
    if (z < 0 || z > qmax()) {
      throw ConfigError("zero-point " + std::to_string(z) + " outside [0, " +
                        std::to_string(qmax()) + "]");
    }
  }
}

void RangeEstimator::validate() const {
  if (kind == RangeKind::percentile && !(percentile > 0.5 && percentile <= 1.0)) {
    throw ConfigError("percentile must lie in (0.5, 1]");
  }
}

namespace {

double quantile_sorted(const std::vector<float> &sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return static_cast<double>(sorted[lo]) +
         frac * (static_cast<double>(sorted[hi]) - static_cast<double>(sorted[lo]));
}

}  // namespace

Range estimate_range(std::span<const float> x, const RangeEstimator &est) {
  est.validate();
  if (x.empty()) throw ConfigError("cannot estimate the range of an empty tensor");
  for (float v : x) {
    if (!std::isfinite(v)) throw ConfigError("non-finite value in range estimation");
  }
  if (est.kind == RangeKind::minmax || est.percentile == 1.0) {
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    return {*lo, *hi};
  }
  std::vector<float> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  return {quantile_sorted(sorted, 1.0 - est.percentile),
          quantile_sorted(sorted, est.percentile)};
}

QuantParams params_from_range(Range r, int bits) {
  check_bits(bits);
  QuantParams p;
  p.bits = bits;
  p.scheme = Scheme::per_tensor;
  const std::int32_t qmax = p.qmax();
  double s = 0.0, z = 0.0;
  if (r.hi > r.lo) {
    s = (r.hi - r.lo) / qmax;
    // -lo / s written as -lo * qmax / (hi - lo) keeps exact ties exact
    z = round_half_even(-r.lo * qmax / (r.hi - r.lo));
  } else {
    s = kDegenerateScale;
    z = round_half_even(-r.lo / s);
  }
  z = std::clamp(z, 0.0, static_cast<double>(qmax));
  p.scales = {s};
  p.zero_points = {static_cast<std::int32_t>(z)};
  return p;
}

QuantParams compute_affine_params(const TensorF &x, int bits,
                                  const RangeEstimator &est) {
  check_bits(bits);
  return params_from_range(estimate_range(x.data(), est), bits);
}

namespace {

std::size_t channel_stride(const Shape &shape, const QuantParams &p) {
  if (p.scheme == Scheme::per_tensor) return 0;
  if (shape.empty() || shape[0] != p.channels()) {
    throw ShapeError("per-channel params for " + std::to_string(p.channels()) +
                     " channels do not match tensor " + shape_str(shape));
  }
  return shape_numel(shape) / shape[0];
}

}  // namespace

TensorU8 quantize_uniform(const TensorF &x, const QuantParams &params) {
  params.validate();
  const std::size_t stride = channel_stride(x.shape(), params);
  TensorU8 out(x.shape());
  const std::int32_t qmax = params.qmax();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = stride ? i / stride : 0;
    out[i] = quantize_value(x[i], params.scale(c), params.zero_point(c), qmax);
  }
  return out;
}

TensorF dequantize(const TensorU8 &q, const QuantParams &params) {
  params.validate();
  const std::size_t stride = channel_stride(q.shape(), params);
  TensorF out(q.shape());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const std::size_t c = stride ? i / stride : 0;
    out[i] = static_cast<float>(params.scale(c) *
                                (static_cast<std::int32_t>(q[i]) - params.zero_point(c)));
  }
  return out;
}

TensorF fake_quantize(const TensorF &x, const QuantParams &params) {
  return dequantize(quantize_uniform(x, params), params);
}

WeightQuant quantize_weights_per_channel(const TensorF &w, int bits) {
  check_bits(bits);
  if (w.rank() < 1 || w.dim(0) == 0) throw ShapeError("weight has no output channels");
  const std::size_t c_out = w.dim(0);
  const std::size_t stride = w.size() / c_out;
  if (stride == 0) throw ShapeError("weight channel is empty");
  QuantParams p;
  p.bits = bits;
  p.scheme = Scheme::per_channel;
  for (std::size_t c = 0; c < c_out; ++c) {
    const QuantParams pc = params_from_range(
        estimate_range(w.data().subspan(c * stride, stride), RangeEstimator::minmax()),
        bits);
    p.scales.push_back(pc.scales[0]);
    p.zero_points.push_back(pc.zero_points[0]);
  }
  return {quantize_uniform(w, p), p};
}

WeightQuant quantize_weights_per_tensor(const TensorF &w, int bits) {
  QuantParams p = compute_affine_params(w, bits, RangeEstimator::minmax());
  return {quantize_uniform(w, p), p};
}

Log2Quantized quantize_log2(const TensorF &x, int bits) {
  check_bits(bits);
  Log2Quantized q;
  q.bits = bits;
  for (float v : x.data()) q.max_abs = std::max(q.max_abs, std::abs(static_cast<double>(v)));
  if (!(q.max_abs > 0.0)) throw ConfigError("log2 quantization of an all-zero tensor");
  const double qmax = (1 << bits) - 1;
  q.codes = TensorU8(x.shape());
  q.signs.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    q.signs[i] = v > 0.0 ? 1 : (v < 0.0 ? -1 : 0);
    if (v == 0.0) {
      q.codes[i] = static_cast<std::uint8_t>(qmax);
      continue;
    }
    const double c = round_half_even(-std::log2(std::abs(v) / q.max_abs));
    q.codes[i] = static_cast<std::uint8_t>(std::clamp(c, 0.0, qmax));
  }
  return q;
}

TensorF dequantize_log2(const Log2Quantized &q) {
  TensorF out(q.codes.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(q.signs[i] * std::ldexp(q.max_abs, -static_cast<int>(q.codes[i])));
  }
  return out;
}

}  // namespace cwac
