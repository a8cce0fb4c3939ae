// SPDX-License-Identifier: Apache-2.0
#include "cwac/intengine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cwac {

namespace {

constexpr std::int64_t kI32Min = std::numeric_limits<std::int32_t>::min();
constexpr std::int64_t kI32Max = std::numeric_limits<std::int32_t>::max();

bool fits_i32(std::int64_t v) { return v >= kI32Min && v <= kI32Max; }

std::int64_t round_half_away(double v) {
  return static_cast<std::int64_t>(v < 0.0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5));
}

std::uint8_t clip_code(std::int64_t v, std::int32_t qmax) {
  return static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, qmax));
}

}  // namespace

FixedMultiplier encode_multiplier(double m) {
  if (!std::isfinite(m) || !(m > 0.0)) {
    throw ConfigError("requantization multiplier must be positive and finite");
  }
  if (m >= 0x1p30) throw ConfigError("requantization multiplier must be < 2^30");
  int e = 0;
  const double f = std::frexp(m, &e);  // m = f * 2^e, f in [0.5, 1)
  auto m0 = static_cast<std::int64_t>(std::llround(f * 0x1p31));
  if (m0 == (std::int64_t{1} << 31)) {
    m0 >>= 1;
    ++e;
  }
  return {static_cast<std::int32_t>(m0), 31 - e};
}

double decode_multiplier(FixedMultiplier f) {
  return std::ldexp(static_cast<double>(f.m0), -f.shift);
}

std::int64_t fixedpoint_mul(std::int32_t acc, FixedMultiplier f) {
  const std::int64_t p = static_cast<std::int64_t>(acc) * f.m0;
  if (f.shift <= 0) return p << -f.shift;
  if (f.shift > 62) return 0;  // |p| < 2^62, so the rounded quotient is 0
  const std::int64_t half = std::int64_t{1} << (f.shift - 1);
  return p >= 0 ? (p + half) >> f.shift : -((-p + half) >> f.shift);
}

void IntActivationParams::validate() const {
  check_bits(bits);
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw ConfigError("activation scale must be positive and finite");
  }
  if (zero_point < 0 || zero_point > qmax()) {
    throw ConfigError("activation zero-point outside the code range");
  }
}

IntActivationParams IntActivationParams::from(const QuantParams &p) {
  p.validate();
  if (p.scheme != Scheme::per_tensor) {
    throw ConfigError("activations use per-tensor quantization");
  }
  return {p.scales[0], p.zero_points[0], p.bits};
}

QuantParams IntActivationParams::to_quant_params() const {
  return {bits, Scheme::per_tensor, {scale}, {zero_point}};
}

bool FusedLayerParams::symmetric_weights() const {
  return std::all_of(weight_zero_points.begin(), weight_zero_points.end(),
                     [](std::int32_t z) { return z == 0; });
}

void FusedLayerParams::validate() const {
  const std::size_t c = out_channels;
  if (weight_q.rank() != 2 || weight_q.rows() != c ||
      weight_zero_points.size() != c || bias_acc.size() != c ||
      const_acc.size() != c || multipliers.size() != c) {
    throw ShapeError("fused parameter arrays disagree on C_out", layer_index);
  }
  input.validate();
  output.validate();
  for (const auto &m : multipliers) {
    if (m.m0 < (1 << 30) || m.shift < 0) {
      throw ConfigError("layer " + std::to_string(layer_index) +
                        ": malformed fixed-point multiplier");
    }
  }
}

FusedLayerParams fuse_layer(const TensorU8 &weight_q, std::span<const float> bias,
                            const IntActivationParams &input,
                            const QuantParams &weight,
                            const IntActivationParams &output,
                            const CwacParams &cwac, FuseOptions options) {
  input.validate();
  output.validate();
  weight.validate();
  const std::size_t layer = options.layer_index;
  if (weight_q.rank() != 2 && weight_q.rank() != 4) {
    throw ShapeError("fused weight must be rank 2 or 4", layer);
  }
  const std::size_t c_out = weight_q.dim(0);
  const std::size_t k = weight_q.size() / c_out;
  if (bias.size() != c_out || cwac.channels() != c_out ||
      (weight.scheme == Scheme::per_channel && weight.channels() != c_out)) {
    throw ShapeError("bias, compensation and weight params must cover C_out = " +
                         std::to_string(c_out),
                     layer);
  }

  FusedLayerParams f;
  f.layer_index = layer;
  f.op = weight_q.rank() == 4 ? OpKind::conv2d : OpKind::linear;
  f.geometry = f.op == OpKind::conv2d ? options.geometry : WindowGeometry{};
  if (f.op == OpKind::conv2d && f.geometry.kernel != weight_q.dim(2)) {
    throw ShapeError("conv geometry kernel does not match the weight", layer);
  }
  f.in_channels = weight_q.dim(1);
  f.out_channels = c_out;
  f.weight_q = weight_q.reshaped({c_out, k});
  f.input = input;
  f.output = output;
  f.beta_rounded = options.beta_rounding;

  const std::int64_t wmax = weight.qmax();
  const std::int64_t xmax = input.qmax();
  auto &ref = f.reference;
  for (std::size_t c = 0; c < c_out; ++c) {
    const double sw = weight.scale(c);
    const std::int32_t zw = weight.zero_point(c);
    const double sxsw = input.scale * sw;
    const double alpha = cwac.alpha[c];
    const double beta = cwac.beta[c];
    if (!(alpha > 0.0)) {
      throw ConfigError("layer " + std::to_string(layer) + " channel " +
                        std::to_string(c) + ": compensation gain must be > 0");
    }

    const double m = alpha * sxsw / output.scale;
    const double bias_q = round_half_even(static_cast<double>(bias[c]) / sxsw);
    const double beta_q =
        options.beta_rounding ? round_half_even(beta / (alpha * sxsw)) : 0.0;
    const double bias_total = bias_q + beta_q;
    if (!(std::abs(bias_total) <= static_cast<double>(kI32Max))) {
      throw OverflowError("bias accumulator for channel " + std::to_string(c) +
                              " exceeds i32",
                          layer);
    }

    std::int64_t sum_w = 0;
    for (std::size_t j = 0; j < k; ++j) sum_w += f.weight_q.at(c, j);
    const std::int64_t konst = -static_cast<std::int64_t>(input.zero_point) * sum_w +
                               static_cast<std::int64_t>(k) * input.zero_point * zw;
    const auto bias_i = static_cast<std::int64_t>(bias_total);
    // worst case of every partial sum in integer_accumulate
    const std::int64_t bound = static_cast<std::int64_t>(k) * wmax * xmax +
                               static_cast<std::int64_t>(k) * zw * xmax +
                               std::abs(konst) + std::abs(bias_i);
    if (!fits_i32(bound) || !fits_i32(konst)) {
      throw OverflowError("accumulator can exceed i32 for patch length " +
                              std::to_string(k),
                          layer);
    }

    f.weight_zero_points.push_back(zw);
    f.bias_acc.push_back(static_cast<std::int32_t>(bias_i));
    f.const_acc.push_back(static_cast<std::int32_t>(konst));
    f.multipliers.push_back(encode_multiplier(m));

    ref.weight_scales.push_back(sw);
    ref.alpha.push_back(alpha);
    ref.beta.push_back(beta);
    ref.real_multipliers.push_back(m);
    ref.beta_offsets.push_back(static_cast<std::int32_t>(beta_q));
    if (!options.beta_rounding) ref.beta_over_output_scale.push_back(beta / output.scale);
  }
  f.validate();
  return f;
}

std::vector<std::int32_t> integer_accumulate(std::span<const std::uint8_t> x_q,
                                             const FusedLayerParams &layer,
                                             bool fast_symmetric,
                                             InferenceTrace *trace) {
  const std::size_t k = layer.patch_length();
  if (x_q.size() != k) {
    throw ShapeError("patch of length " + std::to_string(x_q.size()) +
                         " for a layer expecting " + std::to_string(k),
                     layer.layer_index);
  }
  const bool skip_zw = fast_symmetric && layer.symmetric_weights();
  std::int64_t sum_x = 0;
  if (!skip_zw) {
    for (std::uint8_t v : x_q) sum_x += v;
  }
  std::vector<std::int32_t> acc(layer.out_channels);
  const std::uint8_t *w = layer.weight_q.data().data();
  for (std::size_t c = 0; c < layer.out_channels; ++c) {
    const std::uint8_t *wc = w + c * k;
    std::int64_t dot = 0;
    for (std::size_t j = 0; j < k; ++j) {
      dot += static_cast<std::int32_t>(wc[j]) * static_cast<std::int32_t>(x_q[j]);
    }
    std::int64_t a = dot;
    if (!skip_zw) a -= static_cast<std::int64_t>(layer.weight_zero_points[c]) * sum_x;
    a += layer.const_acc[c];
    a += layer.bias_acc[c];
    if (!fits_i32(dot) || !fits_i32(a)) {
      throw OverflowError("accumulator overflow in channel " + std::to_string(c),
                          layer.layer_index);
    }
    acc[c] = static_cast<std::int32_t>(a);
  }
  if (trace) trace->integer_macs += k * layer.out_channels;
  return acc;
}

std::vector<std::uint8_t> requantize(std::span<const std::int32_t> acc,
                                     const FusedLayerParams &layer,
                                     RequantMode mode, InferenceTrace *trace) {
  if (acc.size() != layer.out_channels) {
    throw ShapeError("accumulator length does not match C_out", layer.layer_index);
  }
  const std::int32_t zr = layer.output.zero_point;
  const std::int32_t qmax = layer.output.qmax();
  const auto &ref = layer.reference;
  std::vector<std::uint8_t> out(acc.size());
  if (mode == RequantMode::fixed_point && layer.beta_rounded) {
    for (std::size_t c = 0; c < acc.size(); ++c) {
      out[c] = clip_code(zr + fixedpoint_mul(acc[c], layer.multipliers[c]), qmax);
    }
    return out;
  }

  // reference modes: real arithmetic inside the kernel, counted in the trace
  if (mode == RequantMode::exact && ref.real_multipliers.size() != acc.size()) {
    throw ConfigError("layer " + std::to_string(layer.layer_index) +
                      ": exact mode needs the real multipliers");
  }
  if (!layer.beta_rounded && ref.beta_over_output_scale.size() != acc.size()) {
    throw ConfigError("layer " + std::to_string(layer.layer_index) +
                      ": unrounded offsets missing");
  }
  std::uint64_t flops = 0;
  for (std::size_t c = 0; c < acc.size(); ++c) {
    double v = mode == RequantMode::exact
                   ? ref.real_multipliers[c] * acc[c]
                   : std::ldexp(static_cast<double>(acc[c]) * layer.multipliers[c].m0,
                                -layer.multipliers[c].shift);
    flops += 1;
    if (!layer.beta_rounded) {
      v += ref.beta_over_output_scale[c];
      flops += 1;
    }
    out[c] = clip_code(zr + round_half_away(v), qmax);
  }
  if (trace) trace->kernel_float_ops += flops;
  return out;
}

IntLut build_gelu_lut(const IntActivationParams &input,
                      const IntActivationParams &output) {
  input.validate();
  output.validate();
  IntLut lut{OpKind::gelu, input, output, {}};
  lut.table.resize(static_cast<std::size_t>(input.qmax()) + 1);
  for (std::int32_t q = 0; q <= input.qmax(); ++q) {
    const auto x = static_cast<float>(input.scale * (q - input.zero_point));
    lut.table[static_cast<std::size_t>(q)] =
        quantize_value(gelu(x), output.scale, output.zero_point, output.qmax());
  }
  return lut;
}

TensorU8 avgpool_codes(const TensorU8 &x, const WindowGeometry &g) {
  if (x.rank() != 4) throw ShapeError("integer avgpool expects [N, C, H, W]");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = g.out_extent(h), ow = g.out_extent(w);
  TensorU8 out({n, c, oh, ow});
  const auto count = static_cast<std::int64_t>(g.kernel * g.kernel);
  for (std::size_t s = 0; s < n * c; ++s) {
    const std::uint8_t *src = x.data().data() + s * h * w;
    std::uint8_t *dst = out.data().data() + s * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::int64_t sum = 0;
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            sum += src[(oy * g.stride + ky) * w + ox * g.stride + kx];
          }
        }
        dst[oy * ow + ox] = avgpool_code(sum, count);
      }
    }
  }
  return out;
}

namespace {

struct OpRunner {
  const RunOptions &options;
  InferenceTrace &trace;
  TensorU8 x;  // batch of codes

  void operator()(const FusedLayerParams &l) {
    const std::size_t n = x.dim(0);
    if (options.capture) trace.layer_inputs.push_back(x);
    TensorI32 accs;
    TensorU8 out;
    if (l.op == OpKind::linear) {
      if (x.rank() != 2 || x.dim(1) != l.in_channels) {
        throw ShapeError("integer linear expects [N, " + std::to_string(l.in_channels) +
                             "], got " + shape_str(x.shape()),
                         l.layer_index);
      }
      out = TensorU8({n, l.out_channels});
      if (options.capture) accs = TensorI32({n, l.out_channels});
      for (std::size_t r = 0; r < n; ++r) {
        const auto acc = integer_accumulate(x.row(r), l, true, &trace);
        const auto q = requantize(acc, l, options.mode, &trace);
        std::copy(q.begin(), q.end(), out.row(r).begin());
        if (options.capture) std::copy(acc.begin(), acc.end(), accs.row(r).begin());
      }
    } else {
      if (x.rank() != 4 || x.dim(1) != l.in_channels) {
        throw ShapeError("integer conv2d expects [N, " + std::to_string(l.in_channels) +
                             ", H, W], got " + shape_str(x.shape()),
                         l.layer_index);
      }
      const std::size_t h = x.dim(2), w = x.dim(3);
      const std::size_t oh = l.geometry.out_extent(h), ow = l.geometry.out_extent(w);
      const std::size_t p = oh * ow, k = l.patch_length();
      const std::size_t in_stride = l.in_channels * h * w;
      out = TensorU8({n, l.out_channels, oh, ow});
      if (options.capture) accs = TensorI32({n * p, l.out_channels});
      for (std::size_t s = 0; s < n; ++s) {
        const auto cols = im2col<std::uint8_t>(
            x.data().subspan(s * in_stride, in_stride), l.in_channels, h, w,
            l.geometry, static_cast<std::uint8_t>(l.input.zero_point));
        std::uint8_t *dst = out.data().data() + s * l.out_channels * p;
        for (std::size_t q = 0; q < p; ++q) {
          const auto acc = integer_accumulate(
              std::span<const std::uint8_t>(cols).subspan(q * k, k), l, true, &trace);
          const auto codes = requantize(acc, l, options.mode, &trace);
          for (std::size_t c = 0; c < l.out_channels; ++c) dst[c * p + q] = codes[c];
          if (options.capture) {
            std::copy(acc.begin(), acc.end(), accs.row(s * p + q).begin());
          }
        }
      }
    }
    if (options.capture) {
      trace.accumulators.push_back(std::move(accs));
      trace.layer_outputs.push_back(out);
    }
    x = std::move(out);
  }

  void operator()(const IntRelu &r) {
    const auto z = static_cast<std::uint8_t>(r.zero_point);
    for (std::uint8_t &v : x.data()) v = std::max(v, z);
  }

  void operator()(const IntLut &lut) {
    for (std::uint8_t &v : x.data()) v = lut.table[v];
  }

  void operator()(const IntAvgPool &pool) { x = avgpool_codes(x, pool.geometry); }

  void operator()(const IntFlatten &) {
    x = x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
};

}  // namespace

IntRunResult run_int_model(const FusedModel &model, const TensorF &input,
                           RunOptions options) {
  const bool single = input.shape() == model.input_shape;
  Shape batched = input.shape();
  if (single) batched.insert(batched.begin(), 1);
  if (batched.size() != model.input_shape.size() + 1 ||
      !std::equal(model.input_shape.begin(), model.input_shape.end(), batched.begin() + 1)) {
    throw ShapeError("fused model input shape " + shape_str(input.shape()) +
                     " does not match " + shape_str(model.input_shape));
  }
  IntRunResult result;
  OpRunner run{options, result.trace,
               quantize_uniform(input.reshaped(batched), model.input.to_quant_params())};
  for (const FusedOp &op : model.ops) std::visit(run, op);

  result.codes = std::move(run.x);
  result.logits = dequantize(result.codes, model.output.to_quant_params());
  if (single) {
    Shape s(result.logits.shape().begin() + 1, result.logits.shape().end());
    result.logits = result.logits.reshaped(s);
    result.codes = result.codes.reshaped(s);
  }
  return result;
}

}  // namespace cwac
