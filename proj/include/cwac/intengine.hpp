// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cwac/compensate.hpp"
#include "cwac/quant.hpp"
#include "cwac/refnet.hpp"
#include "cwac/tensor.hpp"

namespace cwac {

/// Real multiplier m represented as m0 * 2^-shift with m0 in [2^30, 2^31).
struct FixedMultiplier {
  std::int32_t m0 = 0;
  int shift = 0;

  bool operator==(const FixedMultiplier &) const = default;
};

/// Requires 0 < m < 2^30. Relative error of the encoding is <= 2^-31.
FixedMultiplier encode_multiplier(double m);
double decode_multiplier(FixedMultiplier f);

/// (acc * m0) >> shift on an i64 product, rounding half away from zero.
std::int64_t fixedpoint_mul(std::int32_t acc, FixedMultiplier f);

/// Per-tensor activation quantization as seen by the engine.
struct IntActivationParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  int bits = 8;

  std::int32_t qmax() const { return (std::int32_t{1} << bits) - 1; }
  void validate() const;
  static IntActivationParams from(const QuantParams &p);
  QuantParams to_quant_params() const;

  bool operator==(const IntActivationParams &) const = default;
};

/// Real-valued values that produced the integer parameters. Never read by
/// the integer kernels; used by the exact-multiplier test mode, the
/// unrounded-offset reference mode and diagnostics.
struct FusionReference {
  std::vector<double> weight_scales;     // S_W
  std::vector<double> alpha;             // compensation gain
  std::vector<double> beta;              // compensation offset
  std::vector<double> real_multipliers;  // alpha * S_x * S_W / S_r
  std::vector<std::int32_t> beta_offsets;  // round(beta / (alpha S_x S_W)), 0 if unrounded
  std::vector<double> beta_over_output_scale;  // beta / S_r, used when unrounded

  bool operator==(const FusionReference &) const = default;
};

/// Integer linear/conv layer with compensation folded into the multiplier
/// and the bias accumulator.
struct FusedLayerParams {
  std::size_t layer_index = 0;
  OpKind op = OpKind::linear;
  WindowGeometry geometry;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  TensorU8 weight_q;  // [C_out, K], K = patch length
  std::vector<std::int32_t> weight_zero_points;
  IntActivationParams input;
  IntActivationParams output;
  std::vector<std::int32_t> bias_acc;   // round(b / (S_x S_W)) + beta offset
  std::vector<std::int32_t> const_acc;  // -Z_x * sum_k W_q + K * Z_x * Z_W
  std::vector<FixedMultiplier> multipliers;
  bool beta_rounded = true;
  FusionReference reference;

  std::size_t patch_length() const { return weight_q.cols(); }
  bool symmetric_weights() const;
  void validate() const;

  bool operator==(const FusedLayerParams &) const = default;
};

struct FuseOptions {
  std::size_t layer_index = 0;
  WindowGeometry geometry;  // conv2d only
  bool beta_rounding = true;
};

/// Folds per-channel compensation into a quantized linear or conv layer:
///   M'_c     = alpha_c * S_x * S_W[c] / S_r
///   bias_acc = round(b_c / (S_x S_W[c])) + round(beta_c / (alpha_c S_x S_W[c]))
/// `weight_q` is [C_out, C_in] or [C_out, C_in, k, k]. Identity compensation
/// yields the plain requantization parameters. Throws OverflowError when the
/// accumulator cannot stay inside i32 for the layer's patch length.
FusedLayerParams fuse_layer(const TensorU8 &weight_q, std::span<const float> bias,
                            const IntActivationParams &input,
                            const QuantParams &weight,
                            const IntActivationParams &output,
                            const CwacParams &cwac, FuseOptions options = {});

enum class RequantMode {
  fixed_point,  // integer-only (M0, shift)
  exact,        // real multipliers in double; test mode
};

struct InferenceTrace {
  /// Floating-point operations executed inside layer kernels. Zero for
  /// fixed-point requantization with rounded offsets.
  std::uint64_t kernel_float_ops = 0;
  std::uint64_t integer_macs = 0;
  /// Filled when RunOptions::capture is set: one entry per fused layer,
  /// input codes as received, accumulators as [rows, C_out] and output
  /// codes as produced.
  std::vector<TensorU8> layer_inputs;
  std::vector<TensorI32> accumulators;
  std::vector<TensorU8> layer_outputs;
};

/// acc_c = sum_j W_q[c,j] x_q[j] - Z_W[c] sum_j x_q[j] + const_acc[c] + bias_acc[c]
/// over one patch of length K. Integer only. With `fast_symmetric` the
/// Z_W sum is skipped for layers whose weight zero-points are all 0.
std::vector<std::int32_t> integer_accumulate(std::span<const std::uint8_t> x_q,
                                             const FusedLayerParams &layer,
                                             bool fast_symmetric = true,
                                             InferenceTrace *trace = nullptr);

/// r_q[c] = clip(Z_r + M'_c * acc[c], 0, 2^b - 1).
std::vector<std::uint8_t> requantize(std::span<const std::int32_t> acc,
                                     const FusedLayerParams &layer,
                                     RequantMode mode = RequantMode::fixed_point,
                                     InferenceTrace *trace = nullptr);

struct IntRelu {
  std::int32_t zero_point = 0;
  bool operator==(const IntRelu &) const = default;
};

/// 2^b-entry code-to-code table for a pointwise nonlinearity.
struct IntLut {
  OpKind op = OpKind::gelu;
  IntActivationParams input;
  IntActivationParams output;
  std::vector<std::uint8_t> table;
  bool operator==(const IntLut &) const = default;
};

struct IntAvgPool {
  WindowGeometry geometry;
  bool operator==(const IntAvgPool &) const = default;
};

struct IntFlatten {
  bool operator==(const IntFlatten &) const = default;
};

IntLut build_gelu_lut(const IntActivationParams &input,
                      const IntActivationParams &output);

/// Rounded integer mean of `count` codes summing to `sum` (half away).
inline std::uint8_t avgpool_code(std::int64_t sum, std::int64_t count) {
  return static_cast<std::uint8_t>((2 * sum + count) / (2 * count));
}

/// Window mean over a [N, C, H, W] code tensor using avgpool_code.
TensorU8 avgpool_codes(const TensorU8 &x, const WindowGeometry &g);

using FusedOp = std::variant<FusedLayerParams, IntRelu, IntLut, IntAvgPool, IntFlatten>;

struct FusedModel {
  std::string name;
  Shape input_shape;
  IntActivationParams input;
  std::vector<FusedOp> ops;
  IntActivationParams output;
  bool beta_rounding = true;

  bool operator==(const FusedModel &) const = default;
};

struct RunOptions {
  RequantMode mode = RequantMode::fixed_point;
  bool capture = false;
};

struct IntRunResult {
  TensorF logits;   // dequantized final codes, same batch layout as input
  TensorU8 codes;   // final integer outputs
  InferenceTrace trace;
};

/// Quantizes the input once, runs every op on integer codes and dequantizes
/// only the final output.
IntRunResult run_int_model(const FusedModel &model, const TensorF &input,
                           RunOptions options = {});

}  // namespace cwac
