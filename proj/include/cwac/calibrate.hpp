// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string_view>
#include <vector>

#include "cwac/compensate.hpp"
#include "cwac/intengine.hpp"
#include "cwac/quant.hpp"
#include "cwac/refnet.hpp"
#include "json.hpp"

namespace cwac {

enum class Position { all, post };

std::string_view to_string(Position p);
Position position_from_string(std::string_view name);

struct CalibrationConfig {
  std::size_t sample_count = 512;
  Position position = Position::all;
  RangeEstimator estimator;
  int weight_bits = 8;
  int act_bits = 8;
  bool beta_rounding = true;
  std::uint64_t seed = 0;
  /// Separate range-estimation set drawn from the same pool; nullopt reuses
  /// the compensation samples.
  std::optional<std::size_t> range_sample_count;
  /// false fits every layer from one uncompensated quantized pass.
  bool sequential = true;

  void validate() const;
  nlohmann::json to_json() const;
  static CalibrationConfig from_json(const nlohmann::json &j);

  bool operator==(const CalibrationConfig &) const = default;
};

/// Quantization state of one op. `weight` is set for linear/conv layers,
/// `output` for ops that produce fresh activation codes (linear, conv,
/// gelu). Ops without `output` pass their input parameters through.
struct LayerQuant {
  std::optional<WeightQuant> weight;
  std::optional<QuantParams> output;

  bool operator==(const LayerQuant &) const = default;
};

struct QuantizedModel {
  Model model;  // float reference the quantization was derived from
  std::optional<QuantParams> input;
  std::vector<LayerQuant> layers;

  /// No quantization anywhere: the simulated path equals the float path.
  static QuantizedModel identity(const Model &model);

  /// Layer `i` with its weight replaced by the dequantized codes.
  LayerSpec effective_layer(std::size_t i) const;
  void validate() const;

  bool operator==(const QuantizedModel &) const = default;
};

using CompensationMap = std::map<std::size_t, CwacParams>;
using QwtMap = std::map<std::size_t, QwtParams>;

struct LayerFitStats {
  std::size_t layer = 0;
  std::size_t channels = 0;
  double mse_before = 0.0;
  double mse_after = 0.0;
  std::size_t fallback_count = 0;
  std::size_t clamped_count = 0;

  bool operator==(const LayerFitStats &) const = default;
};

struct CompensatedModel {
  QuantizedModel base;  // activation ranges estimated on compensated outputs
  CompensationMap cwac;
  CalibrationConfig config;
  std::vector<LayerFitStats> stats;

  nlohmann::json provenance() const;
};

/// Indices of the linear/conv layers that receive compensation. `post`
/// keeps the last linear/conv of each block; without explicit block ids a
/// block is one linear/conv plus its trailing activations.
std::vector<std::size_t> compensation_positions(const Model &model, Position p);

/// Weights per-channel, activations per-tensor with ranges taken from a
/// plain quantized pass over `range_data`.
QuantizedModel quantize_model(const Model &model, int weight_bits, int act_bits,
                              const RangeEstimator &est, const TensorF &range_data);

/// Runs the float model and the simulated quantized model over `calib` and
/// captures (y_full, y_quant) for every linear/conv layer before output
/// quantization. Entries of `cwac` are applied to the quantized path, so
/// layer l sees layers < l compensated. x_quant is filled for linear layers.
std::map<std::size_t, ActivationPair> collect_pairs(const Model &model_f,
                                                    const QuantizedModel &model_q,
                                                    const TensorF &calib,
                                                    const CompensationMap &cwac = {});

/// Fits compensation at the configured positions and re-estimates every
/// activation range of `base` on the compensated path.
CompensatedModel compensate_model(const QuantizedModel &base, const TensorF &calib,
                                  const TensorF &range_data,
                                  const CalibrationConfig &config);

/// Training split of the task recorded in the model's metadata.
TensorF calibration_pool(const Model &model);

struct CalibrationSets {
  TensorF calib;
  TensorF range;  // equals calib unless range_sample_count is set
};

/// Compensation samples are a seeded prefix of `pool`, so sets for growing
/// sample_count are nested. The range set uses an independent stream.
CalibrationSets draw_calibration_sets(const TensorF &pool, const CalibrationConfig &config);

/// Draws the calibration (and optional range) sets from `pool` with the
/// config seed, quantizes and compensates.
CompensatedModel calibrate_model(const Model &model, const CalibrationConfig &config,
                                 const TensorF &pool);
CompensatedModel calibrate_model(const Model &model, const CalibrationConfig &config);

/// Simulated quantized forward: alpha * (W_deq x + b) + beta, then fake
/// quantization with the layer's output parameters.
TensorF simulate_forward(const QuantizedModel &q, const TensorF &x,
                         const CompensationMap &cwac = {});

/// Residual full-matrix baseline: y_quant + x_quant W^T + b at every
/// linear layer in `positions`, fitted sequentially.
struct QwtModel {
  QuantizedModel base;
  QwtMap qwt;
};
QwtModel compensate_qwt(const QuantizedModel &base, const TensorF &calib,
                        const TensorF &range_data, const std::vector<std::size_t> &positions,
                        const RangeEstimator &est = {});
TensorF simulate_qwt_forward(const QwtModel &m, const TensorF &x);

/// Folds quantization and compensation into an integer-only model.
FusedModel fuse_model(const QuantizedModel &q, const CompensationMap &cwac,
                      bool beta_rounding);
FusedModel fuse_model(const CompensatedModel &comp, bool beta_rounding);

struct DifferentialReport {
  std::size_t elements = 0;
  std::size_t mismatched = 0;  // codes differing by any amount
  std::int32_t max_step_diff = 0;
};

/// Teacher-forced per-layer comparison: every fused layer's integer output
/// codes against the simulated path alpha * (W_deq x + b) + beta, fake
/// quantized, evaluated on the same dequantized input codes.
DifferentialReport differential_check(const QuantizedModel &q, const CompensationMap &cwac,
                                      const FusedModel &fused, const TensorF &x,
                                      RequantMode mode = RequantMode::fixed_point);

/// Storage width of one compensation or float scalar.
inline constexpr std::size_t kScalarBytes = 4;

/// Extra scalars carried next to the quantized model.
std::size_t compensation_scalars(const CompensationMap &cwac);
std::size_t compensation_scalars(const QwtMap &qwt);
/// Packed weight codes plus per-channel scale/zero-point and f32 biases.
std::size_t quantized_model_bytes(const QuantizedModel &q);
/// Every integer parameter stored by a fused model: weight codes, weight
/// zero-points, bias and constant accumulators, (M0, shift) pairs,
/// activation (scale, zero-point) pairs and lookup tables.
std::size_t fused_param_count(const FusedModel &m);

}  // namespace cwac
