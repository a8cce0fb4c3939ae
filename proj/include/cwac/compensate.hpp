// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "cwac/tensor.hpp"

namespace cwac {

/// Calibration outputs of one layer: float-path target and quant-path
/// (dequantized) output, both [N, C_out]. x_quant is the quant-path layer
/// input [N, C_in], needed only by the full-matrix baseline.
struct ActivationPair {
  TensorF y_full;
  TensorF y_quant;
  std::optional<TensorF> x_quant;

  std::size_t rows() const { return y_full.rows(); }
  std::size_t channels() const { return y_full.cols(); }
  void validate() const;
};

/// Per-output-channel gain and offset: y ~ alpha * y_quant + beta.
struct CwacParams {
  std::vector<float> alpha;
  std::vector<float> beta;
  /// Channels whose quant-path variance was ~0 (alpha forced to 1).
  std::vector<bool> fallback_mask;
  /// Channels whose fitted gain was <= 0 and were reset to the alpha = 1
  /// mean-shift solution. An integer engine with saturating clip cannot
  /// realize a sign flip in its multiplier.
  std::vector<bool> clamped_mask;

  static CwacParams identity(std::size_t channels);

  std::size_t channels() const { return alpha.size(); }
  std::size_t fallback_count() const;
  std::size_t clamped_count() const;
  void validate() const;

  bool operator==(const CwacParams &) const = default;
};

struct CwacFitOptions {
  bool clamp_non_positive_alpha = true;
};

/// Closed-form 1-D least squares per channel:
///   alpha = Cov(y_full, y_quant) / Var(y_quant)
///   beta  = E[y_full] - alpha * E[y_quant]
/// with population (1/N) moments. Channels with
/// Var < 1e-12 * (1 + mean^2) fall back to alpha = 1, beta = mean difference.
CwacParams fit_cwac(const ActivationPair &pair, CwacFitOptions options = {});

/// alpha * y + beta per channel. Accepts [N, C] or [N, C, H, W].
TensorF apply_cwac(const TensorF &y, const CwacParams &params);

/// Full-matrix residual compensation: y_quant + x W^T + b.
struct QwtParams {
  TensorF weight;  // [C_out, C_in]
  TensorF bias;    // [C_out]

  bool operator==(const QwtParams &) const = default;
};

struct QwtFitOptions {
  /// Ridge damping; nullopt selects 1e-6 * trace(Xc^T Xc) / C_in.
  std::optional<double> ridge;
};

/// Least-squares fit of (y_full - y_quant) on x_quant, solved through the
/// damped normal equations on centered data.
QwtParams fit_qwt(const ActivationPair &pair, QwtFitOptions options = {});

TensorF apply_qwt(const TensorF &y_quant, const TensorF &x_quant,
                  const QwtParams &params);

/// Sum |W_ii| over sum |W_ij| for a square matrix; 0 for the zero matrix.
double diagonal_energy(const TensorF &w);

/// Mean squared error over all elements, and per column of [N, C] inputs.
double mse(const TensorF &a, const TensorF &b);
std::vector<double> per_channel_mse(const TensorF &a, const TensorF &b);

}  // namespace cwac
