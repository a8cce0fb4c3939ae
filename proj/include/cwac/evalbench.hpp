// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cwac/calibrate.hpp"
#include "cwac/dataset.hpp"
#include "cwac/refnet.hpp"

namespace cwac {

/// Fraction of rows whose prediction equals the label.
double accuracy(std::span<const std::int32_t> predicted,
                std::span<const std::int32_t> labels);
/// Argmax accuracy of `runner` (a batch-to-logits function) on `data`.
double accuracy(const std::function<TensorF(const TensorF &)> &runner,
                const Dataset &data);

/// One (seed x config) cell of an ablation.
struct EvalRow {
  std::string axis;
  std::uint64_t seed = 0;
  std::string task;
  int bits_w = 8;
  int bits_a = 8;
  std::size_t n_calib = 0;
  std::string position;
  bool beta_rounding = true;
  std::string estimator;
  std::string method;  // quant, cwac, qwt
  double accuracy = 0.0;
  double baseline_accuracy = 0.0;  // plain quantized model, same ranges
  double float_accuracy = 0.0;
  double output_mse = 0.0;  // held-out logits vs float logits
  std::vector<double> layer_mse;  // per compensated layer, calibration set
  std::size_t model_size_bytes = 0;
  std::size_t delta_scalars = 0;
  std::size_t delta_bytes = 0;
  std::uint64_t kernel_float_ops = 0;

  bool operator==(const EvalRow &) const = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  static const std::vector<std::string> &columns();
  /// Throws Error when a numeric cell is not finite.
  void validate() const;
  /// One line per row, `columns()` as header. layer_mse is ';'-joined.
  std::string to_csv() const;
  /// Tidy form: identifying columns, then metric,value per numeric cell.
  std::string to_long_csv() const;
  void append(const EvalReport &other);
};

struct DiagonalRow {
  std::uint64_t seed = 0;
  std::size_t layer = 0;
  std::size_t channels = 0;
  double pre_energy = 0.0;   // residual-on-input fit
  double post_energy = 0.0;  // full-on-output fit
};

/// Diagonal energy of the pre- and post-compensation full-matrix fits for
/// every linear layer with C_in == C_out, on the uncompensated quantized
/// path at `bits` weights and activations.
std::vector<DiagonalRow> figure1b_report(const Model &model, int bits,
                                         const TensorF &calib,
                                         const RangeEstimator &est = {},
                                         std::uint64_t seed = 0);
std::string diagonal_csv(const std::vector<DiagonalRow> &rows);

struct BetaBoundCheck {
  std::size_t elements = 0;
  std::size_t violations = 0;
  double max_ratio = 0.0;  // max deviation / (0.5 alpha S_x S_W)
};

/// Runs the fused model with rounded offsets over `x`, and for every layer,
/// sample and channel compares the real pre-requantization output
///   M'_c S_r acc  against  M'_c S_r (acc - offset_c) + beta_c,
/// the value the unrounded offset would have produced.
BetaBoundCheck check_beta_bound(const FusedModel &fused, const TensorF &x);

/// Seeded desk-scale harness. Models are trained (or supplied) per seed and
/// cached; every cell is deterministic in (model, config, seed).
class Bench {
 public:
  /// Trains train_synthetic(task, seed) lazily for each requested seed.
  explicit Bench(TaskSpec task);
  /// Uses one fixed model; seeds vary only the calibration sampling.
  Bench(Model model, TaskData data);

  const Model &model(std::uint64_t seed);
  const TaskData &data(std::uint64_t seed);
  std::string task_name() const;

  /// Quantized baseline and compensated fused model on the held-out split.
  EvalRow run_cell(std::uint64_t seed, const CalibrationConfig &config,
                   const std::string &axis);

  EvalReport ablate_calibration_size(const std::vector<std::size_t> &sizes,
                                     const CalibrationConfig &base,
                                     const std::vector<std::uint64_t> &seeds);
  EvalReport ablate_position(const CalibrationConfig &base,
                             const std::vector<std::uint64_t> &seeds);
  EvalReport ablate_beta_rounding(const CalibrationConfig &base,
                                  const std::vector<std::uint64_t> &seeds);
  EvalReport ablate_bitwidth(const std::vector<int> &bits, const CalibrationConfig &base,
                             const std::vector<std::uint64_t> &seeds);
  /// quant, cwac and the full-matrix baseline side by side with their
  /// storage deltas.
  EvalReport compare_methods(const CalibrationConfig &base,
                             const std::vector<std::uint64_t> &seeds);
  std::vector<DiagonalRow> figure1b(int bits, const CalibrationConfig &base,
                                    const std::vector<std::uint64_t> &seeds);

 private:
  struct Entry {
    Model model;
    TaskData data;
  };
  Entry &entry(std::uint64_t seed);

  std::optional<TaskSpec> task_;
  std::optional<Entry> fixed_;
  std::map<std::uint64_t, Entry> cache_;
};

inline const std::vector<std::size_t> kDefaultCalibrationSizes = {32, 128, 512, 1024};

double median(std::vector<double> v);

/// Trend invariants of one ablation axis, evaluated on medians over seeds.
/// Returns one message per violated invariant.
std::vector<std::string> check_report(const std::string &axis, const EvalReport &report);

}  // namespace cwac
