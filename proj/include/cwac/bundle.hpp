// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "cwac/calibrate.hpp"
#include "cwac/intengine.hpp"
#include "cwac/refnet.hpp"

namespace cwac {

inline constexpr int kBundleFormatVersion = 1;

struct CompensationSection {
  CompensationMap cwac;
  CalibrationConfig config;
  std::vector<LayerFitStats> stats;

  bool operator==(const CompensationSection &) const = default;
};

/// On-disk model: `manifest.json` plus one little-endian row-major
/// `<name>.bin` blob per tensor. A float bundle carries only `model`; a
/// quantized one adds `quant`; a compensated one adds `compensation` on top
/// of the (re-estimated) `quant`. A fused bundle keeps the model's name,
/// input shape and metadata but no float layers.
struct ModelBundle {
  Model model;
  std::optional<QuantizedModel> quant;  // quant->model mirrors `model`
  std::optional<CompensationSection> compensation;
  std::optional<FusedModel> fused;

  static ModelBundle from_compensated(const CompensatedModel &comp);
  CompensatedModel compensated() const;
  void validate() const;

  bool operator==(const ModelBundle &) const = default;
};

/// Writes into `dir`, creating it when needed. Existing files with the same
/// names are overwritten.
void save_bundle(const ModelBundle &bundle, const std::filesystem::path &dir);
/// Throws BundleError on a missing manifest, version mismatch, dangling or
/// truncated blob, or malformed content.
ModelBundle load_bundle(const std::filesystem::path &dir);

}  // namespace cwac
