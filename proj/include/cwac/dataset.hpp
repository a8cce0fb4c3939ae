// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "cwac/refnet.hpp"
#include "cwac/tensor.hpp"
#include "json.hpp"

namespace cwac {

enum class TaskKind { blobs, spirals, separable };

std::string_view to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view name);

/// Synthetic classification problem plus the MLP used to solve it.
struct TaskSpec {
  TaskKind kind = TaskKind::blobs;
  std::size_t classes = 10;
  std::size_t dim = 16;
  std::size_t train_count = 4000;
  std::size_t test_count = 2000;
  double center_scale = 2.0;  // blobs: class centers ~ N(0, center_scale^2)
  double spread = 1.0;        // blobs: per-class stddev; spirals: noise
  double margin = 0.1;        // separable: minimum distance to the plane

  std::vector<std::size_t> hidden = {64, 64};
  OpKind activation = OpKind::relu;
  std::size_t block_size = 1;  // linear layers per block (position=post)

  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double min_accuracy = 0.0;  // trainer floor on held-out accuracy

  void validate() const;
  nlohmann::json to_json() const;
  static TaskSpec from_json(const nlohmann::json &j);

  /// Named presets: "blobs", "blobs_noisy" (overlapping classes), "spirals",
  /// "separable".
  static TaskSpec preset(std::string_view name);

  bool operator==(const TaskSpec &) const = default;
};

struct Dataset {
  TensorF x;                        // [N, dim]
  std::vector<std::int32_t> labels;  // N entries in [0, classes)
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
};

struct TaskData {
  Dataset train;
  Dataset test;
};

/// Deterministic in (spec, seed).
TaskData make_task_data(const TaskSpec &spec, std::uint64_t seed);

/// First `count` rows of a seeded permutation of `pool`. Prefixes are nested:
/// the sample for a smaller count is contained in the one for a larger count.
TensorF sample_rows(const TensorF &pool, std::size_t count,
                    std::uint64_t seed);

}  // namespace cwac
