// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "cwac/dataset.hpp"
#include "cwac/refnet.hpp"

namespace cwac {

/// Builds an MLP for `spec` with seeded He-uniform init and zero biases.
Model init_mlp(const TaskSpec &spec, std::uint64_t seed);

/// Trains an MLP on the task with plain minibatch SGD and softmax
/// cross-entropy. Single-threaded and bit-reproducible for a fixed seed.
/// The returned model's metadata records the task, the seed and the
/// held-out accuracy. Throws TrainError below spec.min_accuracy.
Model train_synthetic(const TaskSpec &spec, std::uint64_t seed);

/// Argmax of each row of a [N, classes] logit batch.
std::vector<std::int32_t> argmax_rows(const TensorF &logits);

}  // namespace cwac
