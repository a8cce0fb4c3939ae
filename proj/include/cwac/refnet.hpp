// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cwac/tensor.hpp"
#include "json.hpp"

namespace cwac {

enum class OpKind { linear, conv2d, relu, gelu, avgpool, flatten };

std::string_view to_string(OpKind op);
OpKind op_kind_from_string(std::string_view name);

/// Window geometry shared by conv2d (kernel, stride, pad) and avgpool
/// (kernel, stride; pad must be 0).
struct WindowGeometry {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_extent(std::size_t in) const {
    return (in + 2 * pad - kernel) / stride + 1;
  }
  bool operator==(const WindowGeometry &) const = default;
};

struct LayerSpec {
  OpKind op = OpKind::linear;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  TensorF weight;  // linear: [C_out, C_in]; conv2d: [C_out, C_in, k, k]
  TensorF bias;    // [C_out]
  WindowGeometry geometry;
  /// Explicit block id used by position=post. When no layer of a model
  /// carries one, blocks default to {linear/conv + trailing activations}.
  std::optional<std::size_t> block;

  bool has_weights() const {
    return op == OpKind::linear || op == OpKind::conv2d;
  }
  /// Length of one im2col patch (C_in * k * k), or C_in for linear.
  std::size_t patch_length() const;
  void validate(std::size_t index) const;

  bool operator==(const LayerSpec &) const = default;
};

LayerSpec make_linear(TensorF weight, TensorF bias);
LayerSpec make_conv2d(TensorF weight, TensorF bias, WindowGeometry geometry);
LayerSpec make_activation(OpKind op);
LayerSpec make_avgpool(std::size_t kernel, std::size_t stride);
LayerSpec make_flatten();

/// Floating-point reference network.
struct Model {
  std::string name;
  Shape input_shape;  // per sample, without the batch dim
  std::vector<LayerSpec> layers;
  nlohmann::json metadata = nlohmann::json::object();

  /// Checks per-layer invariants and that channel counts chain end to end.
  /// Returns the per-sample output shape.
  Shape validate() const;

  friend bool operator==(const Model &a, const Model &b) {
    return a.name == b.name && a.input_shape == b.input_shape &&
           a.layers == b.layers && a.metadata == b.metadata;
  }
};

/// Per-sample output shape of a layer. Throws ShapeError naming `index`.
Shape layer_output_shape(const LayerSpec &layer, const Shape &in,
                         std::size_t index);

float gelu(float x);

/// Runs one layer over a batch whose leading dim is N.
TensorF layer_forward(const LayerSpec &layer, const TensorF &input,
                      std::size_t index = 0);

/// Runs the whole model. `input` is either one sample (shape equal to
/// model.input_shape) or a batch ([N] + input_shape); the output mirrors it.
TensorF model_forward(const Model &model, const TensorF &input);

/// Unfolds one CHW sample into [out_h * out_w, C * k * k] patch rows.
/// Column order is (c, ky, kx), matching a [C_out, C_in, k, k] weight.
template <typename T>
std::vector<T> im2col(std::span<const T> chw, std::size_t channels,
                      std::size_t height, std::size_t width,
                      const WindowGeometry &g, T pad_value) {
  const std::size_t oh = g.out_extent(height), ow = g.out_extent(width);
  const std::size_t k = g.kernel;
  const std::size_t cols = channels * k * k;
  std::vector<T> out(oh * ow * cols, pad_value);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T *dst = out.data() + (oy * ow + ox) * cols;
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(height) ||
                ix >= static_cast<std::ptrdiff_t>(width)) {
              continue;
            }
            dst[(c * k + ky) * k + kx] =
                chw[(c * height + static_cast<std::size_t>(iy)) * width +
                    static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  return out;
}

/// [N, C] stays as is; [N, C, H, W] becomes [N*H*W, C] (one row per
/// spatial position), the layout in which per-channel statistics are taken.
TensorF to_channel_rows(const TensorF &t);
/// Inverse of to_channel_rows for a target batch shape.
TensorF from_channel_rows(const TensorF &rows, const Shape &shape);

}  // namespace cwac
