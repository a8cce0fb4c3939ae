// SPDX-License-Identifier: Apache-2.0
#include "cwac/refnet.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cwac {

std::string_view to_string(OpKind op) {
  switch (op) {
    case OpKind::linear:
      return "linear";
    case OpKind::conv2d:
      return "conv2d";
    case OpKind::relu:
      return "relu";
    case OpKind::gelu:
      return "gelu";
    case OpKind::avgpool:
      return "avgpool";
    case OpKind::flatten:
      return "flatten";
  }
  return "?";
}

OpKind op_kind_from_string(std::string_view name) {
  for (OpKind op : {OpKind::linear, OpKind::conv2d, OpKind::relu, OpKind::gelu,
                    OpKind::avgpool, OpKind::flatten}) {
    if (to_string(op) == name) return op;
  }
  throw ConfigError("unknown layer op '" + std::string(name) + "'");
}

std::size_t LayerSpec::patch_length() const {
  return op == OpKind::conv2d ? in_channels * geometry.kernel * geometry.kernel
                              : in_channels;
}

void LayerSpec::validate(std::size_t index) const {
  if (!has_weights()) {
    if (!weight.empty() || !bias.empty()) {
      throw ShapeError(std::string(to_string(op)) + " layer carries weights",
                       index);
    }
    if (op == OpKind::avgpool && (geometry.pad != 0 || geometry.kernel == 0 ||
                                  geometry.stride == 0)) {
      throw ShapeError("avgpool needs kernel, stride > 0 and pad 0", index);
    }
    return;
  }
  if (in_channels == 0 || out_channels == 0) {
    throw ShapeError("zero channel count", index);
  }
  Shape expect = {out_channels, in_channels};
  if (op == OpKind::conv2d) {
    if (geometry.kernel == 0 || geometry.stride == 0) {
      throw ShapeError("conv2d needs kernel and stride > 0", index);
    }
    expect.push_back(geometry.kernel);
    expect.push_back(geometry.kernel);
  }
  if (weight.shape() != expect) {
    throw ShapeError("weight shape " + shape_str(weight.shape()) +
                         " does not match expected " + shape_str(expect),
                     index);
  }
  if (bias.shape() != Shape{out_channels}) {
    throw ShapeError("bias length " + std::to_string(bias.size()) +
                         " != out_channels " + std::to_string(out_channels),
                     index);
  }
}

LayerSpec make_linear(TensorF weight, TensorF bias) {
  LayerSpec l;
  l.op = OpKind::linear;
  if (weight.rank() != 2) throw ShapeError("linear weight must be rank 2");
  l.out_channels = weight.dim(0);
  l.in_channels = weight.dim(1);
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  l.validate(0);
  return l;
}

LayerSpec make_conv2d(TensorF weight, TensorF bias, WindowGeometry geometry) {
  LayerSpec l;
  l.op = OpKind::conv2d;
  if (weight.rank() != 4) throw ShapeError("conv2d weight must be rank 4");
  l.out_channels = weight.dim(0);
  l.in_channels = weight.dim(1);
  l.geometry = geometry;
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  l.validate(0);
  return l;
}

LayerSpec make_activation(OpKind op) {
  if (op != OpKind::relu && op != OpKind::gelu) {
    throw ConfigError("not an activation");
  }
  LayerSpec l;
  l.op = op;
  return l;
}

LayerSpec make_avgpool(std::size_t kernel, std::size_t stride) {
  LayerSpec l;
  l.op = OpKind::avgpool;
  l.geometry = {kernel, stride, 0};
  return l;
}

LayerSpec make_flatten() {
  LayerSpec l;
  l.op = OpKind::flatten;
  return l;
}

Shape layer_output_shape(const LayerSpec &layer, const Shape &in,
                         std::size_t index) {
  switch (layer.op) {
    case OpKind::linear:
      if (in.size() != 1 || in[0] != layer.in_channels) {
        throw ShapeError("linear expects [" +
                             std::to_string(layer.in_channels) + "], got " +
                             shape_str(in),
                         index);
      }
      return {layer.out_channels};
    case OpKind::conv2d: {
      const auto &g = layer.geometry;
      if (in.size() != 3 || in[0] != layer.in_channels) {
        throw ShapeError("conv2d expects [" +
                             std::to_string(layer.in_channels) +
                             ", H, W], got " + shape_str(in),
                         index);
      }
      if (in[1] + 2 * g.pad < g.kernel || in[2] + 2 * g.pad < g.kernel) {
        throw ShapeError("conv2d kernel larger than padded input", index);
      }
      return {layer.out_channels, g.out_extent(in[1]), g.out_extent(in[2])};
    }
    case OpKind::avgpool: {
      const auto &g = layer.geometry;
      if (in.size() != 3 || in[1] < g.kernel || in[2] < g.kernel) {
        throw ShapeError("avgpool expects [C, H, W] at least kernel-sized, got " +
                             shape_str(in),
                         index);
      }
      return {in[0], g.out_extent(in[1]), g.out_extent(in[2])};
    }
    case OpKind::flatten:
      return {shape_numel(in)};
    case OpKind::relu:
    case OpKind::gelu:
      return in;
  }
  return in;
}

Shape Model::validate() const {
  if (input_shape.empty()) throw ShapeError("model has no input shape");
  Shape s = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].validate(i);
    s = layer_output_shape(layers[i], s, i);
  }
  return s;
}

float gelu(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2 / pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

namespace {

// rows[P, K] x weight[C_out, K]^T + bias -> out[P, C_out]
void dense(std::span<const float> rows, std::size_t p, std::size_t k,
           const TensorF &weight, const TensorF &bias, std::span<float> out) {
  const std::size_t c_out = bias.size();
  const float *w = weight.data().data();
  for (std::size_t r = 0; r < p; ++r) {
    const float *x = rows.data() + r * k;
    for (std::size_t c = 0; c < c_out; ++c) {
      const float *wc = w + c * k;
      float acc = 0.0f;
      for (std::size_t j = 0; j < k; ++j) acc += wc[j] * x[j];
      out[r * c_out + c] = acc + bias[c];
    }
  }
}

}  // namespace

TensorF layer_forward(const LayerSpec &layer, const TensorF &input,
                      std::size_t index) {
  if (input.rank() < 2) {
    throw ShapeError("layer input needs a batch dim, got " +
                         shape_str(input.shape()),
                     index);
  }
  const std::size_t n = input.dim(0);
  const Shape in_sample(input.shape().begin() + 1, input.shape().end());
  Shape out_sample = layer_output_shape(layer, in_sample, index);
  Shape out_shape = {n};
  out_shape.insert(out_shape.end(), out_sample.begin(), out_sample.end());

  switch (layer.op) {
    case OpKind::linear: {
      TensorF out(out_shape);
      dense(input.data(), n, layer.in_channels, layer.weight, layer.bias,
            out.data());
      return out;
    }
    case OpKind::conv2d: {
      TensorF out(out_shape);
      const std::size_t h = in_sample[1], w = in_sample[2];
      const std::size_t oh = out_sample[1], ow = out_sample[2];
      const std::size_t p = oh * ow, k = layer.patch_length();
      const std::size_t c_out = layer.out_channels;
      const std::size_t in_stride = shape_numel(in_sample);
      std::vector<float> prod(p * c_out);
      for (std::size_t s = 0; s < n; ++s) {
        auto cols = im2col<float>(input.data().subspan(s * in_stride, in_stride),
                                  layer.in_channels, h, w, layer.geometry, 0.0f);
        dense(cols, p, k, layer.weight, layer.bias, prod);
        float *dst = out.data().data() + s * c_out * p;
        for (std::size_t q = 0; q < p; ++q) {
          for (std::size_t c = 0; c < c_out; ++c) dst[c * p + q] = prod[q * c_out + c];
        }
      }
      return out;
    }
    case OpKind::relu: {
      TensorF out = input;
      for (float &v : out.data()) v = std::max(v, 0.0f);
      return out;
    }
    case OpKind::gelu: {
      TensorF out = input;
      for (float &v : out.data()) v = gelu(v);
      return out;
    }
    case OpKind::avgpool: {
      TensorF out(out_shape);
      const auto &g = layer.geometry;
      const std::size_t c = in_sample[0], h = in_sample[1], w = in_sample[2];
      const std::size_t oh = out_sample[1], ow = out_sample[2];
      const float inv = 1.0f / static_cast<float>(g.kernel * g.kernel);
      for (std::size_t s = 0; s < n * c; ++s) {
        const float *src = input.data().data() + s * h * w;
        float *dst = out.data().data() + s * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            float acc = 0.0f;
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                acc += src[(oy * g.stride + ky) * w + ox * g.stride + kx];
              }
            }
            dst[oy * ow + ox] = acc * inv;
          }
        }
      }
      return out;
    }
    case OpKind::flatten:
      return input.reshaped(std::move(out_shape));
  }
  return input;
}

TensorF model_forward(const Model &model, const TensorF &input) {
  const bool single = input.shape() == model.input_shape;
  Shape batched = input.shape();
  if (single) batched.insert(batched.begin(), 1);
  if (batched.size() != model.input_shape.size() + 1 ||
      !std::equal(model.input_shape.begin(), model.input_shape.end(),
                  batched.begin() + 1)) {
    throw ShapeError("model input shape " + shape_str(input.shape()) +
                     " does not match " + shape_str(model.input_shape));
  }
  TensorF x = input.reshaped(batched);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    x = layer_forward(model.layers[i], x, i);
  }
  if (single) {
    Shape s(x.shape().begin() + 1, x.shape().end());
    return x.reshaped(std::move(s));
  }
  return x;
}

TensorF to_channel_rows(const TensorF &t) {
  if (t.rank() == 2) return t;
  if (t.rank() != 4) {
    throw ShapeError("channel rows need [N, C] or [N, C, H, W], got " +
                     shape_str(t.shape()));
  }
  const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  TensorF out({n * hw, c});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float *src = t.data().data() + (s * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) out.at(s * hw + q, ch) = src[q];
    }
  }
  return out;
}

TensorF from_channel_rows(const TensorF &rows, const Shape &shape) {
  if (shape.size() == 2) return rows.reshaped(shape);
  const std::size_t n = shape[0], c = shape[1], hw = shape[2] * shape[3];
  if (rows.rank() != 2 || rows.rows() != n * hw || rows.cols() != c) {
    throw ShapeError("channel rows " + shape_str(rows.shape()) +
                     " do not fit " + shape_str(shape));
  }
  TensorF out(shape);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float *dst = out.data().data() + (s * c + ch) * hw;
      for (std::size_t q = 0; q < hw; ++q) dst[q] = rows.at(s * hw + q, ch);
    }
  }
  return out;
}

}  // namespace cwac
