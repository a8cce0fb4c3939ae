// SPDX-License-Identifier: Apache-2.0
#include "cwac/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cwac/rng.hpp"

namespace cwac {

Model init_mlp(const TaskSpec &spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, 11));
  Model m;
  m.name = std::string(to_string(spec.kind)) + "-mlp";
  m.input_shape = {spec.dim};
  std::vector<std::size_t> widths = {spec.dim};
  widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
  widths.push_back(spec.classes);
  const std::size_t linears = widths.size() - 1;
  for (std::size_t i = 0; i < linears; ++i) {
    const std::size_t fan_in = widths[i], fan_out = widths[i + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
    TensorF w({fan_out, fan_in});
    for (float &v : w.data()) v = static_cast<float>(rng.uniform(-a, a));
    LayerSpec lin = make_linear(std::move(w), TensorF({fan_out}));
    if (spec.block_size > 1) lin.block = i / spec.block_size;
    m.layers.push_back(std::move(lin));
    if (i + 1 < linears) {
      LayerSpec act = make_activation(spec.activation);
      if (spec.block_size > 1) act.block = i / spec.block_size;
      m.layers.push_back(std::move(act));
    }
  }
  m.validate();
  return m;
}

std::vector<std::int32_t> argmax_rows(const TensorF &logits) {
  std::vector<std::int32_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<std::int32_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

namespace {

double accuracy_of(const Model &m, const Dataset &d) {
  const auto pred = argmax_rows(model_forward(m, d.x));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == d.labels[i];
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

float gelu_grad(float x) {
  constexpr float k = 0.7978845608028654f;
  const float u = k * (x + 0.044715f * x * x * x);
  const float t = std::tanh(u);
  return 0.5f * (1.0f + t) +
         0.5f * x * (1.0f - t * t) * k * (1.0f + 3.0f * 0.044715f * x * x);
}

void sgd_step(Model &m, const TensorF &xb,
              std::span<const std::int32_t> labels, float lr) {
  const std::size_t b = xb.dim(0);
  std::vector<TensorF> acts;
  acts.reserve(m.layers.size() + 1);
  acts.push_back(xb);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    acts.push_back(layer_forward(m.layers[i], acts.back(), i));
  }

  // softmax cross-entropy gradient w.r.t. logits, averaged over the batch
  TensorF grad = acts.back();
  const std::size_t k = grad.cols();
  for (std::size_t r = 0; r < b; ++r) {
    auto row = grad.row(r);
    const float mx = *std::max_element(row.begin(), row.end());
    float z = 0.0f;
    for (float &v : row) z += (v = std::exp(v - mx));
    for (std::size_t c = 0; c < k; ++c) {
      row[c] = (row[c] / z - (static_cast<std::int32_t>(c) == labels[r] ? 1.0f : 0.0f)) /
               static_cast<float>(b);
    }
  }

  for (std::size_t i = m.layers.size(); i-- > 0;) {
    LayerSpec &layer = m.layers[i];
    const TensorF &in = acts[i];
    switch (layer.op) {
      case OpKind::linear: {
        const std::size_t c_in = layer.in_channels, c_out = layer.out_channels;
        TensorF grad_in({b, c_in});
        if (i > 0) {
          for (std::size_t r = 0; r < b; ++r) {
            for (std::size_t c = 0; c < c_out; ++c) {
              const float g = grad.at(r, c);
              const float *w = layer.weight.data().data() + c * c_in;
              float *gi = grad_in.data().data() + r * c_in;
              for (std::size_t j = 0; j < c_in; ++j) gi[j] += g * w[j];
            }
          }
        }
        for (std::size_t c = 0; c < c_out; ++c) {
          float *w = layer.weight.data().data() + c * c_in;
          float db = 0.0f;
          for (std::size_t r = 0; r < b; ++r) {
            const float g = grad.at(r, c);
            db += g;
            const float *x = in.data().data() + r * c_in;
            for (std::size_t j = 0; j < c_in; ++j) w[j] -= lr * g * x[j];
          }
          layer.bias[c] -= lr * db;
        }
        grad = std::move(grad_in);
        break;
      }
      case OpKind::relu:
        for (std::size_t e = 0; e < grad.size(); ++e) {
          if (in[e] <= 0.0f) grad[e] = 0.0f;
        }
        break;
      case OpKind::gelu:
        for (std::size_t e = 0; e < grad.size(); ++e) grad[e] *= gelu_grad(in[e]);
        break;
      default:
        throw ConfigError("trainer supports linear/relu/gelu MLPs only");
    }
  }
}

}  // namespace

Model train_synthetic(const TaskSpec &spec, std::uint64_t seed) {
  const TaskData data = make_task_data(spec, seed);
  Model m = init_mlp(spec, seed);
  Rng order(derive_seed(seed, 12));
  std::vector<std::size_t> perm(data.train.size());
  std::iota(perm.begin(), perm.end(), 0);
  const auto lr = static_cast<float>(spec.learning_rate);
  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    order.shuffle(perm);
    for (std::size_t start = 0; start < perm.size(); start += spec.batch_size) {
      const std::size_t end = std::min(perm.size(), start + spec.batch_size);
      std::span<const std::size_t> idx(perm.data() + start, end - start);
      TensorF xb = gather_rows(data.train.x, idx);
      std::vector<std::int32_t> yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = data.train.labels[idx[i]];
      sgd_step(m, xb, yb, lr);
    }
  }
  const double train_acc = accuracy_of(m, data.train);
  const double test_acc = accuracy_of(m, data.test);
  m.metadata["task"] = spec.to_json();
  m.metadata["seed"] = seed;
  m.metadata["train_accuracy"] = train_acc;
  m.metadata["heldout_accuracy"] = test_acc;
  if (test_acc < spec.min_accuracy) {
    throw TrainError("held-out accuracy " + std::to_string(test_acc) +
                         " below floor " + std::to_string(spec.min_accuracy),
                     test_acc);
  }
  return m;
}

}  // namespace cwac
