// SPDX-License-Identifier: Apache-2.0
#include "cwac/calibrate.hpp"

#include <algorithm>
#include <set>

#include "cwac/dataset.hpp"
#include "cwac/rng.hpp"

namespace cwac {

std::string_view to_string(Position p) { return p == Position::all ? "all" : "post"; }

Position position_from_string(std::string_view name) {
  if (name == "all") return Position::all;
  if (name == "post") return Position::post;
  throw ConfigError("unknown position '" + std::string(name) + "' (all|post)");
}

void CalibrationConfig::validate() const {
  if (sample_count < 2) throw ConfigError("sample_count must be >= 2");
  if (range_sample_count && *range_sample_count < 2) {
    throw ConfigError("range_sample_count must be >= 2");
  }
  check_bits(weight_bits);
  check_bits(act_bits);
  estimator.validate();
}

nlohmann::json CalibrationConfig::to_json() const {
  nlohmann::json j;
  j["sample_count"] = sample_count;
  j["position"] = to_string(position);
  j["estimator"] = to_string(estimator.kind);
  j["percentile"] = estimator.percentile;
  j["weight_bits"] = weight_bits;
  j["act_bits"] = act_bits;
  j["beta_rounding"] = beta_rounding;
  j["seed"] = seed;
  j["range_sample_count"] =
      range_sample_count ? nlohmann::json(*range_sample_count) : nlohmann::json();
  j["sequential"] = sequential;
  return j;
}

CalibrationConfig CalibrationConfig::from_json(const nlohmann::json &j) {
  CalibrationConfig c;
  try {
    c.sample_count = j.at("sample_count").get<std::size_t>();
    c.position = position_from_string(j.at("position").get<std::string>());
    c.estimator.kind = range_kind_from_string(j.at("estimator").get<std::string>());
    c.estimator.percentile = j.at("percentile").get<double>();
    c.weight_bits = j.at("weight_bits").get<int>();
    c.act_bits = j.at("act_bits").get<int>();
    c.beta_rounding = j.at("beta_rounding").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("range_sample_count") && !j["range_sample_count"].is_null()) {
      c.range_sample_count = j["range_sample_count"].get<std::size_t>();
    }
    c.sequential = j.value("sequential", true);
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(std::string("calibration config: ") + e.what());
  }
  c.validate();
  return c;
}

QuantizedModel QuantizedModel::identity(const Model &model) {
  model.validate();
  QuantizedModel q;
  q.model = model;
  q.layers.resize(model.layers.size());
  return q;
}

LayerSpec QuantizedModel::effective_layer(std::size_t i) const {
  LayerSpec l = model.layers.at(i);
  if (layers.at(i).weight) {
    l.weight = dequantize(layers[i].weight->codes, layers[i].weight->params);
  }
  return l;
}

void QuantizedModel::validate() const {
  model.validate();
  if (layers.size() != model.layers.size()) {
    throw ShapeError("quantization state has " + std::to_string(layers.size()) +
                     " entries for " + std::to_string(model.layers.size()) + " layers");
  }
  if (input) input->validate();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec &l = model.layers[i];
    const LayerQuant &lq = layers[i];
    if (lq.weight) {
      if (!l.has_weights()) throw ShapeError("weight codes on a weightless op", i);
      if (lq.weight->codes.shape() != l.weight.shape()) {
        throw ShapeError("weight codes " + shape_str(lq.weight->codes.shape()) +
                             " vs weight " + shape_str(l.weight.shape()),
                         i);
      }
      lq.weight->params.validate();
    }
    if (lq.output) {
      if (!l.has_weights() && l.op != OpKind::gelu) {
        throw ShapeError("output quantization on a code-preserving op", i);
      }
      lq.output->validate();
      if (lq.output->scheme != Scheme::per_tensor) {
        throw ConfigError("layer " + std::to_string(i) +
                          ": activations use per-tensor quantization");
      }
    }
  }
}

nlohmann::json CompensatedModel::provenance() const {
  nlohmann::json j;
  j["config"] = config.to_json();
  nlohmann::json layers = nlohmann::json::array();
  std::size_t fallback = 0, clamped = 0;
  for (const auto &s : stats) {
    layers.push_back({{"layer", s.layer},
                      {"channels", s.channels},
                      {"mse_before", s.mse_before},
                      {"mse_after", s.mse_after},
                      {"fallback_count", s.fallback_count},
                      {"clamped_count", s.clamped_count}});
    fallback += s.fallback_count;
    clamped += s.clamped_count;
  }
  j["layers"] = layers;
  j["fallback_total"] = fallback;
  j["clamped_total"] = clamped;
  j["delta_scalars"] = compensation_scalars(cwac);
  return j;
}

std::vector<std::size_t> compensation_positions(const Model &model, Position p) {
  std::vector<std::size_t> all;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (model.layers[i].has_weights()) all.push_back(i);
  }
  if (p == Position::all) return all;

  // last weighted layer per block id; unlabelled layers are their own block
  std::map<std::size_t, std::size_t> last_in_block;
  std::vector<std::size_t> out;
  for (std::size_t i : all) {
    if (auto b = model.layers[i].block) {
      last_in_block[*b] = i;
    } else {
      out.push_back(i);
    }
  }
  for (const auto &[block, i] : last_in_block) out.push_back(i);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

struct PassOptions {
  bool need_float = true;
  bool capture = false;
  bool reestimate = false;
  RangeEstimator estimator;
  std::set<std::size_t> fit_at;  // fit CWAC here
  bool apply_fits = true;
  const CompensationMap *fixed = nullptr;
  std::set<std::size_t> qwt_at;  // fit the full-matrix baseline here
  const QwtMap *qwt_fixed = nullptr;
};

struct PassState {
  QuantizedModel q;
  CompensationMap cwac;
  QwtMap qwt;
  std::vector<LayerFitStats> stats;
  std::map<std::size_t, ActivationPair> pairs;
  TensorF out;
};

TensorF maybe_fake_quant(const TensorF &x, const std::optional<QuantParams> &p) {
  return p ? fake_quantize(x, *p) : x;
}

// One non-weighted op on the simulated quantized path.
TensorF sim_op(const LayerSpec &l, std::size_t i, const TensorF &x,
               const std::optional<QuantParams> &cur) {
  if (l.op == OpKind::avgpool && cur) {
    return dequantize(avgpool_codes(quantize_uniform(x, *cur), l.geometry), *cur);
  }
  return layer_forward(l, x, i);
}

PassState run_pass(QuantizedModel q, const TensorF &calib, const TensorF *range,
                   const PassOptions &o) {
  q.validate();
  const Model &m = q.model;
  PassState st;
  const bool split = range != nullptr;
  if (o.reestimate && q.input) {
    q.input = compute_affine_params(split ? *range : calib, q.input->bits, o.estimator);
  }
  std::optional<QuantParams> cur = q.input;
  TensorF cur_f = o.need_float ? calib : TensorF();
  TensorF cur_q = maybe_fake_quant(calib, cur);
  TensorF cur_r = split ? maybe_fake_quant(*range, cur) : TensorF();

  auto quantize_output = [&](std::size_t i, TensorF &yq, TensorF &yr) {
    LayerQuant &lq = q.layers[i];
    if (!lq.output) {
      if (m.layers[i].has_weights()) cur.reset();
      return;
    }
    if (o.reestimate) {
      lq.output = compute_affine_params(split ? yr : yq, lq.output->bits, o.estimator);
    }
    yq = fake_quantize(yq, *lq.output);
    if (split) yr = fake_quantize(yr, *lq.output);
    cur = lq.output;
  };

  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec &l = m.layers[i];
    if (!l.has_weights()) {
      if (o.need_float) cur_f = layer_forward(l, cur_f, i);
      cur_q = sim_op(l, i, cur_q, cur);
      if (split) cur_r = sim_op(l, i, cur_r, cur);
      if (l.op == OpKind::gelu) quantize_output(i, cur_q, cur_r);
      continue;
    }

    const LayerSpec eff = q.effective_layer(i);
    TensorF yq = layer_forward(eff, cur_q, i);
    TensorF yr = split ? layer_forward(eff, cur_r, i) : TensorF();
    TensorF yf = o.need_float ? layer_forward(l, cur_f, i) : TensorF();

    if (o.capture) {
      ActivationPair pair{to_channel_rows(yf), to_channel_rows(yq), std::nullopt};
      if (l.op == OpKind::linear) pair.x_quant = cur_q;
      st.pairs.emplace(i, std::move(pair));
    }

    const CwacParams *p = nullptr;
    if (o.fixed) {
      if (auto it = o.fixed->find(i); it != o.fixed->end()) p = &it->second;
    } else if (o.fit_at.count(i)) {
      ActivationPair pair{to_channel_rows(yf), to_channel_rows(yq), std::nullopt};
      p = &(st.cwac[i] = fit_cwac(pair));
    }
    if (p && o.apply_fits) {
      TensorF yc = apply_cwac(yq, *p);
      if (o.need_float) {
        st.stats.push_back({i, l.out_channels, mse(yf, yq), mse(yf, yc),
                            p->fallback_count(), p->clamped_count()});
      }
      yq = std::move(yc);
      if (split) yr = apply_cwac(yr, *p);
    }

    const QwtParams *w = nullptr;
    if (o.qwt_fixed) {
      if (auto it = o.qwt_fixed->find(i); it != o.qwt_fixed->end()) w = &it->second;
    } else if (o.qwt_at.count(i)) {
      ActivationPair pair{yf, yq, cur_q};
      w = &(st.qwt[i] = fit_qwt(pair));
    }
    if (w) {
      TensorF yc = apply_qwt(yq, cur_q, *w);
      if (o.need_float) {
        st.stats.push_back({i, l.out_channels, mse(yf, yq), mse(yf, yc), 0, 0});
      }
      if (split) yr = apply_qwt(yr, cur_r, *w);
      yq = std::move(yc);
    }

    quantize_output(i, yq, yr);
    cur_q = std::move(yq);
    if (split) cur_r = std::move(yr);
    if (o.need_float) cur_f = std::move(yf);
  }
  st.q = std::move(q);
  st.out = std::move(cur_q);
  return st;
}

bool same_data(const TensorF &a, const TensorF &b) {
  return a.data().data() == b.data().data() || a == b;
}

}  // namespace

QuantizedModel quantize_model(const Model &model, int weight_bits, int act_bits,
                              const RangeEstimator &est, const TensorF &range_data) {
  check_bits(weight_bits);
  check_bits(act_bits);
  est.validate();
  QuantizedModel q = QuantizedModel::identity(model);
  const QuantParams placeholder{act_bits, Scheme::per_tensor, {1.0}, {0}};
  q.input = placeholder;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const LayerSpec &l = model.layers[i];
    if (l.has_weights()) {
      q.layers[i].weight = quantize_weights_per_channel(l.weight, weight_bits);
    }
    if (l.has_weights() || l.op == OpKind::gelu) q.layers[i].output = placeholder;
  }
  PassOptions o;
  o.need_float = false;
  o.reestimate = true;
  o.estimator = est;
  return run_pass(std::move(q), range_data, nullptr, o).q;
}

std::map<std::size_t, ActivationPair> collect_pairs(const Model &model_f,
                                                    const QuantizedModel &model_q,
                                                    const TensorF &calib,
                                                    const CompensationMap &cwac) {
  model_f.validate();
  model_q.validate();
  bool same = model_f.input_shape == model_q.model.input_shape &&
              model_f.layers.size() == model_q.model.layers.size();
  for (std::size_t i = 0; same && i < model_f.layers.size(); ++i) {
    const auto &a = model_f.layers[i], &b = model_q.model.layers[i];
    same = a.op == b.op && a.in_channels == b.in_channels &&
           a.out_channels == b.out_channels && a.geometry == b.geometry;
  }
  if (!same) throw ShapeError("float and quantized models differ in architecture");
  QuantizedModel q = model_q;
  q.model = model_f;
  PassOptions o;
  o.capture = true;
  o.fixed = &cwac;
  return run_pass(std::move(q), calib, nullptr, o).pairs;
}

CompensatedModel compensate_model(const QuantizedModel &base, const TensorF &calib,
                                  const TensorF &range_data,
                                  const CalibrationConfig &config) {
  config.validate();
  const TensorF *range = same_data(calib, range_data) ? nullptr : &range_data;
  const auto positions = compensation_positions(base.model, config.position);

  PassOptions o;
  o.reestimate = true;
  o.estimator = config.estimator;
  o.fit_at = {positions.begin(), positions.end()};

  CompensatedModel out;
  out.config = config;
  if (config.sequential) {
    PassState st = run_pass(base, calib, range, o);
    out.base = std::move(st.q);
    out.cwac = std::move(st.cwac);
    out.stats = std::move(st.stats);
  } else {
    PassOptions frozen;
    frozen.fit_at = o.fit_at;
    frozen.apply_fits = false;
    CompensationMap fitted = run_pass(base, calib, nullptr, frozen).cwac;
    o.fit_at.clear();
    o.fixed = &fitted;
    PassState st = run_pass(base, calib, range, o);
    out.base = std::move(st.q);
    out.cwac = std::move(fitted);
    out.stats = std::move(st.stats);
  }
  return out;
}

TensorF calibration_pool(const Model &model) {
  if (!model.metadata.contains("task") || !model.metadata.contains("seed")) {
    throw ConfigError("model '" + model.name +
                      "' records no training task; pass calibration data explicitly");
  }
  const TaskSpec spec = TaskSpec::from_json(model.metadata["task"]);
  return make_task_data(spec, model.metadata["seed"].get<std::uint64_t>()).train.x;
}

CalibrationSets draw_calibration_sets(const TensorF &pool, const CalibrationConfig &config) {
  config.validate();
  CalibrationSets s;
  s.calib = sample_rows(pool, config.sample_count, config.seed);
  s.range = config.range_sample_count
                ? sample_rows(pool, *config.range_sample_count, derive_seed(config.seed, 101))
                : s.calib;
  return s;
}

CompensatedModel calibrate_model(const Model &model, const CalibrationConfig &config,
                                 const TensorF &pool) {
  const CalibrationSets sets = draw_calibration_sets(pool, config);
  const QuantizedModel q = quantize_model(model, config.weight_bits, config.act_bits,
                                          config.estimator, sets.range);
  return compensate_model(q, sets.calib, sets.range, config);
}

CompensatedModel calibrate_model(const Model &model, const CalibrationConfig &config) {
  return calibrate_model(model, config, calibration_pool(model));
}

TensorF simulate_forward(const QuantizedModel &q, const TensorF &x,
                         const CompensationMap &cwac) {
  PassOptions o;
  o.need_float = false;
  o.fixed = &cwac;
  return run_pass(q, x, nullptr, o).out;
}

QwtModel compensate_qwt(const QuantizedModel &base, const TensorF &calib,
                        const TensorF &range_data,
                        const std::vector<std::size_t> &positions,
                        const RangeEstimator &est) {
  for (std::size_t i : positions) {
    if (i >= base.model.layers.size() || base.model.layers[i].op != OpKind::linear) {
      throw ConfigError("full-matrix baseline supports linear layers only (layer " +
                        std::to_string(i) + ")");
    }
  }
  PassOptions o;
  o.reestimate = true;
  o.qwt_at = {positions.begin(), positions.end()};
  o.estimator = est;
  PassState st = run_pass(base, calib, same_data(calib, range_data) ? nullptr : &range_data, o);
  return {std::move(st.q), std::move(st.qwt)};
}

TensorF simulate_qwt_forward(const QwtModel &m, const TensorF &x) {
  PassOptions o;
  o.need_float = false;
  o.qwt_fixed = &m.qwt;
  return run_pass(m.base, x, nullptr, o).out;
}

FusedModel fuse_model(const QuantizedModel &q, const CompensationMap &cwac,
                      bool beta_rounding) {
  q.validate();
  if (!q.input) throw ConfigError("model has no input quantization; nothing to fuse");
  for (const auto &[i, p] : cwac) {
    if (i >= q.layers.size() || !q.model.layers[i].has_weights()) {
      throw ConfigError("compensation keyed to layer " + std::to_string(i) +
                        ", which is not a linear/conv layer");
    }
  }
  FusedModel f;
  f.name = q.model.name;
  f.input_shape = q.model.input_shape;
  f.input = IntActivationParams::from(*q.input);
  f.beta_rounding = beta_rounding;
  IntActivationParams cur = f.input;
  for (std::size_t i = 0; i < q.layers.size(); ++i) {
    const LayerSpec &l = q.model.layers[i];
    const LayerQuant &lq = q.layers[i];
    switch (l.op) {
      case OpKind::linear:
      case OpKind::conv2d: {
        if (!lq.weight || !lq.output) {
          throw ConfigError("layer " + std::to_string(i) +
                            " lacks weight or output quantization");
        }
        const auto out = IntActivationParams::from(*lq.output);
        auto it = cwac.find(i);
        const CwacParams p =
            it != cwac.end() ? it->second : CwacParams::identity(l.out_channels);
        f.ops.emplace_back(fuse_layer(lq.weight->codes, l.bias.data(), cur,
                                      lq.weight->params, out, p,
                                      {i, l.geometry, beta_rounding}));
        cur = out;
        break;
      }
      case OpKind::relu:
        f.ops.emplace_back(IntRelu{cur.zero_point});
        break;
      case OpKind::gelu: {
        if (!lq.output) {
          throw ConfigError("layer " + std::to_string(i) + " lacks output quantization");
        }
        const auto out = IntActivationParams::from(*lq.output);
        f.ops.emplace_back(build_gelu_lut(cur, out));
        cur = out;
        break;
      }
      case OpKind::avgpool:
        f.ops.emplace_back(IntAvgPool{l.geometry});
        break;
      case OpKind::flatten:
        f.ops.emplace_back(IntFlatten{});
        break;
    }
  }
  f.output = cur;
  return f;
}

FusedModel fuse_model(const CompensatedModel &comp, bool beta_rounding) {
  return fuse_model(comp.base, comp.cwac, beta_rounding);
}

DifferentialReport differential_check(const QuantizedModel &q, const CompensationMap &cwac,
                                      const FusedModel &fused, const TensorF &x,
                                      RequantMode mode) {
  const IntRunResult run = run_int_model(fused, x, {mode, true});
  DifferentialReport rep;
  std::size_t k = 0;
  for (const FusedOp &op : fused.ops) {
    const auto *l = std::get_if<FusedLayerParams>(&op);
    if (!l) continue;
    const std::size_t i = l->layer_index;
    const TensorF in = dequantize(run.trace.layer_inputs.at(k), l->input.to_quant_params());
    TensorF y = layer_forward(q.effective_layer(i), in, i);
    if (auto it = cwac.find(i); it != cwac.end()) y = apply_cwac(y, it->second);
    const TensorU8 sim = quantize_uniform(y, l->output.to_quant_params());
    const TensorU8 &got = run.trace.layer_outputs.at(k);
    for (std::size_t e = 0; e < sim.size(); ++e) {
      const std::int32_t d = std::abs(static_cast<std::int32_t>(sim[e]) - got[e]);
      rep.mismatched += d != 0;
      rep.max_step_diff = std::max(rep.max_step_diff, d);
    }
    rep.elements += sim.size();
    ++k;
  }
  return rep;
}

std::size_t compensation_scalars(const CompensationMap &cwac) {
  std::size_t n = 0;
  for (const auto &[i, p] : cwac) n += p.alpha.size() + p.beta.size();
  return n;
}

std::size_t compensation_scalars(const QwtMap &qwt) {
  std::size_t n = 0;
  for (const auto &[i, p] : qwt) n += p.weight.size() + p.bias.size();
  return n;
}

std::size_t quantized_model_bytes(const QuantizedModel &q) {
  std::size_t bytes = 0;
  auto act = [](const std::optional<QuantParams> &p) {
    return p ? std::size_t{kScalarBytes + 1} : std::size_t{0};
  };
  bytes += act(q.input);
  for (std::size_t i = 0; i < q.layers.size(); ++i) {
    const LayerSpec &l = q.model.layers[i];
    const LayerQuant &lq = q.layers[i];
    if (lq.weight) {
      const auto bits = static_cast<std::size_t>(lq.weight->params.bits);
      bytes += (lq.weight->codes.size() * bits + 7) / 8;
      bytes += lq.weight->params.channels() * (kScalarBytes + 1);
      bytes += l.bias.size() * kScalarBytes;
    } else if (l.has_weights()) {
      bytes += (l.weight.size() + l.bias.size()) * kScalarBytes;
    }
    bytes += act(lq.output);
  }
  return bytes;
}

std::size_t fused_param_count(const FusedModel &m) {
  struct Counter {
    std::size_t n = 0;
    void operator()(const FusedLayerParams &l) {
      n += l.weight_q.size() + l.weight_zero_points.size() + l.bias_acc.size() +
           l.const_acc.size() + 2 * l.multipliers.size() + 1;
    }
    void operator()(const IntRelu &) { n += 1; }
    void operator()(const IntLut &t) { n += t.table.size(); }
    void operator()(const IntAvgPool &) {}
    void operator()(const IntFlatten &) {}
  } c;
  for (const auto &op : m.ops) std::visit(c, op);
  return c.n + 4;  // input and output (scale, zero-point)
}

}  // namespace cwac
