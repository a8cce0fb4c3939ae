// SPDX-License-Identifier: Apache-2.0
#include "cwac/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "cwac/trainer.hpp"

namespace cwac {

double accuracy(std::span<const std::int32_t> predicted,
                std::span<const std::int32_t> labels) {
  if (labels.empty()) throw ConfigError("accuracy of an empty dataset");
  if (predicted.size() != labels.size()) {
    throw ShapeError("prediction count differs from label count");
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double accuracy(const std::function<TensorF(const TensorF &)> &runner,
                const Dataset &data) {
  if (data.size() == 0) throw ConfigError("accuracy of an empty dataset");
  return accuracy(argmax_rows(runner(data.x)), data.labels);
}

double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::string> id_cells(const EvalRow &r) {
  return {r.axis,
          std::to_string(r.seed),
          r.task,
          std::to_string(r.bits_w),
          std::to_string(r.bits_a),
          std::to_string(r.n_calib),
          r.position,
          r.beta_rounding ? "1" : "0",
          r.estimator,
          r.method};
}

const std::vector<std::string> kIdColumns = {
    "axis",     "seed",     "task",          "bits_w",    "bits_a",
    "n_calib",  "position", "beta_rounding", "estimator", "method"};

std::vector<std::pair<std::string, double>> metric_cells(const EvalRow &r) {
  std::vector<std::pair<std::string, double>> m = {
      {"accuracy", r.accuracy},
      {"baseline_accuracy", r.baseline_accuracy},
      {"float_accuracy", r.float_accuracy},
      {"output_mse", r.output_mse}};
  for (std::size_t k = 0; k < r.layer_mse.size(); ++k) {
    m.emplace_back("layer_mse[" + std::to_string(k) + "]", r.layer_mse[k]);
  }
  m.emplace_back("model_size_bytes", static_cast<double>(r.model_size_bytes));
  m.emplace_back("delta_scalars", static_cast<double>(r.delta_scalars));
  m.emplace_back("delta_bytes", static_cast<double>(r.delta_bytes));
  m.emplace_back("kernel_float_ops", static_cast<double>(r.kernel_float_ops));
  return m;
}

void write_line(std::ostringstream &os, const std::vector<std::string> &cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) os << ',';
    os << cells[i];
  }
  os << '\n';
}

}  // namespace

const std::vector<std::string> &EvalReport::columns() {
  static const std::vector<std::string> cols = [] {
    std::vector<std::string> c = kIdColumns;
    for (const char *m : {"accuracy", "baseline_accuracy", "float_accuracy", "output_mse",
                          "layer_mse", "model_size_bytes", "delta_scalars", "delta_bytes",
                          "kernel_float_ops"}) {
      c.emplace_back(m);
    }
    return c;
  }();
  return cols;
}

void EvalReport::validate() const {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const auto &[name, v] : metric_cells(rows[i])) {
      if (!std::isfinite(v)) {
        throw Error("report row " + std::to_string(i) + ": " + name + " is not finite");
      }
    }
  }
}

std::string EvalReport::to_csv() const {
  validate();
  std::ostringstream os;
  write_line(os, columns());
  for (const EvalRow &r : rows) {
    auto cells = id_cells(r);
    cells.push_back(num(r.accuracy));
    cells.push_back(num(r.baseline_accuracy));
    cells.push_back(num(r.float_accuracy));
    cells.push_back(num(r.output_mse));
    std::string layers;
    for (std::size_t k = 0; k < r.layer_mse.size(); ++k) {
      if (k) layers += ';';
      layers += num(r.layer_mse[k]);
    }
    cells.push_back(layers);
    cells.push_back(std::to_string(r.model_size_bytes));
    cells.push_back(std::to_string(r.delta_scalars));
    cells.push_back(std::to_string(r.delta_bytes));
    cells.push_back(std::to_string(r.kernel_float_ops));
    write_line(os, cells);
  }
  return os.str();
}

std::string EvalReport::to_long_csv() const {
  validate();
  std::ostringstream os;
  auto header = kIdColumns;
  header.emplace_back("metric");
  header.emplace_back("value");
  write_line(os, header);
  for (const EvalRow &r : rows) {
    const auto ids = id_cells(r);
    for (const auto &[name, v] : metric_cells(r)) {
      auto cells = ids;
      cells.push_back(name);
      cells.push_back(num(v));
      write_line(os, cells);
    }
  }
  return os.str();
}

void EvalReport::append(const EvalReport &other) {
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
}

std::vector<DiagonalRow> figure1b_report(const Model &model, int bits,
                                         const TensorF &calib, const RangeEstimator &est,
                                         std::uint64_t seed) {
  const QuantizedModel q = quantize_model(model, bits, bits, est, calib);
  const auto pairs = collect_pairs(model, q, calib);
  std::vector<DiagonalRow> rows;
  for (const auto &[i, pair] : pairs) {
    const LayerSpec &l = model.layers[i];
    if (l.op != OpKind::linear || l.in_channels != l.out_channels) continue;
    const QwtParams pre = fit_qwt(pair);
    QwtParams post = fit_qwt(ActivationPair{pair.y_full, pair.y_quant, pair.y_quant});
    // residual fit on the layer's own output plus the identity branch
    for (std::size_t c = 0; c < l.out_channels; ++c) post.weight.at(c, c) += 1.0f;
    rows.push_back({seed, i, l.out_channels, diagonal_energy(pre.weight),
                    diagonal_energy(post.weight)});
  }
  return rows;
}

std::string diagonal_csv(const std::vector<DiagonalRow> &rows) {
  std::ostringstream os;
  os << "seed,layer,channels,pre_energy,post_energy\n";
  for (const auto &r : rows) {
    os << r.seed << ',' << r.layer << ',' << r.channels << ',' << num(r.pre_energy) << ','
       << num(r.post_energy) << '\n';
  }
  return os.str();
}

BetaBoundCheck check_beta_bound(const FusedModel &fused, const TensorF &x) {
  if (!fused.beta_rounding) throw ConfigError("beta bound check needs rounded offsets");
  const IntRunResult run = run_int_model(fused, x, {RequantMode::fixed_point, true});
  BetaBoundCheck out;
  std::size_t k = 0;
  for (const FusedOp &op : fused.ops) {
    const auto *l = std::get_if<FusedLayerParams>(&op);
    if (!l) continue;
    const TensorI32 &acc = run.trace.accumulators.at(k++);
    const auto &ref = l->reference;
    const double sr = l->output.scale;
    for (std::size_t r = 0; r < acc.rows(); ++r) {
      for (std::size_t c = 0; c < acc.cols(); ++c) {
        const double step = ref.real_multipliers[c] * sr;  // alpha S_x S_W
        const double a = acc.at(r, c);
        const double rounded = step * a;
        const double unrounded = step * (a - ref.beta_offsets[c]) + ref.beta[c];
        const double ratio = std::abs(rounded - unrounded) / (0.5 * step);
        out.max_ratio = std::max(out.max_ratio, ratio);
        out.violations += ratio > 1.0 + 1e-9;
        ++out.elements;
      }
    }
  }
  return out;
}

Bench::Bench(TaskSpec task) : task_(std::move(task)) { task_->validate(); }

Bench::Bench(Model model, TaskData data) : fixed_(Entry{std::move(model), std::move(data)}) {
  fixed_->model.validate();
}

Bench::Entry &Bench::entry(std::uint64_t seed) {
  if (fixed_) return *fixed_;
  auto it = cache_.find(seed);
  if (it == cache_.end()) {
    it = cache_.emplace(seed, Entry{train_synthetic(*task_, seed), make_task_data(*task_, seed)})
             .first;
  }
  return it->second;
}

const Model &Bench::model(std::uint64_t seed) { return entry(seed).model; }
const TaskData &Bench::data(std::uint64_t seed) { return entry(seed).data; }

std::string Bench::task_name() const {
  return task_ ? std::string(to_string(task_->kind)) : fixed_->model.name;
}

namespace {

EvalRow describe(const std::string &axis, std::uint64_t seed, const std::string &task,
                 const CalibrationConfig &c, const std::string &method) {
  EvalRow r;
  r.axis = axis;
  r.seed = seed;
  r.task = task;
  r.bits_w = c.weight_bits;
  r.bits_a = c.act_bits;
  r.n_calib = c.sample_count;
  r.position = to_string(c.position);
  r.beta_rounding = c.beta_rounding;
  r.estimator = std::string(to_string(c.estimator.kind));
  if (c.estimator.kind == RangeKind::percentile) r.estimator += ":" + num(c.estimator.percentile);
  r.method = method;
  return r;
}

struct CellState {
  CalibrationConfig config;
  QuantizedModel quant;
  CompensatedModel comp;
  TensorF float_logits;
  double float_accuracy = 0.0;
  double baseline_accuracy = 0.0;
};

CellState prepare(const Model &model, const TaskData &data, CalibrationConfig config,
                  std::uint64_t seed) {
  CellState s;
  config.seed = seed;
  s.config = config;
  const CalibrationSets sets = draw_calibration_sets(data.train.x, config);
  s.quant = quantize_model(model, config.weight_bits, config.act_bits, config.estimator,
                           sets.range);
  s.comp = compensate_model(s.quant, sets.calib, sets.range, config);
  s.float_logits = model_forward(model, data.test.x);
  s.float_accuracy = accuracy(argmax_rows(s.float_logits), data.test.labels);
  const IntRunResult base = run_int_model(fuse_model(s.quant, {}, true), data.test.x);
  s.baseline_accuracy = accuracy(argmax_rows(base.logits), data.test.labels);
  return s;
}

}  // namespace

EvalRow Bench::run_cell(std::uint64_t seed, const CalibrationConfig &config,
                        const std::string &axis) {
  Entry &e = entry(seed);
  const CellState s = prepare(e.model, e.data, config, seed);
  const IntRunResult run =
      run_int_model(fuse_model(s.comp, s.config.beta_rounding), e.data.test.x);

  EvalRow r = describe(axis, seed, task_name(), s.config, "cwac");
  r.accuracy = accuracy(argmax_rows(run.logits), e.data.test.labels);
  r.baseline_accuracy = s.baseline_accuracy;
  r.float_accuracy = s.float_accuracy;
  r.output_mse = mse(run.logits, s.float_logits);
  for (const auto &st : s.comp.stats) r.layer_mse.push_back(st.mse_after);
  r.model_size_bytes = quantized_model_bytes(s.comp.base);
  r.delta_scalars = compensation_scalars(s.comp.cwac);
  r.delta_bytes = r.delta_scalars * kScalarBytes;
  r.kernel_float_ops = run.trace.kernel_float_ops;
  return r;
}

EvalReport Bench::ablate_calibration_size(const std::vector<std::size_t> &sizes,
                                          const CalibrationConfig &base,
                                          const std::vector<std::uint64_t> &seeds) {
  EvalReport rep;
  for (std::uint64_t seed : seeds) {
    const std::size_t pool = data(seed).train.size();
    for (std::size_t n : sizes) {
      if (n > pool) {
        throw ConfigError("calibration size " + std::to_string(n) + " exceeds the pool of " +
                          std::to_string(pool));
      }
      CalibrationConfig c = base;
      c.sample_count = n;
      rep.rows.push_back(run_cell(seed, c, "calibration_size"));
    }
  }
  return rep;
}

EvalReport Bench::ablate_position(const CalibrationConfig &base,
                                  const std::vector<std::uint64_t> &seeds) {
  EvalReport rep;
  for (std::uint64_t seed : seeds) {
    for (Position p : {Position::all, Position::post}) {
      CalibrationConfig c = base;
      c.position = p;
      rep.rows.push_back(run_cell(seed, c, "position"));
    }
  }
  return rep;
}

EvalReport Bench::ablate_beta_rounding(const CalibrationConfig &base,
                                       const std::vector<std::uint64_t> &seeds) {
  EvalReport rep;
  for (std::uint64_t seed : seeds) {
    for (bool rounding : {true, false}) {
      CalibrationConfig c = base;
      c.beta_rounding = rounding;
      rep.rows.push_back(run_cell(seed, c, "beta_rounding"));
    }
  }
  return rep;
}

EvalReport Bench::ablate_bitwidth(const std::vector<int> &bits, const CalibrationConfig &base,
                                  const std::vector<std::uint64_t> &seeds) {
  EvalReport rep;
  for (std::uint64_t seed : seeds) {
    for (int b : bits) {
      CalibrationConfig c = base;
      c.weight_bits = b;
      c.act_bits = b;
      rep.rows.push_back(run_cell(seed, c, "bitwidth"));
    }
  }
  return rep;
}

EvalReport Bench::compare_methods(const CalibrationConfig &base,
                                  const std::vector<std::uint64_t> &seeds) {
  EvalReport rep;
  for (std::uint64_t seed : seeds) {
    Entry &e = entry(seed);
    EvalRow cw = run_cell(seed, base, "method");

    EvalRow q = cw;
    q.method = "quant";
    q.accuracy = cw.baseline_accuracy;
    {
      CalibrationConfig c = base;
      c.seed = seed;
      const CalibrationSets sets = draw_calibration_sets(e.data.train.x, c);
      const QuantizedModel qm =
          quantize_model(e.model, c.weight_bits, c.act_bits, c.estimator, sets.range);
      const IntRunResult run = run_int_model(fuse_model(qm, {}, true), e.data.test.x);
      q.output_mse = mse(run.logits, model_forward(e.model, e.data.test.x));
      q.layer_mse.clear();
      q.delta_scalars = 0;
      q.delta_bytes = 0;
      q.kernel_float_ops = run.trace.kernel_float_ops;

      std::vector<std::size_t> positions;
      for (std::size_t i : compensation_positions(e.model, c.position)) {
        if (e.model.layers[i].op == OpKind::linear) positions.push_back(i);
      }
      const QwtModel qwt = compensate_qwt(qm, sets.calib, sets.range, positions, c.estimator);
      const TensorF logits = simulate_qwt_forward(qwt, e.data.test.x);
      EvalRow w = cw;
      w.method = "qwt";
      w.accuracy = accuracy(argmax_rows(logits), e.data.test.labels);
      w.output_mse = mse(logits, model_forward(e.model, e.data.test.x));
      w.layer_mse.clear();
      w.model_size_bytes = quantized_model_bytes(qwt.base);
      w.delta_scalars = compensation_scalars(qwt.qwt);
      w.delta_bytes = w.delta_scalars * kScalarBytes;
      // one float multiply-add per extra weight, per held-out sample
      std::uint64_t per_sample = 0;
      for (const auto &[i, p] : qwt.qwt) per_sample += p.weight.size() + p.bias.size();
      w.kernel_float_ops = per_sample * e.data.test.size();
      rep.rows.push_back(q);
      rep.rows.push_back(cw);
      rep.rows.push_back(w);
    }
  }
  return rep;
}

std::vector<DiagonalRow> Bench::figure1b(int bits, const CalibrationConfig &base,
                                         const std::vector<std::uint64_t> &seeds) {
  std::vector<DiagonalRow> rows;
  for (std::uint64_t seed : seeds) {
    CalibrationConfig c = base;
    c.seed = seed;
    const CalibrationSets sets = draw_calibration_sets(data(seed).train.x, c);
    auto r = figure1b_report(model(seed), bits, sets.calib, c.estimator, seed);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  return rows;
}

std::vector<std::string> check_report(const std::string &axis, const EvalReport &report) {
  std::vector<std::string> fail;
  for (const EvalRow &r : report.rows) {
    if (r.method == "cwac" && r.beta_rounding && r.kernel_float_ops != 0) {
      fail.push_back("seed " + std::to_string(r.seed) + ": float ops inside integer kernels");
    }
  }
  auto medians_by = [&](auto key, auto value) {
    std::map<decltype(key(report.rows[0])), std::vector<double>> groups;
    for (const EvalRow &r : report.rows) {
      if (r.method == "cwac") groups[key(r)].push_back(value(r));
    }
    std::map<decltype(key(report.rows[0])), double> out;
    for (auto &[k, v] : groups) out[k] = median(v);
    return out;
  };
  if (report.rows.empty()) return fail;

  if (axis == "calibration_size") {
    const auto m = medians_by([](const EvalRow &r) { return r.n_calib; },
                              [](const EvalRow &r) { return r.output_mse; });
    double prev = 0.0;
    bool first = true;
    for (const auto &[n, v] : m) {
      if (!first && v > prev) {
        fail.push_back("median output MSE rises at N=" + std::to_string(n));
      }
      prev = v;
      first = false;
    }
  } else if (axis == "position") {
    const auto m = medians_by([](const EvalRow &r) { return r.position; },
                              [](const EvalRow &r) { return r.accuracy; });
    if (m.count("all") && m.count("post") && m.at("all") < m.at("post")) {
      fail.push_back("median accuracy(all) below accuracy(post)");
    }
  } else if (axis == "beta_rounding") {
    std::map<std::uint64_t, std::map<bool, double>> by_seed;
    for (const EvalRow &r : report.rows) by_seed[r.seed][r.beta_rounding] = r.accuracy;
    std::vector<double> gaps;
    for (auto &[seed, v] : by_seed) {
      if (v.count(true) && v.count(false)) gaps.push_back(std::abs(v[true] - v[false]));
    }
    if (!gaps.empty() && median(gaps) > 0.005) {
      fail.push_back("median rounded/unrounded accuracy gap above 0.5%");
    }
  } else if (axis == "bitwidth") {
    const auto m = medians_by([](const EvalRow &r) { return r.bits_w; },
                              [](const EvalRow &r) { return r.accuracy - r.baseline_accuracy; });
    if (m.size() >= 2 && !(m.begin()->second > m.rbegin()->second)) {
      fail.push_back("low-bit recovery margin not above the high-bit margin");
    }
  } else if (axis == "method") {
    std::map<std::uint64_t, std::map<std::string, std::size_t>> by_seed;
    for (const EvalRow &r : report.rows) by_seed[r.seed][r.method] = r.delta_scalars;
    for (auto &[seed, v] : by_seed) {
      if (v.count("cwac") && v.count("qwt") && v["cwac"] >= v["qwt"]) {
        fail.push_back("seed " + std::to_string(seed) + ": compensation delta not below baseline");
      }
    }
  }
  return fail;
}

}  // namespace cwac
