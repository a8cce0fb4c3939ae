// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cwac/evalbench.hpp"
#include "cwac/trainer.hpp"

using namespace cwac;

namespace {

TaskSpec quick_task() {
  TaskSpec t = TaskSpec::preset("blobs");
  t.epochs = 4;
  t.test_count = 500;
  return t;
}

CalibrationConfig quick_config() {
  CalibrationConfig c;
  c.weight_bits = c.act_bits = 4;
  c.sample_count = 128;
  return c;
}

EvalRow row(std::string axis, std::uint64_t seed, std::string method) {
  EvalRow r;
  r.axis = std::move(axis);
  r.seed = seed;
  r.method = std::move(method);
  return r;
}

std::size_t count_lines(const std::string &s) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST(Accuracy, Basics) {
  const std::vector<std::int32_t> labels = {0, 1, 2, 0};
  EXPECT_DOUBLE_EQ(accuracy(labels, labels), 1.0);
  const std::vector<std::int32_t> half = {0, 1, 0, 1};
  EXPECT_DOUBLE_EQ(accuracy(half, labels), 0.5);
  EXPECT_THROW(accuracy(std::vector<std::int32_t>{}, std::vector<std::int32_t>{}), ConfigError);
  EXPECT_THROW(accuracy(half, std::vector<std::int32_t>{0}), ShapeError);
}

TEST(Accuracy, ConstantRunnerIsChance) {
  const TaskData d = make_task_data(TaskSpec::preset("blobs"), 0);
  const auto constant = [](const TensorF &x) {
    TensorF y({x.dim(0), 10});
    for (std::size_t r = 0; r < x.dim(0); ++r) y.at(r, 3) = 1.0f;
    return y;
  };
  EXPECT_NEAR(accuracy(constant, d.test), 0.1, 1e-9);
}

TEST(Median, OddEvenEmpty) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median({}), ConfigError);
}

TEST(Report, CsvLayout) {
  EvalReport rep;
  EvalRow r = row("position", 1, "cwac");
  r.layer_mse = {0.5, 0.25};
  rep.rows.push_back(r);
  const std::string csv = rep.to_csv();
  std::istringstream is(csv);
  std::string header, line;
  std::getline(is, header);
  std::getline(is, line);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','),
            static_cast<long>(EvalReport::columns().size() - 1));
  EXPECT_EQ(std::count(line.begin(), line.end(), ','),
            static_cast<long>(EvalReport::columns().size() - 1));
  EXPECT_NE(line.find("0.5;0.25"), std::string::npos);
  // long form: one line per metric (4 scalars, 2 layer mse, 4 size/ops)
  EXPECT_EQ(count_lines(rep.to_long_csv()), 1u + 10u);
  rep.rows[0].output_mse = std::nan("");
  EXPECT_THROW(rep.to_csv(), Error);
}

TEST(Report, CheckReportTrends) {
  EvalReport cal;
  for (std::uint64_t s = 0; s < 3; ++s) {
    for (auto [n, m] : {std::pair<std::size_t, double>{32, 3.0}, {128, 2.0}, {512, 2.5}}) {
      EvalRow r = row("calibration_size", s, "cwac");
      r.n_calib = n;
      r.output_mse = m;
      cal.rows.push_back(r);
    }
  }
  EXPECT_EQ(check_report("calibration_size", cal).size(), 1u);
  cal.rows[2].output_mse = cal.rows[5].output_mse = cal.rows[8].output_mse = 1.0;
  EXPECT_TRUE(check_report("calibration_size", cal).empty());

  EvalReport m;
  EvalRow a = row("method", 0, "cwac"), b = row("method", 0, "qwt");
  a.delta_scalars = 10;
  b.delta_scalars = 100;
  m.rows = {a, b};
  EXPECT_TRUE(check_report("method", m).empty());
  m.rows[0].kernel_float_ops = 1;
  EXPECT_EQ(check_report("method", m).size(), 1u);
}

TEST(Bench, AblationRowCounts) {
  Bench bench(quick_task());
  const std::vector<std::uint64_t> seeds = {0, 1};
  const CalibrationConfig c = quick_config();
  EXPECT_EQ(bench.ablate_calibration_size({512}, c, seeds).rows.size(), 2u);
  const EvalReport pos = bench.ablate_position(c, seeds);
  EXPECT_EQ(pos.rows.size(), 4u);
  const EvalReport beta = bench.ablate_beta_rounding(c, seeds);
  ASSERT_EQ(beta.rows.size(), 4u);
  EXPECT_EQ(beta.rows[0].kernel_float_ops, 0u);
  EXPECT_GT(beta.rows[1].kernel_float_ops, 0u);
  EXPECT_EQ(bench.ablate_bitwidth({4, 8}, c, seeds).rows.size(), 4u);
  EXPECT_THROW(bench.ablate_calibration_size({100000}, c, seeds), ConfigError);
}

TEST(Bench, RowContents) {
  Bench bench(quick_task());
  const EvalRow r = bench.run_cell(0, quick_config(), "probe");
  EXPECT_EQ(r.axis, "probe");
  EXPECT_EQ(r.method, "cwac");
  EXPECT_EQ(r.bits_w, 4);
  EXPECT_EQ(r.delta_scalars, 2u * (64 + 64 + 10));
  EXPECT_EQ(r.delta_bytes, r.delta_scalars * kScalarBytes);
  EXPECT_EQ(r.layer_mse.size(), 3u);
  EXPECT_EQ(r.kernel_float_ops, 0u);
  EXPECT_GT(r.float_accuracy, 0.5);
  EXPECT_EQ(bench.run_cell(0, quick_config(), "probe"), r);
}

TEST(Bench, CompareMethods) {
  Bench bench(quick_task());
  const EvalReport rep = bench.compare_methods(quick_config(), {0});
  ASSERT_EQ(rep.rows.size(), 3u);
  EXPECT_EQ(rep.rows[0].method, "quant");
  EXPECT_EQ(rep.rows[0].delta_scalars, 0u);
  EXPECT_TRUE(check_report("method", rep).empty());
}

TEST(Bench, Figure1bRows) {
  TaskSpec t = quick_task();
  t.dim = 32;
  t.hidden = {32, 32};
  Bench bench(t);
  const auto rows = bench.figure1b(4, quick_config(), {0});
  ASSERT_EQ(rows.size(), 2u);  // two square layers
  for (const auto &r : rows) {
    EXPECT_GE(r.pre_energy, 0.0);
    EXPECT_LE(r.post_energy, 1.0);
  }
  EXPECT_EQ(count_lines(diagonal_csv(rows)), 3u);
}

TEST(Bench, IdentityNetworkPostFitIsDiagonal) {
  Model m;
  m.name = "identity";
  m.input_shape = {8};
  TensorF w({8, 8});
  for (std::size_t i = 0; i < 8; ++i) w.at(i, i) = 1.0f;
  m.layers.push_back(make_linear(w, TensorF({8})));
  const TaskData d = make_task_data(TaskSpec::preset("separable"), 0);
  const auto rows = figure1b_report(m, 4, d.train.x);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_GT(rows[0].post_energy, 0.9);
}

TEST(Bench, BetaBound) {
  const TaskSpec t = quick_task();
  const Model m = train_synthetic(t, 0);
  const TaskData d = make_task_data(t, 0);
  const CompensatedModel comp = calibrate_model(m, quick_config(), d.train.x);
  const BetaBoundCheck c = check_beta_bound(fuse_model(comp, true), d.test.x);
  EXPECT_GT(c.elements, 0u);
  EXPECT_EQ(c.violations, 0u);
  EXPECT_LE(c.max_ratio, 1.0 + 1e-9);
  EXPECT_THROW(check_beta_bound(fuse_model(comp, false), d.test.x), ConfigError);
}
