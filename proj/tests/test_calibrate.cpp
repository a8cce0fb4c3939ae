// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "cwac/calibrate.hpp"
#include "cwac/dataset.hpp"
#include "cwac/trainer.hpp"

using namespace cwac;

namespace {

struct Fixture {
  Model model;
  TaskData data;
};

const Fixture &trained() {
  static const Fixture f = [] {
    const TaskSpec t = TaskSpec::preset("blobs");
    return Fixture{train_synthetic(t, 0), make_task_data(t, 0)};
  }();
  return f;
}

CalibrationConfig config(int bits) {
  CalibrationConfig c;
  c.weight_bits = c.act_bits = bits;
  c.sample_count = 256;
  return c;
}

}  // namespace

TEST(Calibrate, Positions) {
  const Model &m = trained().model;
  EXPECT_EQ(compensation_positions(m, Position::all), (std::vector<std::size_t>{0, 2, 4}));
  // without block ids every linear layer is its own block
  EXPECT_EQ(compensation_positions(m, Position::post), (std::vector<std::size_t>{0, 2, 4}));
  Model blocked = m;
  blocked.layers[0].block = 0;
  blocked.layers[2].block = 0;
  blocked.layers[4].block = 1;
  EXPECT_EQ(compensation_positions(blocked, Position::post), (std::vector<std::size_t>{2, 4}));
}

TEST(Calibrate, ConfigValidationAndJson) {
  CalibrationConfig c = config(4);
  c.range_sample_count = 64;
  c.estimator = RangeEstimator::clipped(0.99);
  c.sequential = false;
  EXPECT_EQ(CalibrationConfig::from_json(c.to_json()), c);
  c.sample_count = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(position_from_string("middle"), ConfigError);
}

TEST(Calibrate, NestedCalibrationSets) {
  const TensorF &pool = trained().data.train.x;
  CalibrationConfig small = config(8), large = config(8);
  small.sample_count = 32;
  large.sample_count = 512;
  const CalibrationSets a = draw_calibration_sets(pool, small);
  const CalibrationSets b = draw_calibration_sets(pool, large);
  EXPECT_EQ(a.calib, slice_rows(b.calib, 0, 32));
  EXPECT_EQ(a.range, a.calib);
  large.range_sample_count = 128;
  const CalibrationSets c = draw_calibration_sets(pool, large);
  EXPECT_EQ(c.range.dim(0), 128u);
  EXPECT_EQ(c.calib, b.calib);
  large.sample_count = pool.dim(0) + 1;
  EXPECT_THROW(draw_calibration_sets(pool, large), ConfigError);
}

TEST(Calibrate, UnquantizedModelGivesIdentityFit) {
  const Fixture &f = trained();
  const QuantizedModel q = QuantizedModel::identity(f.model);
  const TensorF calib = slice_rows(f.data.train.x, 0, 256);
  const auto pairs = collect_pairs(f.model, q, calib);
  for (const auto &[i, p] : pairs) {
    const CwacParams c = fit_cwac(p);
    for (std::size_t ch = 0; ch < c.channels(); ++ch) {
      EXPECT_NEAR(c.alpha[ch], 1.0f, 1e-6);
      EXPECT_NEAR(c.beta[ch], 0.0f, 1e-5);
    }
  }
  EXPECT_EQ(simulate_forward(q, calib), model_forward(f.model, calib));
}

TEST(Calibrate, CompensationReducesLayerMse) {
  const CompensatedModel comp = calibrate_model(trained().model, config(4));
  ASSERT_EQ(comp.cwac.size(), 3u);
  ASSERT_EQ(comp.stats.size(), 3u);
  for (const auto &s : comp.stats) EXPECT_LE(s.mse_after, s.mse_before);
  const auto prov = comp.provenance();
  EXPECT_EQ(prov["config"]["weight_bits"], 4);
}

TEST(Calibrate, SequentialAndFrozenDiffer) {
  CalibrationConfig c = config(4);
  const CompensatedModel seq = calibrate_model(trained().model, c);
  c.sequential = false;
  const CompensatedModel frozen = calibrate_model(trained().model, c);
  // the first layer sees the same inputs either way
  EXPECT_EQ(seq.cwac.at(0), frozen.cwac.at(0));
  EXPECT_NE(seq.cwac.at(4), frozen.cwac.at(4));
}

TEST(Calibrate, CompensationLowersOutputError) {
  const Fixture &f = trained();
  const CalibrationConfig c = config(4);
  const CalibrationSets sets = draw_calibration_sets(f.data.train.x, c);
  const QuantizedModel q = quantize_model(f.model, 4, 4, c.estimator, sets.range);
  const CompensatedModel comp = compensate_model(q, sets.calib, sets.range, c);
  const TensorF ref = model_forward(f.model, f.data.test.x);
  EXPECT_LT(mse(simulate_forward(comp.base, f.data.test.x, comp.cwac), ref),
            mse(simulate_forward(q, f.data.test.x), ref));
}

TEST(Calibrate, FusedMatchesSimulationWithinOneStep) {
  const Fixture &f = trained();
  for (int bits : {4, 8}) {
    const CompensatedModel comp = calibrate_model(f.model, config(bits));
    const FusedModel fused = fuse_model(comp, true);
    const TensorF x = slice_rows(f.data.test.x, 0, 1000);
    const DifferentialReport d = differential_check(comp.base, comp.cwac, fused, x);
    EXPECT_GT(d.elements, 0u);
    EXPECT_LE(d.max_step_diff, 1);
    const DifferentialReport e =
        differential_check(comp.base, comp.cwac, fuse_model(comp, false), x, RequantMode::exact);
    EXPECT_LE(e.max_step_diff, 1);
    EXPECT_LT(e.mismatched, e.elements / 100 + 1);
    EXPECT_EQ(run_int_model(fused, x).trace.kernel_float_ops, 0u);
  }
}

TEST(Calibrate, IdentityCompensationFusesToPlainQuant) {
  const Fixture &f = trained();
  const CalibrationConfig c = config(4);
  const QuantizedModel q = quantize_model(f.model, 4, 4, c.estimator,
                                          slice_rows(f.data.train.x, 0, 256));
  CompensationMap id;
  for (std::size_t i : compensation_positions(f.model, Position::all)) {
    id[i] = CwacParams::identity(f.model.layers[i].out_channels);
  }
  EXPECT_EQ(fuse_model(q, id, true), fuse_model(q, {}, true));
}

TEST(Calibrate, SizeAccounting) {
  const CompensatedModel comp = calibrate_model(trained().model, config(4));
  EXPECT_EQ(compensation_scalars(comp.cwac), 2u * (64 + 64 + 10));
  EXPECT_EQ(fused_param_count(fuse_model(comp, true)),
            fused_param_count(fuse_model(comp.base, {}, true)));
  EXPECT_GT(quantized_model_bytes(comp.base), 0u);
}

TEST(Calibrate, QwtBaselineCostsMore) {
  const Fixture &f = trained();
  const CalibrationConfig c = config(4);
  const CalibrationSets sets = draw_calibration_sets(f.data.train.x, c);
  const QuantizedModel q = quantize_model(f.model, 4, 4, c.estimator, sets.range);
  const auto pos = compensation_positions(f.model, Position::all);
  const QwtModel qwt = compensate_qwt(q, sets.calib, sets.range, pos);
  EXPECT_EQ(qwt.qwt.size(), 3u);
  EXPECT_EQ(compensation_scalars(qwt.qwt), 64u * 16 + 64 + 64 * 64 + 64 + 10 * 64 + 10);
  const TensorF ref = model_forward(f.model, f.data.test.x);
  EXPECT_LT(mse(simulate_qwt_forward(qwt, f.data.test.x), ref),
            mse(simulate_forward(q, f.data.test.x), ref));
}

TEST(Calibrate, Deterministic) {
  const CompensatedModel a = calibrate_model(trained().model, config(4));
  const CompensatedModel b = calibrate_model(trained().model, config(4));
  EXPECT_EQ(a.base, b.base);
  EXPECT_EQ(a.cwac, b.cwac);
  EXPECT_EQ(a.stats, b.stats);
}
