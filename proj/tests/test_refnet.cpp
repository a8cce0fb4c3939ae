// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "cwac/dataset.hpp"
#include "cwac/refnet.hpp"
#include "cwac/rng.hpp"
#include "cwac/trainer.hpp"

using namespace cwac;

namespace {

TensorF randn(Rng &rng, Shape s, double sd = 1.0) {
  TensorF t(std::move(s));
  for (float &v : t.data()) v = static_cast<float>(rng.normal(0.0, sd));
  return t;
}

Model single(LayerSpec l, Shape in) {
  Model m;
  m.name = "t";
  m.input_shape = std::move(in);
  m.layers.push_back(std::move(l));
  return m;
}

// Direct nested-loop convolution, no patch unfolding.
TensorF direct_conv(const TensorF &x, const TensorF &w, const TensorF &b,
                    const WindowGeometry &g) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = g.kernel;
  const std::size_t oh = g.out_extent(h), ow = g.out_extent(wd);
  TensorF out({n, co, oh, ow});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = long(oy * g.stride + ky) - long(g.pad);
                const long ix = long(ox * g.stride + kx) - long(g.pad);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                acc += double(w[((o * ci + c) * k + ky) * k + kx]) *
                       x[((s * ci + c) * h + std::size_t(iy)) * wd + std::size_t(ix)];
              }
          out[((s * co + o) * oh + oy) * ow + ox] = static_cast<float>(acc);
        }
  return out;
}

}  // namespace

TEST(Refnet, IdentityLinear) {
  Model m = single(make_linear(TensorF({2, 2}, {1, 0, 0, 1}), TensorF({2}, {0, 0})), {2});
  EXPECT_EQ(model_forward(m, TensorF({2}, {3, 4})).values(), (std::vector<float>{3, 4}));
}

TEST(Refnet, HandLinear) {
  Model m = single(make_linear(TensorF({2, 2}, {1, 2, 3, 4}), TensorF({2}, {1, 1})), {2});
  EXPECT_EQ(model_forward(m, TensorF({2}, {1, 1})).values(), (std::vector<float>{4, 8}));
}

TEST(Refnet, ReluAndGelu) {
  EXPECT_EQ(layer_forward(make_activation(OpKind::relu), TensorF({1, 2}, {-1, 2})).values(),
            (std::vector<float>{0, 2}));
  EXPECT_EQ(gelu(0.0f), 0.0f);
  EXPECT_NEAR(gelu(1.0f), 0.8412f, 1e-3);
}

TEST(Refnet, ZeroWeightBroadcastsBias) {
  const TensorF y = layer_forward(make_linear(TensorF({3, 2}), TensorF({3}, {1, 2, 3})),
                                  TensorF({2, 2}, {5, -7, 0.5f, 9}));
  EXPECT_EQ(y.values(), (std::vector<float>{1, 2, 3, 1, 2, 3}));
}

TEST(Refnet, OneByOneConvIdentity) {
  const LayerSpec l = make_conv2d(TensorF({1, 1, 1, 1}, {1}), TensorF({1}, {0}), {1, 1, 0});
  const TensorF x({1, 1, 2, 2}, {1, 1, 1, 1});
  EXPECT_EQ(layer_forward(l, x).values(), x.values());
}

TEST(Refnet, ConvMatchesDirectLoops) {
  Rng rng(5);
  for (const WindowGeometry g : {WindowGeometry{3, 1, 1}, WindowGeometry{3, 2, 0},
                                 WindowGeometry{2, 2, 1}, WindowGeometry{1, 1, 0}}) {
    const TensorF w = randn(rng, {4, 3, g.kernel, g.kernel});
    const TensorF b = randn(rng, {4});
    const TensorF x = randn(rng, {2, 3, 7, 6});
    const TensorF got = layer_forward(make_conv2d(w, b, g), x);
    const TensorF want = direct_conv(x, w, b, g);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-4);
  }
}

TEST(Refnet, AvgPoolAndFlatten) {
  const TensorF x({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  const TensorF p = layer_forward(make_avgpool(2, 2), x);
  EXPECT_EQ(p.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(p.values(), (std::vector<float>{3.5f, 5.5f}));
  EXPECT_EQ(layer_forward(make_flatten(), x).shape(), (Shape{1, 8}));
}

TEST(Refnet, ShapeErrorNamesLayer) {
  Model m;
  m.input_shape = {4};
  m.layers.push_back(make_linear(TensorF({3, 4}), TensorF({3})));
  m.layers.push_back(make_linear(TensorF({2, 5}), TensorF({2})));
  try {
    m.validate();
    FAIL() << "expected ShapeError";
  } catch (const ShapeError &e) {
    EXPECT_EQ(e.layer(), std::optional<std::size_t>(1));
  }
  Model ok = single(make_linear(TensorF({3, 4}), TensorF({3})), {4});
  EXPECT_THROW(model_forward(ok, TensorF({2, 5})), ShapeError);
}

TEST(Refnet, BatchAndSingleSampleAgree) {
  Rng rng(9);
  Model m = single(make_linear(randn(rng, {3, 4}), randn(rng, {3})), {4});
  const TensorF x = randn(rng, {5, 4});
  const TensorF batch = model_forward(m, x);
  for (std::size_t r = 0; r < 5; ++r) {
    const TensorF one = model_forward(m, TensorF({4}, {x.row(r).begin(), x.row(r).end()}));
    ASSERT_EQ(one.shape(), (Shape{3}));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(one[c], batch.at(r, c));
  }
}

TEST(Refnet, ChannelRowsRoundTrip) {
  Rng rng(2);
  const TensorF x = randn(rng, {2, 3, 2, 2});
  const TensorF rows = to_channel_rows(x);
  EXPECT_EQ(rows.shape(), (Shape{8, 3}));
  EXPECT_EQ(from_channel_rows(rows, x.shape()), x);
}

TEST(Dataset, DeterministicAndBalanced) {
  const TaskSpec t = TaskSpec::preset("blobs");
  const TaskData a = make_task_data(t, 3), b = make_task_data(t, 3);
  EXPECT_EQ(a.train.x, b.train.x);
  EXPECT_EQ(a.test.labels, b.test.labels);
  EXPECT_EQ(a.train.size(), t.train_count);
  std::vector<int> counts(t.classes);
  for (auto l : a.test.labels) ++counts[static_cast<std::size_t>(l)];
  for (int c : counts) EXPECT_EQ(c, static_cast<int>(t.test_count / t.classes));
  EXPECT_NE(make_task_data(t, 4).train.x, a.train.x);
}

TEST(Dataset, SpecJsonRoundTripAndValidation) {
  TaskSpec t = TaskSpec::preset("spirals");
  EXPECT_EQ(TaskSpec::from_json(t.to_json()), t);
  t.classes = 1;
  EXPECT_THROW(t.validate(), ConfigError);
  EXPECT_THROW(TaskSpec::preset("mnist"), ConfigError);
}

TEST(Trainer, BlobsSeedZeroReachesFloor) {
  const Model m = train_synthetic(TaskSpec::preset("blobs"), 0);
  EXPECT_GE(m.metadata["heldout_accuracy"].get<double>(), 0.95);
  EXPECT_EQ(m, train_synthetic(TaskSpec::preset("blobs"), 0));
}

TEST(Trainer, SeparableSingleLayerIsPerfect) {
  const Model m = train_synthetic(TaskSpec::preset("separable"), 1);
  EXPECT_EQ(m.layers.size(), 1u);
  EXPECT_EQ(m.metadata["heldout_accuracy"].get<double>(), 1.0);
}

TEST(Trainer, FloorRaisesWithAccuracy) {
  TaskSpec t = TaskSpec::preset("blobs");
  t.epochs = 1;
  t.min_accuracy = 1.01;
  try {
    train_synthetic(t, 0);
    FAIL() << "expected TrainError";
  } catch (const TrainError &e) {
    EXPECT_GT(e.accuracy(), 0.0);
    EXPECT_LE(e.accuracy(), 1.0);
  }
}

TEST(Trainer, BlockIdsFollowBlockSize) {
  TaskSpec t = TaskSpec::preset("blobs");
  t.epochs = 1;
  t.block_size = 2;
  const Model m = train_synthetic(t, 0);
  std::vector<std::size_t> ids;
  for (const auto &l : m.layers) {
    if (l.has_weights()) ids.push_back(l.block.value());
  }
  EXPECT_EQ(ids, (std::vector<std::size_t>{0, 0, 1}));
}
