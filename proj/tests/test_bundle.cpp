// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "cwac/bundle.hpp"
#include "cwac/trainer.hpp"
#include "json.hpp"

using namespace cwac;
namespace fs = std::filesystem;

namespace {

class BundleTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("cwac_bundle_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  static const Model &model() {
    static const Model m = [] {
      TaskSpec t = TaskSpec::preset("blobs");
      t.epochs = 2;
      return train_synthetic(t, 0);
    }();
    return m;
  }

  static CompensatedModel compensated() {
    CalibrationConfig c;
    c.weight_bits = c.act_bits = 4;
    c.sample_count = 128;
    return calibrate_model(model(), c);
  }

  static nlohmann::json read_manifest(const fs::path &d) {
    std::ifstream f(d / "manifest.json");
    return nlohmann::json::parse(f);
  }
  static void write_manifest(const fs::path &d, const nlohmann::json &j) {
    std::ofstream(d / "manifest.json") << j.dump(2);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(BundleTest, FloatRoundTrip) {
  ModelBundle b;
  b.model = model();
  save_bundle(b, dir_);
  EXPECT_TRUE(fs::exists(dir_ / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir_ / "layer0.weight.bin"));
  EXPECT_EQ(fs::file_size(dir_ / "layer0.weight.bin"), 64u * 16 * 4);
  EXPECT_EQ(load_bundle(dir_), b);
}

TEST_F(BundleTest, CompensatedRoundTrip) {
  const CompensatedModel comp = compensated();
  const ModelBundle b = ModelBundle::from_compensated(comp);
  save_bundle(b, dir_);
  const ModelBundle l = load_bundle(dir_);
  EXPECT_EQ(l, b);
  const CompensatedModel back = l.compensated();
  EXPECT_EQ(back.cwac, comp.cwac);
  EXPECT_EQ(back.base, comp.base);
  EXPECT_EQ(back.config, comp.config);
  EXPECT_EQ(read_manifest(dir_)["quant"]["layers"].size(), model().layers.size());
}

TEST_F(BundleTest, FusedRoundTripHasNoFloatKernels) {
  ModelBundle b;
  b.model.name = model().name;
  b.model.input_shape = model().input_shape;
  b.fused = fuse_model(compensated(), true);
  save_bundle(b, dir_);
  EXPECT_EQ(load_bundle(dir_), b);
  const nlohmann::json m = read_manifest(dir_);
  EXPECT_TRUE(m["layers"].empty());
  for (const auto &e : fs::directory_iterator(dir_)) {
    const std::string n = e.path().filename().string();
    EXPECT_EQ(n.find("weight.bin"), std::string::npos) << n;
  }
}

TEST_F(BundleTest, MissingManifest) {
  fs::create_directories(dir_);
  EXPECT_THROW(load_bundle(dir_), BundleError);
}

TEST_F(BundleTest, MissingBlob) {
  ModelBundle b;
  b.model = model();
  save_bundle(b, dir_);
  fs::remove(dir_ / "layer2.bias.bin");
  EXPECT_THROW(load_bundle(dir_), BundleError);
}

TEST_F(BundleTest, TruncatedBlob) {
  ModelBundle b;
  b.model = model();
  save_bundle(b, dir_);
  fs::resize_file(dir_ / "layer0.weight.bin", 12);
  EXPECT_THROW(load_bundle(dir_), BundleError);
}

TEST_F(BundleTest, VersionMismatch) {
  ModelBundle b;
  b.model = model();
  save_bundle(b, dir_);
  nlohmann::json m = read_manifest(dir_);
  m["format_version"] = kBundleFormatVersion + 1;
  write_manifest(dir_, m);
  EXPECT_THROW(load_bundle(dir_), BundleError);
}

TEST_F(BundleTest, DanglingReferenceAndMalformedJson) {
  ModelBundle b;
  b.model = model();
  save_bundle(b, dir_);
  nlohmann::json m = read_manifest(dir_);
  m["layers"][0]["weight"]["blob"] = "nowhere.bin";
  write_manifest(dir_, m);
  EXPECT_THROW(load_bundle(dir_), BundleError);
  std::ofstream(dir_ / "manifest.json") << "{ not json";
  EXPECT_THROW(load_bundle(dir_), BundleError);
}

TEST_F(BundleTest, DtypeMismatch) {
  ModelBundle b;
  b.model = model();
  save_bundle(b, dir_);
  nlohmann::json m = read_manifest(dir_);
  m["layers"][0]["weight"]["dtype"] = "i32";
  write_manifest(dir_, m);
  EXPECT_THROW(load_bundle(dir_), BundleError);
}
