// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cwac/bundle.hpp"
#include "cwac/calibrate.hpp"
#include "cwac/evalbench.hpp"
#include "cwac/trainer.hpp"

namespace fs = std::filesystem;
using namespace cwac;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitValidation = 2;
constexpr int kExitCheckFailed = 3;

struct CheckFailure : Error {
  using Error::Error;
};

struct CommonOut {
  std::string out;
  bool force = false;
};

/// Flags that mirror CalibrationConfig one to one.
struct CalibFlags {
  std::size_t sample_count = 512;
  std::string position = "all";
  std::string estimator = "minmax";
  double percentile = 0.999;
  int weight_bits = 8;
  int act_bits = 8;
  std::string beta_rounding = "true";
  std::uint64_t seed = 0;
  std::size_t range_sample_count = 0;  // 0 = reuse the calibration samples
  std::string sequential = "true";

  void add_to(CLI::App *app, bool with_position) {
    app->add_option("--sample_count", sample_count, "Calibration samples N (>= 2)")
        ->capture_default_str();
    if (with_position) {
      app->add_option("--position", position, "Compensation positions")
          ->check(CLI::IsMember({"all", "post"}))
          ->capture_default_str();
    }
    app->add_option("--estimator", estimator, "Activation range estimator")
        ->check(CLI::IsMember({"minmax", "percentile"}))
        ->capture_default_str();
    app->add_option("--percentile", percentile, "Quantile used by --estimator percentile")
        ->capture_default_str();
    app->add_option("--weight_bits", weight_bits, "Weight bit-width [2, 8]")->capture_default_str();
    app->add_option("--act_bits", act_bits, "Activation bit-width [2, 8]")->capture_default_str();
    app->add_option("--beta_rounding", beta_rounding,
                    "Fold the rounded offset into the bias accumulator")
        ->check(CLI::IsMember({"true", "false"}))
        ->capture_default_str();
    app->add_option("--seed", seed, "Seed for calibration sampling")->capture_default_str();
    app->add_option("--range_sample_count", range_sample_count,
                    "Separate range-estimation set size (0 reuses the calibration set)")
        ->capture_default_str();
    app->add_option("--sequential", sequential,
                    "Fit layers front to back on the compensated path (false: one frozen pass)")
        ->check(CLI::IsMember({"true", "false"}))
        ->capture_default_str();
  }

  CalibrationConfig config() const {
    CalibrationConfig c;
    c.sample_count = sample_count;
    c.position = position_from_string(position);
    c.estimator = estimator == "percentile" ? RangeEstimator::clipped(percentile)
                                            : RangeEstimator::minmax();
    c.weight_bits = weight_bits;
    c.act_bits = act_bits;
    c.beta_rounding = beta_rounding == "true";
    c.seed = seed;
    if (range_sample_count) c.range_sample_count = range_sample_count;
    c.sequential = sequential == "true";
    c.validate();
    return c;
  }
};

fs::path output_root() {
  const char *env = std::getenv("CWAC_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("cwac_out");
}

fs::path resolve_out(const CommonOut &o, const std::string &default_name) {
  return o.out.empty() ? output_root() / default_name : fs::path(o.out);
}

void prepare_out_dir(const fs::path &dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!force) {
      throw ConfigError("output directory " + dir.string() +
                        " already exists (use --force to replace it)");
    }
    fs::remove_all(dir, ec);
    if (ec) throw Error("cannot remove " + dir.string() + ": " + ec.message());
  }
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream f(path, std::ios::trunc);
  f << text;
  if (!f) throw Error("cannot write " + path.string());
}

std::string stem_of(const std::string &path) {
  fs::path p(path);
  if (p.filename().empty()) p = p.parent_path();
  return p.filename().string();
}

TaskData task_data_of(const Model &model) {
  if (!model.metadata.contains("task") || !model.metadata.contains("seed")) {
    throw ConfigError("bundle '" + model.name + "' records no training task");
  }
  return make_task_data(TaskSpec::from_json(model.metadata["task"]),
                        model.metadata["seed"].get<std::uint64_t>());
}

// ---- train ---------------------------------------------------------------

struct TrainCmd {
  std::string task = "blobs";
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::vector<std::size_t> hidden;
  std::size_t block_size = 0;
  double min_accuracy = 0.0;
  CommonOut out;

  int run() const {
    TaskSpec spec = TaskSpec::preset(task);
    if (epochs) spec.epochs = epochs;
    if (!hidden.empty()) spec.hidden = hidden;
    if (block_size) spec.block_size = block_size;
    spec.min_accuracy = min_accuracy;
    spec.validate();
    const fs::path dir = resolve_out(out, task + "-s" + std::to_string(seed));
    prepare_out_dir(dir, out.force);
    ModelBundle b;
    b.model = train_synthetic(spec, seed);
    save_bundle(b, dir);
    std::cout << "trained " << b.model.name << " seed " << seed << " heldout_accuracy "
              << b.model.metadata["heldout_accuracy"].get<double>() << " -> " << dir.string()
              << '\n';
    return kExitOk;
  }
};

// ---- quantize --------------------------------------------------------------

struct QuantizeCmd {
  std::string bundle;
  int bits = 0;
  CalibFlags calib;
  CommonOut out;

  int run() const {
    CalibFlags f = calib;
    if (bits) f.weight_bits = f.act_bits = bits;
    const CalibrationConfig cfg = f.config();
    const ModelBundle in = load_bundle(bundle);
    if (in.fused || in.quant) throw ConfigError("quantize expects a float bundle");
    const fs::path dir = resolve_out(out, stem_of(bundle) + "-w" + std::to_string(cfg.weight_bits) +
                                              "a" + std::to_string(cfg.act_bits));
    prepare_out_dir(dir, out.force);

    const CalibrationSets sets = draw_calibration_sets(calibration_pool(in.model), cfg);
    ModelBundle b;
    b.model = in.model;
    b.model.metadata["quantize"] = cfg.to_json();
    QuantizedModel q =
        quantize_model(b.model, cfg.weight_bits, cfg.act_bits, cfg.estimator, sets.range);
    b.quant = std::move(q);
    save_bundle(b, dir);
    std::cout << "quantized " << b.model.name << " w" << cfg.weight_bits << "a" << cfg.act_bits
              << " -> " << dir.string() << '\n';
    return kExitOk;
  }
};

// ---- compensate ------------------------------------------------------------

struct CompensateCmd {
  std::string float_bundle;
  std::string quant_bundle;
  CalibFlags calib;
  CommonOut out;

  int run() const {
    CalibrationConfig cfg = calib.config();
    const ModelBundle bf = load_bundle(float_bundle);
    const ModelBundle bq = load_bundle(quant_bundle);
    if (bf.fused || bf.quant) throw ConfigError(float_bundle + " is not a float bundle");
    if (!bq.quant || bq.compensation || bq.fused) {
      throw ConfigError(quant_bundle + " is not a quantized bundle");
    }
    const fs::path dir = resolve_out(out, stem_of(quant_bundle) + "-cwac");
    prepare_out_dir(dir, out.force);

    QuantizedModel base = *bq.quant;
    base.model = bf.model;
    // bit-widths come from the quantized bundle
    for (const auto &lq : base.layers) {
      if (lq.weight) cfg.weight_bits = lq.weight->params.bits;
      if (lq.output) cfg.act_bits = lq.output->bits;
    }
    const CalibrationSets sets = draw_calibration_sets(calibration_pool(bf.model), cfg);
    const CompensatedModel comp = compensate_model(base, sets.calib, sets.range, cfg);
    ModelBundle b = ModelBundle::from_compensated(comp);
    b.model.metadata["compensation"] = comp.provenance();
    b.quant->model = b.model;
    save_bundle(b, dir);

    std::ostringstream csv;
    csv << "layer,channels,mse_before,mse_after,fallback_count,clamped_count\n";
    csv << std::setprecision(9);
    for (const auto &s : comp.stats) {
      csv << s.layer << ',' << s.channels << ',' << s.mse_before << ',' << s.mse_after << ','
          << s.fallback_count << ',' << s.clamped_count << '\n';
    }
    write_text(dir / "fit_stats.csv", csv.str());
    std::cout << "compensated " << comp.cwac.size() << " layers (" << to_string(cfg.position)
              << ", N=" << cfg.sample_count << ") -> " << dir.string() << '\n';
    return kExitOk;
  }
};

// ---- fuse ------------------------------------------------------------------

struct FuseCmd {
  std::string bundle;
  bool no_beta_rounding = false;
  bool check = false;
  CommonOut out;

  int run() const {
    const ModelBundle in = load_bundle(bundle);
    if (!in.quant) throw ConfigError("fuse expects a quantized or compensated bundle");
    const fs::path dir = resolve_out(out, stem_of(bundle) + "-fused");
    prepare_out_dir(dir, out.force);

    const CompensationMap cwac = in.compensation ? in.compensation->cwac : CompensationMap{};
    ModelBundle b;
    b.model.name = in.model.name;
    b.model.input_shape = in.model.input_shape;
    b.model.metadata = in.model.metadata;
    b.fused = fuse_model(*in.quant, cwac, !no_beta_rounding);
    b.model.metadata["fused_params"] = fused_param_count(*b.fused);
    save_bundle(b, dir);
    std::cout << "fused " << b.fused->ops.size() << " ops, beta_rounding "
              << (no_beta_rounding ? "off" : "on") << " -> " << dir.string() << '\n';

    if (check) {
      const TaskData data = task_data_of(in.model);
      const DifferentialReport d = differential_check(*in.quant, cwac, *b.fused, data.test.x);
      const IntRunResult run = run_int_model(*b.fused, data.test.x);
      std::cout << "differential: elements " << d.elements << " mismatched " << d.mismatched
                << " max_step_diff " << d.max_step_diff << " kernel_float_ops "
                << run.trace.kernel_float_ops << '\n';
      if (d.max_step_diff > 1) throw CheckFailure("fused output differs by more than one step");
      if (!no_beta_rounding && run.trace.kernel_float_ops != 0) {
        throw CheckFailure("float operations inside integer kernels");
      }
    }
    return kExitOk;
  }
};

// ---- eval ------------------------------------------------------------------

struct EvalCmd {
  std::string bundle;
  bool check = false;
  std::string mode = "fixed";

  int run() const {
    const ModelBundle b = load_bundle(bundle);
    const TaskData data = task_data_of(b.model);
    const RequantMode rm = mode == "exact" ? RequantMode::exact : RequantMode::fixed_point;
    std::string kind;
    double acc = 0.0;
    std::uint64_t flops = 0;
    if (b.fused) {
      kind = "fused";
      const IntRunResult r = run_int_model(*b.fused, data.test.x, {rm, false});
      acc = accuracy(argmax_rows(r.logits), data.test.labels);
      flops = r.trace.kernel_float_ops;
      if (check && b.fused->beta_rounding && rm == RequantMode::fixed_point && flops != 0) {
        throw CheckFailure("float operations inside integer kernels");
      }
    } else if (b.quant) {
      kind = b.compensation ? "compensated" : "quantized";
      const CompensationMap cwac = b.compensation ? b.compensation->cwac : CompensationMap{};
      const bool rounding = b.compensation ? b.compensation->config.beta_rounding : true;
      const IntRunResult r = run_int_model(fuse_model(*b.quant, cwac, rounding), data.test.x,
                                           {rm, false});
      acc = accuracy(argmax_rows(r.logits), data.test.labels);
      flops = r.trace.kernel_float_ops;
      if (check && b.compensation) {
        for (const auto &s : b.compensation->stats) {
          if (s.mse_after > s.mse_before) {
            throw CheckFailure("layer " + std::to_string(s.layer) +
                               ": compensation raised calibration MSE");
          }
        }
      }
    } else {
      kind = "float";
      acc = accuracy(argmax_rows(model_forward(b.model, data.test.x)), data.test.labels);
      if (check && b.model.metadata.contains("heldout_accuracy") &&
          acc != b.model.metadata["heldout_accuracy"].get<double>()) {
        throw CheckFailure("held-out accuracy differs from the trainer record");
      }
    }
    std::cout << std::setprecision(9) << "bundle," << kind << ",accuracy," << acc
              << ",kernel_float_ops," << flops << '\n';
    return kExitOk;
  }
};

// ---- ablate ----------------------------------------------------------------

struct AblateCmd {
  std::string task = "blobs";
  std::string bundle;
  std::vector<std::string> axes = {"all"};
  std::size_t seeds = 10;
  std::vector<std::size_t> sizes = kDefaultCalibrationSizes;
  std::vector<int> bit_list = {4, 8};
  std::string format = "wide";
  bool check = false;
  CalibFlags calib;
  CommonOut out;

  int run() const {
    CalibrationConfig base = calib.config();
    std::vector<std::string> run_axes = axes;
    if (std::find(axes.begin(), axes.end(), "all") != axes.end()) {
      run_axes = {"calibration_size", "position", "beta_rounding", "bitwidth", "method",
                  "diagonal"};
    }
    if (seeds == 0) throw ConfigError("--seeds must be >= 1");
    std::vector<std::uint64_t> seed_list(seeds);
    for (std::size_t i = 0; i < seeds; ++i) seed_list[i] = i;

    std::optional<Bench> bench;
    if (bundle.empty()) {
      bench.emplace(TaskSpec::preset(task));
    } else {
      ModelBundle b = load_bundle(bundle);
      if (b.fused || b.quant) throw ConfigError("ablate expects a float bundle");
      TaskData data = task_data_of(b.model);
      bench.emplace(std::move(b.model), std::move(data));
    }
    const fs::path dir = resolve_out(out, "ablate-" + bench->task_name());
    prepare_out_dir(dir, out.force);

    std::vector<std::string> failures;
    for (const std::string &axis : run_axes) {
      if (axis == "diagonal") {
        const auto rows = bench->figure1b(base.weight_bits, base, seed_list);
        write_text(dir / "diagonal.csv", diagonal_csv(rows));
        std::vector<double> pre, post;
        for (const auto &r : rows) {
          pre.push_back(r.pre_energy);
          post.push_back(r.post_energy);
        }
        if (check && !rows.empty() && !(median(post) > median(pre))) {
          failures.push_back("diagonal: post-fit energy not above pre-fit energy");
        }
        std::cout << "diagonal: " << rows.size() << " rows\n";
        continue;
      }
      EvalReport rep;
      if (axis == "calibration_size") {
        rep = bench->ablate_calibration_size(sizes, base, seed_list);
      } else if (axis == "position") {
        rep = bench->ablate_position(base, seed_list);
      } else if (axis == "beta_rounding") {
        rep = bench->ablate_beta_rounding(base, seed_list);
      } else if (axis == "bitwidth") {
        rep = bench->ablate_bitwidth(bit_list, base, seed_list);
      } else if (axis == "method") {
        rep = bench->compare_methods(base, seed_list);
      } else {
        throw ConfigError("unknown axis '" + axis + "'");
      }
      write_text(dir / (axis + ".csv"), format == "long" ? rep.to_long_csv() : rep.to_csv());
      if (check) {
        for (const auto &f : check_report(axis, rep)) failures.push_back(axis + ": " + f);
      }
      std::cout << axis << ": " << rep.rows.size() << " rows\n";
    }
    std::cout << "reports -> " << dir.string() << '\n';
    if (!failures.empty()) {
      for (const auto &f : failures) std::cerr << "check failed: " << f << '\n';
      throw CheckFailure(std::to_string(failures.size()) + " invariant(s) failed");
    }
    return kExitOk;
  }
};

// ---- dump-fused --------------------------------------------------------------

struct DumpCmd {
  std::string bundle;
  std::string out;

  int run() const {
    const ModelBundle b = load_bundle(bundle);
    if (!b.fused) throw ConfigError("dump-fused expects a fused bundle");
    std::ostringstream os;
    const FusedModel &f = *b.fused;
    os << std::setprecision(17);
    os << "model " << f.name << " input_shape " << shape_str(f.input_shape) << " beta_rounding "
       << f.beta_rounding << '\n';
    os << "input scale " << f.input.scale << " zero_point " << f.input.zero_point << " bits "
       << f.input.bits << '\n';
    for (std::size_t k = 0; k < f.ops.size(); ++k) {
      const FusedOp &op = f.ops[k];
      if (const auto *l = std::get_if<FusedLayerParams>(&op)) {
        os << "op " << k << ' ' << to_string(l->op) << " layer " << l->layer_index << " c_in "
           << l->in_channels << " c_out " << l->out_channels << " k " << l->patch_length()
           << '\n';
        os << "  input scale " << l->input.scale << " zero_point " << l->input.zero_point << '\n';
        os << "  output scale " << l->output.scale << " zero_point " << l->output.zero_point
           << '\n';
        for (std::size_t c = 0; c < l->out_channels; ++c) {
          os << "  ch " << c << " m0 " << l->multipliers[c].m0 << " shift "
             << l->multipliers[c].shift << " bias_acc " << l->bias_acc[c] << " const_acc "
             << l->const_acc[c] << " z_w " << l->weight_zero_points[c] << " w_q";
          for (std::uint8_t w : l->weight_q.row(c)) os << ' ' << static_cast<int>(w);
          os << '\n';
        }
      } else if (const auto *r = std::get_if<IntRelu>(&op)) {
        os << "op " << k << " relu zero_point " << r->zero_point << '\n';
      } else if (const auto *t = std::get_if<IntLut>(&op)) {
        os << "op " << k << " lut " << to_string(t->op) << " table";
        for (std::uint8_t v : t->table) os << ' ' << static_cast<int>(v);
        os << '\n';
      } else if (const auto *p = std::get_if<IntAvgPool>(&op)) {
        os << "op " << k << " avgpool kernel " << p->geometry.kernel << " stride "
           << p->geometry.stride << '\n';
      } else {
        os << "op " << k << " flatten\n";
      }
    }
    os << "output scale " << f.output.scale << " zero_point " << f.output.zero_point << '\n';
    if (out.empty()) {
      std::cout << os.str();
    } else {
      write_text(out, os.str());
    }
    return kExitOk;
  }
};

void add_out(CLI::App *app, CommonOut &o) {
  app->add_option("--out", o.out,
                  "Output directory (default: $CWAC_OUTPUT_ROOT or ./cwac_out, plus a derived name)");
  app->add_flag("--force", o.force, "Replace an existing output directory");
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Post-training quantization with channel-wise affine compensation"};
  app.require_subcommand(1);

  TrainCmd train;
  auto *c_train = app.add_subcommand("train", "Train a desk-scale float model");
  c_train->add_option("--task", train.task, "Task preset")
      ->check(CLI::IsMember({"blobs", "blobs_noisy", "spirals", "separable"}))
      ->capture_default_str();
  c_train->add_option("--seed", train.seed, "Training seed")->capture_default_str();
  c_train->add_option("--epochs", train.epochs, "Override the preset's epoch count");
  c_train->add_option("--hidden", train.hidden, "Override hidden widths")->delimiter(',');
  c_train->add_option("--block_size", train.block_size, "Linear layers per block");
  c_train->add_option("--min_accuracy", train.min_accuracy, "Fail below this held-out accuracy")
      ->capture_default_str();
  add_out(c_train, train.out);

  QuantizeCmd quantize;
  auto *c_quant = app.add_subcommand("quantize", "Quantize a float bundle");
  c_quant->add_option("bundle", quantize.bundle, "Float bundle directory")->required();
  c_quant->add_option("--bits", quantize.bits, "Set both --weight_bits and --act_bits");
  quantize.calib.add_to(c_quant, false);
  add_out(c_quant, quantize.out);

  CompensateCmd compensate;
  auto *c_comp = app.add_subcommand("compensate", "Fit channel-wise affine compensation");
  c_comp->add_option("float_bundle", compensate.float_bundle, "Float bundle")->required();
  c_comp->add_option("quant_bundle", compensate.quant_bundle, "Quantized bundle")->required();
  compensate.calib.add_to(c_comp, true);
  add_out(c_comp, compensate.out);

  FuseCmd fuse;
  auto *c_fuse = app.add_subcommand("fuse", "Fold quantization and compensation into integers");
  c_fuse->add_option("bundle", fuse.bundle, "Quantized or compensated bundle")->required();
  c_fuse->add_flag("--no-beta-rounding", fuse.no_beta_rounding,
                   "Keep the offset in f32 after requantization (reference mode)");
  c_fuse->add_flag("--check", fuse.check,
                   "Run the per-layer differential check; exit 3 when it fails");
  add_out(c_fuse, fuse.out);

  EvalCmd eval;
  auto *c_eval = app.add_subcommand("eval", "Held-out accuracy of any bundle");
  c_eval->add_option("bundle", eval.bundle, "Bundle directory")->required();
  c_eval->add_option("--mode", eval.mode, "Requantization mode for integer models")
      ->check(CLI::IsMember({"fixed", "exact"}))
      ->capture_default_str();
  c_eval->add_flag("--check", eval.check, "Verify bundle invariants; exit 3 when one fails");

  AblateCmd ablate;
  auto *c_abl = app.add_subcommand("ablate", "Run ablation sweeps and write one CSV per axis");
  c_abl->add_option("--task", ablate.task, "Task preset trained per seed")
      ->check(CLI::IsMember({"blobs", "blobs_noisy", "spirals", "separable"}))
      ->capture_default_str();
  c_abl->add_option("--bundle", ablate.bundle, "Fixed float bundle instead of per-seed training");
  c_abl->add_option("--axis", ablate.axes,
                    "calibration_size, position, beta_rounding, bitwidth, method, diagonal or all")
      ->delimiter(',')
      ->check(CLI::IsMember({"all", "calibration_size", "position", "beta_rounding", "bitwidth",
                             "method", "diagonal"}))
      ->capture_default_str();
  c_abl->add_option("--seeds", ablate.seeds, "Number of seeds (0..n-1)")->capture_default_str();
  c_abl->add_option("--sizes", ablate.sizes, "Calibration sizes")->delimiter(',')
      ->capture_default_str();
  c_abl->add_option("--bit_list", ablate.bit_list, "Bit-widths for the bitwidth axis")
      ->delimiter(',')
      ->capture_default_str();
  c_abl->add_option("--format", ablate.format, "Report layout")
      ->check(CLI::IsMember({"wide", "long"}))
      ->capture_default_str();
  c_abl->add_flag("--check", ablate.check, "Assert trend invariants; exit 3 when one fails");
  ablate.calib.add_to(c_abl, true);
  add_out(c_abl, ablate.out);

  DumpCmd dump;
  auto *c_dump = app.add_subcommand("dump-fused", "Print fused integer parameters as text");
  c_dump->add_option("bundle", dump.bundle, "Fused bundle")->required();
  c_dump->add_option("--out", dump.out, "Write to a file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*c_train) return train.run();
    if (*c_quant) return quantize.run();
    if (*c_comp) return compensate.run();
    if (*c_fuse) return fuse.run();
    if (*c_eval) return eval.run();
    if (*c_abl) return ablate.run();
    if (*c_dump) return dump.run();
  } catch (const CheckFailure &e) {
    std::cerr << "check failed: " << e.what() << '\n';
    return kExitCheckFailed;
  } catch (const ConfigError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ShapeError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const BundleError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
