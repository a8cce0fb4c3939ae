// SPDX-License-Identifier: Apache-2.0
#include "cwac/dataset.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "cwac/rng.hpp"

namespace cwac {

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::blobs:
      return "blobs";
    case TaskKind::spirals:
      return "spirals";
    case TaskKind::separable:
      return "separable";
  }
  return "?";
}

TaskKind task_kind_from_string(std::string_view name) {
  for (TaskKind k : {TaskKind::blobs, TaskKind::spirals, TaskKind::separable}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  if (classes < 2) throw ConfigError("task needs at least 2 classes");
  if (dim == 0) throw ConfigError("task dim must be positive");
  if ((kind == TaskKind::spirals || kind == TaskKind::separable) &&
      classes != 2) {
    throw ConfigError(std::string(to_string(kind)) + " task is 2-class");
  }
  if (kind == TaskKind::spirals && dim < 2) {
    throw ConfigError("spirals task needs dim >= 2");
  }
  if (train_count < classes || test_count == 0) {
    throw ConfigError("task split sizes too small");
  }
  if (activation != OpKind::relu && activation != OpKind::gelu) {
    throw ConfigError("task activation must be relu or gelu");
  }
  if (block_size == 0 || batch_size == 0 || epochs == 0) {
    throw ConfigError("block_size, batch_size and epochs must be positive");
  }
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
}

nlohmann::json TaskSpec::to_json() const {
  return {{"kind", std::string(to_string(kind))},
          {"classes", classes},
          {"dim", dim},
          {"train_count", train_count},
          {"test_count", test_count},
          {"center_scale", center_scale},
          {"spread", spread},
          {"margin", margin},
          {"hidden", hidden},
          {"activation", std::string(to_string(activation))},
          {"block_size", block_size},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"min_accuracy", min_accuracy}};
}

TaskSpec TaskSpec::from_json(const nlohmann::json &j) {
  TaskSpec s;
  if (j.contains("kind")) s.kind = task_kind_from_string(j.at("kind").get<std::string>());
  auto get = [&](const char *key, auto &field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("classes", s.classes);
  get("dim", s.dim);
  get("train_count", s.train_count);
  get("test_count", s.test_count);
  get("center_scale", s.center_scale);
  get("spread", s.spread);
  get("margin", s.margin);
  get("hidden", s.hidden);
  if (j.contains("activation")) {
    s.activation = op_kind_from_string(j.at("activation").get<std::string>());
  }
  get("block_size", s.block_size);
  get("epochs", s.epochs);
  get("batch_size", s.batch_size);
  get("learning_rate", s.learning_rate);
  get("min_accuracy", s.min_accuracy);
  s.validate();
  return s;
}

TaskSpec TaskSpec::preset(std::string_view name) {
  TaskSpec s;
  if (name == "blobs") return s;
  if (name == "blobs_noisy") {
    s.spread = 2.5;
    s.test_count = 8000;
    return s;
  }
  if (name == "spirals") {
    s.kind = TaskKind::spirals;
    s.classes = 2;
    s.dim = 2;
    s.spread = 0.02;
    s.hidden = {32, 32};
    s.epochs = 60;
    return s;
  }
  if (name == "separable") {
    s.kind = TaskKind::separable;
    s.classes = 2;
    s.dim = 8;
    s.hidden = {};
    s.epochs = 20;
    return s;
  }
  throw ConfigError("unknown task preset '" + std::string(name) + "'");
}

namespace {

Dataset draw(const TaskSpec &spec, std::size_t count, Rng &rng,
             const std::vector<double> &centers,
             const std::vector<double> &plane) {
  Dataset d;
  d.classes = spec.classes;
  d.x = TensorF({count, spec.dim});
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto label = static_cast<std::int32_t>(i % spec.classes);
    auto row = d.x.row(i);
    switch (spec.kind) {
      case TaskKind::blobs:
        for (std::size_t j = 0; j < spec.dim; ++j) {
          row[j] = static_cast<float>(
              rng.normal(centers[static_cast<std::size_t>(label) * spec.dim + j],
                         spec.spread));
        }
        break;
      case TaskKind::spirals: {
        const double t = std::sqrt(rng.uniform()) * 3.0 * std::numbers::pi;
        const double a = t + (label == 1 ? std::numbers::pi : 0.0);
        const double r = t / (3.0 * std::numbers::pi);
        row[0] = static_cast<float>(r * std::cos(a) + rng.normal(0.0, spec.spread));
        row[1] = static_cast<float>(r * std::sin(a) + rng.normal(0.0, spec.spread));
        for (std::size_t j = 2; j < spec.dim; ++j) {
          row[j] = static_cast<float>(rng.normal(0.0, spec.spread));
        }
        break;
      }
      case TaskKind::separable: {
        double side = 0.0;
        do {
          side = 0.0;
          for (std::size_t j = 0; j < spec.dim; ++j) {
            row[j] = static_cast<float>(rng.uniform(-1.0, 1.0));
            side += plane[j] * static_cast<double>(row[j]);
          }
        } while (std::abs(side) < spec.margin || (side > 0.0) != (label == 1));
        break;
      }
    }
    d.labels[i] = label;
  }
  // interleaved labels are balanced; shuffle so prefixes stay balanced-ish
  std::vector<std::size_t> perm(count);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Dataset out;
  out.classes = d.classes;
  out.x = gather_rows(d.x, perm);
  out.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) out.labels[i] = d.labels[perm[i]];
  return out;
}

}  // namespace

TaskData make_task_data(const TaskSpec &spec, std::uint64_t seed) {
  spec.validate();
  Rng layout(derive_seed(seed, 1));
  std::vector<double> centers(spec.classes * spec.dim);
  for (double &c : centers) c = layout.normal(0.0, spec.center_scale);
  std::vector<double> plane(spec.dim);
  double norm = 0.0;
  for (double &p : plane) {
    p = layout.normal();
    norm += p * p;
  }
  norm = std::sqrt(norm);
  for (double &p : plane) p /= norm;

  Rng train_rng(derive_seed(seed, 2));
  Rng test_rng(derive_seed(seed, 3));
  TaskData data;
  data.train = draw(spec, spec.train_count, train_rng, centers, plane);
  data.test = draw(spec, spec.test_count, test_rng, centers, plane);
  return data;
}

TensorF sample_rows(const TensorF &pool, std::size_t count,
                    std::uint64_t seed) {
  if (count > pool.dim(0)) {
    throw ConfigError("requested " + std::to_string(count) +
                      " calibration samples, pool holds " +
                      std::to_string(pool.dim(0)));
  }
  std::vector<std::size_t> perm(pool.dim(0));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, 7));
  rng.shuffle(perm);
  perm.resize(count);
  return gather_rows(pool, perm);
}

}  // namespace cwac
