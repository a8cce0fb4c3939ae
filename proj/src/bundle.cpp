// SPDX-License-Identifier: Apache-2.0
#include "cwac/bundle.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace cwac {

namespace fs = std::filesystem;
using nlohmann::json;

ModelBundle ModelBundle::from_compensated(const CompensatedModel &comp) {
  ModelBundle b;
  b.model = comp.base.model;
  b.quant = comp.base;
  b.compensation = CompensationSection{comp.cwac, comp.config, comp.stats};
  return b;
}

CompensatedModel ModelBundle::compensated() const {
  if (!quant || !compensation) {
    throw BundleError("bundle '" + model.name + "' carries no compensation section");
  }
  return {*quant, compensation->cwac, compensation->config, compensation->stats};
}

void ModelBundle::validate() const {
  if (fused) {
    if (!model.layers.empty()) throw BundleError("fused bundle must not carry float layers");
    if (quant || compensation) {
      throw BundleError("fused bundle must not carry quantization sections");
    }
    return;
  }
  model.validate();
  if (compensation && !quant) throw BundleError("compensation section without quant section");
  if (quant) {
    if (!(quant->model == model)) throw BundleError("quant section does not mirror the model");
    quant->validate();
  }
  if (compensation) {
    for (const auto &[i, p] : compensation->cwac) {
      if (i >= model.layers.size() || !model.layers[i].has_weights()) {
        throw BundleError("compensation for layer " + std::to_string(i) +
                          ", which is not linear/conv");
      }
      if (p.channels() != model.layers[i].out_channels) {
        throw BundleError("compensation for layer " + std::to_string(i) +
                          " has the wrong channel count");
      }
      p.validate();
    }
  }
}

namespace {

// ---- blob IO --------------------------------------------------------------

template <typename T>
void append_le(std::vector<char> &out, std::span<const T> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size_bytes());
  std::memcpy(out.data() + start, values.data(), values.size_bytes());
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (std::size_t i = start; i < out.size(); i += sizeof(T)) {
      std::reverse(out.begin() + static_cast<std::ptrdiff_t>(i),
                   out.begin() + static_cast<std::ptrdiff_t>(i + sizeof(T)));
    }
  }
}

class BlobWriter {
 public:
  template <typename T>
  json add(const std::string &name, const Tensor<T> &t) {
    std::vector<char> bytes;
    append_le<T>(bytes, t.data());
    blobs_[name] = std::move(bytes);
    return {{"blob", name}, {"dtype", to_string(Tensor<T>::kind)}, {"shape", t.shape()}};
  }
  template <typename T>
  json add(const std::string &name, const std::vector<T> &v) {
    return add(name, Tensor<T>({v.size()}, v));
  }

  void write(const fs::path &dir) const {
    for (const auto &[name, bytes] : blobs_) {
      std::ofstream f(dir / (name + ".bin"), std::ios::binary | std::ios::trunc);
      f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!f) throw BundleError("cannot write blob " + name);
    }
  }

 private:
  std::map<std::string, std::vector<char>> blobs_;
};

class BlobReader {
 public:
  explicit BlobReader(fs::path dir) : dir_(std::move(dir)) {}

  template <typename T>
  Tensor<T> get(const json &ref) {
    std::string name, dtype;
    Shape shape;
    try {
      name = ref.at("blob").get<std::string>();
      dtype = ref.at("dtype").get<std::string>();
      shape = ref.at("shape").get<Shape>();
    } catch (const json::exception &e) {
      throw BundleError(std::string("malformed tensor reference: ") + e.what());
    }
    if (name.empty() || name.find('/') != std::string::npos || name.find("..") != std::string::npos) {
      throw BundleError("invalid blob name '" + name + "'");
    }
    if (dtype != to_string(Tensor<T>::kind)) {
      throw BundleError("blob " + name + " has dtype " + dtype + ", expected " +
                        std::string(to_string(Tensor<T>::kind)));
    }
    const fs::path path = dir_ / (name + ".bin");
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) {
      throw BundleError("manifest references missing blob " + name);
    }
    const auto size = fs::file_size(path, ec);
    const std::size_t expect = shape_numel(shape) * sizeof(T);
    if (ec || size != expect) {
      throw BundleError("blob " + name + " holds " + std::to_string(size) +
                        " bytes, shape " + shape_str(shape) + " needs " +
                        std::to_string(expect));
    }
    std::vector<char> bytes(expect);
    std::ifstream f(path, std::ios::binary);
    f.read(bytes.data(), static_cast<std::streamsize>(expect));
    if (!f) throw BundleError("cannot read blob " + name);
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
      for (std::size_t i = 0; i < bytes.size(); i += sizeof(T)) {
        std::reverse(bytes.begin() + static_cast<std::ptrdiff_t>(i),
                     bytes.begin() + static_cast<std::ptrdiff_t>(i + sizeof(T)));
      }
    }
    std::vector<T> values(shape_numel(shape));
    std::memcpy(values.data(), bytes.data(), expect);
    return Tensor<T>(std::move(shape), std::move(values));
  }

  template <typename T>
  std::vector<T> get_vector(const json &ref) {
    Tensor<T> t = get<T>(ref);
    if (t.rank() != 1) throw BundleError("expected a rank-1 blob");
    return t.values();
  }

 private:
  fs::path dir_;
};

// ---- manifest pieces ------------------------------------------------------

json geometry_json(const WindowGeometry &g) {
  return {{"kernel", g.kernel}, {"stride", g.stride}, {"pad", g.pad}};
}

WindowGeometry geometry_from(const json &j) {
  return {j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>(),
          j.at("pad").get<std::size_t>()};
}

json quant_params_json(const QuantParams &p) {
  return {{"bits", p.bits},
          {"scheme", to_string(p.scheme)},
          {"scales", p.scales},
          {"zero_points", p.zero_points}};
}

QuantParams quant_params_from(const json &j) {
  QuantParams p;
  p.bits = j.at("bits").get<int>();
  p.scheme = scheme_from_string(j.at("scheme").get<std::string>());
  p.scales = j.at("scales").get<std::vector<double>>();
  p.zero_points = j.at("zero_points").get<std::vector<std::int32_t>>();
  p.validate();
  return p;
}

json optional_params_json(const std::optional<QuantParams> &p) {
  return p ? quant_params_json(*p) : json();
}

std::optional<QuantParams> optional_params_from(const json &j) {
  if (j.is_null()) return std::nullopt;
  return quant_params_from(j);
}

json act_json(const IntActivationParams &a) {
  return {{"scale", a.scale}, {"zero_point", a.zero_point}, {"bits", a.bits}};
}

IntActivationParams act_from(const json &j) {
  IntActivationParams a{j.at("scale").get<double>(), j.at("zero_point").get<std::int32_t>(),
                        j.at("bits").get<int>()};
  a.validate();
  return a;
}

json model_json(const Model &m, BlobWriter &w) {
  json layers = json::array();
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec &l = m.layers[i];
    json jl = {{"op", to_string(l.op)},
               {"in_channels", l.in_channels},
               {"out_channels", l.out_channels},
               {"geometry", geometry_json(l.geometry)}};
    if (l.has_weights()) {
      const std::string base = "layer" + std::to_string(i);
      jl["weight"] = w.add(base + ".weight", l.weight);
      jl["bias"] = w.add(base + ".bias", l.bias);
    }
    if (l.block) jl["block"] = *l.block;
    layers.push_back(std::move(jl));
  }
  return layers;
}

std::vector<LayerSpec> layers_from(const json &arr, BlobReader &r) {
  std::vector<LayerSpec> out;
  for (const json &jl : arr) {
    LayerSpec l;
    l.op = op_kind_from_string(jl.at("op").get<std::string>());
    l.in_channels = jl.at("in_channels").get<std::size_t>();
    l.out_channels = jl.at("out_channels").get<std::size_t>();
    l.geometry = geometry_from(jl.at("geometry"));
    if (l.has_weights()) {
      l.weight = r.get<float>(jl.at("weight"));
      l.bias = r.get<float>(jl.at("bias"));
    }
    if (jl.contains("block")) l.block = jl["block"].get<std::size_t>();
    out.push_back(std::move(l));
  }
  return out;
}

json quant_json(const QuantizedModel &q, BlobWriter &w) {
  json layers = json::array();
  for (std::size_t i = 0; i < q.layers.size(); ++i) {
    const LayerQuant &lq = q.layers[i];
    json jl = {{"output", optional_params_json(lq.output)}, {"weight", nullptr}};
    if (lq.weight) {
      jl["weight"] = {{"codes", w.add("layer" + std::to_string(i) + ".weight_q", lq.weight->codes)},
                      {"params", quant_params_json(lq.weight->params)}};
    }
    layers.push_back(std::move(jl));
  }
  return {{"input", optional_params_json(q.input)}, {"layers", layers}};
}

QuantizedModel quant_from(const json &j, const Model &model, BlobReader &r) {
  QuantizedModel q;
  q.model = model;
  q.input = optional_params_from(j.at("input"));
  for (const json &jl : j.at("layers")) {
    LayerQuant lq;
    lq.output = optional_params_from(jl.at("output"));
    if (!jl.at("weight").is_null()) {
      lq.weight = WeightQuant{r.get<std::uint8_t>(jl["weight"].at("codes")),
                              quant_params_from(jl["weight"].at("params"))};
    }
    q.layers.push_back(std::move(lq));
  }
  return q;
}

json compensation_json(const CompensationSection &c) {
  json layers = json::array();
  for (const auto &[i, p] : c.cwac) {
    layers.push_back({{"layer", i},
                      {"alpha", p.alpha},
                      {"beta", p.beta},
                      {"fallback_mask", p.fallback_mask},
                      {"clamped_mask", p.clamped_mask}});
  }
  json stats = json::array();
  for (const auto &s : c.stats) {
    stats.push_back({{"layer", s.layer},
                     {"channels", s.channels},
                     {"mse_before", s.mse_before},
                     {"mse_after", s.mse_after},
                     {"fallback_count", s.fallback_count},
                     {"clamped_count", s.clamped_count}});
  }
  return {{"config", c.config.to_json()}, {"layers", layers}, {"stats", stats}};
}

CompensationSection compensation_from(const json &j) {
  CompensationSection c;
  c.config = CalibrationConfig::from_json(j.at("config"));
  for (const json &jl : j.at("layers")) {
    CwacParams p;
    p.alpha = jl.at("alpha").get<std::vector<float>>();
    p.beta = jl.at("beta").get<std::vector<float>>();
    p.fallback_mask = jl.at("fallback_mask").get<std::vector<bool>>();
    p.clamped_mask = jl.at("clamped_mask").get<std::vector<bool>>();
    const auto layer = jl.at("layer").get<std::size_t>();
    if (!c.cwac.emplace(layer, std::move(p)).second) {
      throw BundleError("duplicate compensation entry for layer " + std::to_string(layer));
    }
  }
  for (const json &js : j.at("stats")) {
    c.stats.push_back({js.at("layer").get<std::size_t>(), js.at("channels").get<std::size_t>(),
                       js.at("mse_before").get<double>(), js.at("mse_after").get<double>(),
                       js.at("fallback_count").get<std::size_t>(),
                       js.at("clamped_count").get<std::size_t>()});
  }
  return c;
}

json fused_layer_json(const FusedLayerParams &l, std::size_t k, BlobWriter &w) {
  const std::string base = "fused" + std::to_string(k);
  std::vector<std::int32_t> m0, shift;
  for (const auto &m : l.multipliers) {
    m0.push_back(m.m0);
    shift.push_back(m.shift);
  }
  const auto &ref = l.reference;
  return {{"op", to_string(l.op)},
          {"layer_index", l.layer_index},
          {"geometry", geometry_json(l.geometry)},
          {"in_channels", l.in_channels},
          {"out_channels", l.out_channels},
          {"weight_q", w.add(base + ".weight_q", l.weight_q)},
          {"weight_zero_points", l.weight_zero_points},
          {"input", act_json(l.input)},
          {"output", act_json(l.output)},
          {"bias_acc", w.add(base + ".bias_acc", l.bias_acc)},
          {"const_acc", w.add(base + ".const_acc", l.const_acc)},
          {"multiplier_m0", m0},
          {"multiplier_shift", shift},
          {"beta_rounded", l.beta_rounded},
          {"reference",
           {{"weight_scales", ref.weight_scales},
            {"alpha", ref.alpha},
            {"beta", ref.beta},
            {"real_multipliers", ref.real_multipliers},
            {"beta_offsets", ref.beta_offsets},
            {"beta_over_output_scale", ref.beta_over_output_scale}}}};
}

FusedLayerParams fused_layer_from(const json &j, BlobReader &r) {
  FusedLayerParams l;
  l.op = op_kind_from_string(j.at("op").get<std::string>());
  l.layer_index = j.at("layer_index").get<std::size_t>();
  l.geometry = geometry_from(j.at("geometry"));
  l.in_channels = j.at("in_channels").get<std::size_t>();
  l.out_channels = j.at("out_channels").get<std::size_t>();
  l.weight_q = r.get<std::uint8_t>(j.at("weight_q"));
  l.weight_zero_points = j.at("weight_zero_points").get<std::vector<std::int32_t>>();
  l.input = act_from(j.at("input"));
  l.output = act_from(j.at("output"));
  l.bias_acc = r.get_vector<std::int32_t>(j.at("bias_acc"));
  l.const_acc = r.get_vector<std::int32_t>(j.at("const_acc"));
  const auto m0 = j.at("multiplier_m0").get<std::vector<std::int32_t>>();
  const auto shift = j.at("multiplier_shift").get<std::vector<int>>();
  if (m0.size() != shift.size()) throw BundleError("multiplier arrays differ in length");
  for (std::size_t c = 0; c < m0.size(); ++c) l.multipliers.push_back({m0[c], shift[c]});
  l.beta_rounded = j.at("beta_rounded").get<bool>();
  const json &ref = j.at("reference");
  l.reference.weight_scales = ref.at("weight_scales").get<std::vector<double>>();
  l.reference.alpha = ref.at("alpha").get<std::vector<double>>();
  l.reference.beta = ref.at("beta").get<std::vector<double>>();
  l.reference.real_multipliers = ref.at("real_multipliers").get<std::vector<double>>();
  l.reference.beta_offsets = ref.at("beta_offsets").get<std::vector<std::int32_t>>();
  l.reference.beta_over_output_scale =
      ref.at("beta_over_output_scale").get<std::vector<double>>();
  if (l.op != OpKind::linear && l.op != OpKind::conv2d) {
    throw BundleError("fused layer op must be linear or conv2d");
  }
  l.validate();
  return l;
}

json fused_json(const FusedModel &f, BlobWriter &w) {
  json ops = json::array();
  std::size_t k = 0;
  for (const FusedOp &op : f.ops) {
    if (const auto *l = std::get_if<FusedLayerParams>(&op)) {
      ops.push_back(fused_layer_json(*l, k++, w));
    } else if (const auto *r = std::get_if<IntRelu>(&op)) {
      ops.push_back({{"op", "relu"}, {"zero_point", r->zero_point}});
    } else if (const auto *t = std::get_if<IntLut>(&op)) {
      ops.push_back({{"op", "lut"},
                     {"function", to_string(t->op)},
                     {"input", act_json(t->input)},
                     {"output", act_json(t->output)},
                     {"table", t->table}});
    } else if (const auto *p = std::get_if<IntAvgPool>(&op)) {
      ops.push_back({{"op", "avgpool"}, {"geometry", geometry_json(p->geometry)}});
    } else {
      ops.push_back({{"op", "flatten"}});
    }
  }
  return {{"name", f.name},
          {"input_shape", f.input_shape},
          {"input", act_json(f.input)},
          {"output", act_json(f.output)},
          {"beta_rounding", f.beta_rounding},
          {"ops", ops}};
}

FusedModel fused_from(const json &j, BlobReader &r) {
  FusedModel f;
  f.name = j.at("name").get<std::string>();
  f.input_shape = j.at("input_shape").get<Shape>();
  f.input = act_from(j.at("input"));
  f.output = act_from(j.at("output"));
  f.beta_rounding = j.at("beta_rounding").get<bool>();
  for (const json &jo : j.at("ops")) {
    const auto op = jo.at("op").get<std::string>();
    if (op == "linear" || op == "conv2d") {
      f.ops.emplace_back(fused_layer_from(jo, r));
    } else if (op == "relu") {
      f.ops.emplace_back(IntRelu{jo.at("zero_point").get<std::int32_t>()});
    } else if (op == "lut") {
      IntLut t{op_kind_from_string(jo.at("function").get<std::string>()),
               act_from(jo.at("input")), act_from(jo.at("output")),
               jo.at("table").get<std::vector<std::uint8_t>>()};
      if (t.table.size() != static_cast<std::size_t>(t.input.qmax()) + 1) {
        throw BundleError("lookup table size does not match the input bit-width");
      }
      f.ops.emplace_back(std::move(t));
    } else if (op == "avgpool") {
      f.ops.emplace_back(IntAvgPool{geometry_from(jo.at("geometry"))});
    } else if (op == "flatten") {
      f.ops.emplace_back(IntFlatten{});
    } else {
      throw BundleError("unknown fused op '" + op + "'");
    }
  }
  return f;
}

}  // namespace

void save_bundle(const ModelBundle &bundle, const fs::path &dir) {
  bundle.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw BundleError("cannot create " + dir.string() + ": " + ec.message());

  BlobWriter w;
  json m;
  m["format_version"] = kBundleFormatVersion;
  m["name"] = bundle.model.name;
  m["input_shape"] = bundle.model.input_shape;
  m["metadata"] = bundle.model.metadata;
  m["layers"] = model_json(bundle.model, w);
  m["quant"] = bundle.quant ? quant_json(*bundle.quant, w) : json();
  m["compensation"] = bundle.compensation ? compensation_json(*bundle.compensation) : json();
  m["fused"] = bundle.fused ? fused_json(*bundle.fused, w) : json();

  w.write(dir);
  std::ofstream f(dir / "manifest.json", std::ios::trunc);
  f << m.dump(2) << '\n';
  if (!f) throw BundleError("cannot write manifest in " + dir.string());
}

ModelBundle load_bundle(const fs::path &dir) {
  const fs::path manifest = dir / "manifest.json";
  std::ifstream f(manifest);
  if (!f) throw BundleError("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(f);
  } catch (const json::exception &e) {
    throw BundleError("manifest is not valid JSON: " + std::string(e.what()));
  }

  BlobReader r(dir);
  ModelBundle b;
  try {
    const int version = m.at("format_version").get<int>();
    if (version != kBundleFormatVersion) {
      throw BundleError("bundle format version " + std::to_string(version) +
                        " is not supported (expected " +
                        std::to_string(kBundleFormatVersion) + ")");
    }
    b.model.name = m.at("name").get<std::string>();
    b.model.input_shape = m.at("input_shape").get<Shape>();
    b.model.metadata = m.at("metadata");
    b.model.layers = layers_from(m.at("layers"), r);
    if (!m.at("quant").is_null()) b.quant = quant_from(m["quant"], b.model, r);
    if (!m.at("compensation").is_null()) b.compensation = compensation_from(m["compensation"]);
    if (!m.at("fused").is_null()) b.fused = fused_from(m["fused"], r);
  } catch (const json::exception &e) {
    throw BundleError("malformed manifest: " + std::string(e.what()));
  } catch (const BundleError &) {
    throw;
  } catch (const Error &e) {
    throw BundleError(std::string("invalid bundle content: ") + e.what());
  }
  try {
    b.validate();
  } catch (const BundleError &) {
    throw;
  } catch (const Error &e) {
    throw BundleError(std::string("invalid bundle content: ") + e.what());
  }
  return b;
}

}  // namespace cwac
