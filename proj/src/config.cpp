#include "dpkfc/config.hpp"

#include <cmath>
#include <sstream>

namespace dpkfc::config {

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& p : v) s += (s.empty() ? "" : "; ") + p;
  return s;
}

const char* type_name(const Json& j) {
  if (j.is_null()) return "null";
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  return "object";
}

// Numbers that may be switched off with null even though their default is set.
bool nullable(const std::string& key) { return key == "privacy.target_epsilon"; }

void merge_strict(Json& base, const Json& user, const std::string& path, std::vector<std::string>& problems) {
  if (!user.is_object()) {
    problems.push_back(path + ": expected an object, got " + type_name(user));
    return;
  }
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) {
      problems.push_back(key + ": unknown key");
      continue;
    }
    Json& slot = base[it.key()];
    const Json& val = it.value();
    if (slot.is_object()) {
      merge_strict(slot, val, key, problems);
    } else if (slot.is_null() || (val.is_null() && nullable(key))) {
      if (!val.is_null() && !val.is_number()) problems.push_back(key + ": expected a number or null, got " + type_name(val));
      else slot = val;
    } else if (slot.is_number()) {
      if (!val.is_number()) problems.push_back(key + ": expected a number, got " + type_name(val));
      else slot = val;
    } else if (std::string(type_name(slot)) != type_name(val)) {
      problems.push_back(key + ": expected " + std::string(type_name(slot)) + ", got " + type_name(val));
    } else {
      slot = val;
    }
  }
}

Json* locate(Json& doc, const std::string& path, bool create) {
  Json* cur = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) return nullptr;
    if (cur->is_null() && create) *cur = Json::object();
    if (!cur->is_object()) return nullptr;
    if (!cur->contains(key) && !create) return nullptr;
    cur = &(*cur)[key];
    if (dot == std::string::npos) return cur;
    start = dot + 1;
  }
}

double num(const Json& j, const char* key) { return j.at(key).get<double>(); }
std::size_t count(const Json& j, const char* key) { return j.at(key).get<std::size_t>(); }

nn::Shape shape_of(const Json& arr) {
  return {arr.at(0).get<std::size_t>(), arr.at(1).get<std::size_t>(), arr.at(2).get<std::size_t>()};
}

void check_positive_int(const Json& j, const std::string& key, std::vector<std::string>& problems, bool allow_zero = false) {
  if (!j.is_number_integer() || j.get<std::int64_t>() < (allow_zero ? 0 : 1))
    problems.push_back(key + ": expected an integer " + (allow_zero ? ">= 0" : ">= 1"));
}

void check_shape(const Json& j, const std::string& key, std::vector<std::string>& problems, bool allow_empty) {
  if (!j.is_array()) {
    problems.push_back(key + ": expected [channels, height, width]");
    return;
  }
  if (j.empty() && allow_empty) return;
  if (j.size() != 3) {
    problems.push_back(key + ": expected [channels, height, width]");
    return;
  }
  for (const auto& v : j)
    if (!v.is_number_integer() || v.get<std::int64_t>() < 1) problems.push_back(key + ": dimensions must be integers >= 1");
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::invalid_argument("invalid config: " + join(problems)), problems_(std::move(problems)) {}

Json defaults() {
  return Json::parse(R"({
    "task": "train",
    "seed": 0,
    "output_dir": "out",
    "dataset": {
      "kind": "blobs",
      "images": "",
      "labels": "",
      "subsample": 0,
      "n": 2000,
      "dim": 64,
      "classes": 10,
      "noise": 1.0,
      "scale": 4.0,
      "seed": 0,
      "shape": [1, 8, 8]
    },
    "model": {
      "preset": "small_cnn",
      "layers": [],
      "hidden": 128
    },
    "train": {
      "method": "dpkfc",
      "lr": 0.001,
      "momentum": 0.9,
      "epochs": 5,
      "batch": 256,
      "eval_every": 50,
      "log_snr": true
    },
    "privacy": {
      "clip": 1.0,
      "sigma": null,
      "target_epsilon": 1.0,
      "delta": null,
      "non_private": false
    },
    "kfac": {
      "source": "pink",
      "probe_batch": 64,
      "damping": 0.001,
      "gamma": 0.01,
      "refresh_period": 50,
      "max_factor_dim": 4096,
      "alpha": 1.0,
      "vocab": 1000,
      "max_len": 32,
      "zipf_exponent": 0.0
    },
    "accountant": {
      "q": null,
      "batch": null,
      "n": null,
      "sigma": null,
      "target_epsilon": null,
      "delta": 1e-5,
      "steps": 1
    },
    "noise": {
      "alpha": 1.0,
      "batch": 32,
      "channels": 1,
      "height": 64,
      "width": 64
    },
    "diagnose": {
      "checkpoint": "",
      "sources": ["pink", "oracle"],
      "probe_batch": 256,
      "slq_probes": 0,
      "slq_steps": 20,
      "slq_batch": 128
    }
  })");
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError({"override '" + assignment + "': expected key.path=value"});
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* slot = locate(doc, path, true);
  if (!slot) throw ConfigError({"override '" + assignment + "': bad key path"});
  *slot = std::move(value);
}

Json resolve(const Json& user, const std::vector<std::string>& overrides) {
  Json doc = user.is_null() ? Json::object() : user;
  std::vector<std::string> problems;
  for (const auto& o : overrides) {
    try {
      apply_override(doc, o);
    } catch (const ConfigError& e) {
      problems.insert(problems.end(), e.problems().begin(), e.problems().end());
    }
  }
  Json out = defaults();
  merge_strict(out, doc, "", problems);
  if (problems.empty()) {
    auto more = validate(out);
    problems.insert(problems.end(), more.begin(), more.end());
  }
  if (!problems.empty()) throw ConfigError(problems);
  return out;
}

std::vector<std::string> validate(const Json& c) {
  std::vector<std::string> p;
  const std::string task = c.at("task").get<std::string>();
  if (task != "train" && task != "accountant" && task != "diagnose" && task != "gen-noise" && task != "probe-spectrum")
    p.push_back("task: expected one of train, accountant, diagnose, gen-noise, probe-spectrum");
  check_positive_int(c.at("seed"), "seed", p, true);
  if (c.at("output_dir").get<std::string>().empty()) p.push_back("output_dir: must not be empty");

  const auto& d = c.at("dataset");
  const std::string kind = d.at("kind").get<std::string>();
  if (kind != "blobs" && kind != "idx") p.push_back("dataset.kind: expected blobs or idx");
  if (kind == "idx" && (task == "train" || task == "diagnose" || task == "probe-spectrum")) {
    if (d.at("images").get<std::string>().empty()) p.push_back("dataset.images: required for idx datasets");
    if (d.at("labels").get<std::string>().empty()) p.push_back("dataset.labels: required for idx datasets");
  }
  check_positive_int(d.at("subsample"), "dataset.subsample", p, true);
  check_positive_int(d.at("n"), "dataset.n", p);
  check_positive_int(d.at("dim"), "dataset.dim", p);
  check_positive_int(d.at("classes"), "dataset.classes", p);
  check_positive_int(d.at("seed"), "dataset.seed", p, true);
  check_shape(d.at("shape"), "dataset.shape", p, true);
  if (kind == "blobs") {
    if (d.at("classes").is_number_integer() && d.at("classes").get<std::int64_t>() < 2) p.push_back("dataset.classes: must be >= 2");
    if (d.at("n").is_number_integer() && d.at("classes").is_number_integer() &&
        d.at("n").get<std::int64_t>() < d.at("classes").get<std::int64_t>())
      p.push_back("dataset.n: must be >= dataset.classes");
    if (!(num(d, "noise") >= 0.0)) p.push_back("dataset.noise: must be >= 0");
    if (d.at("shape").is_array() && d.at("shape").size() == 3 && d.at("dim").is_number_integer()) {
      std::int64_t prod = 1;
      for (const auto& v : d.at("shape")) prod *= v.is_number_integer() ? v.get<std::int64_t>() : 0;
      if (prod != d.at("dim").get<std::int64_t>()) p.push_back("dataset.shape: product must equal dataset.dim");
    }
  }

  const auto& m = c.at("model");
  const std::string preset = m.at("preset").get<std::string>();
  if (preset != "mnist_cnn" && preset != "small_cnn" && preset != "mlp" && preset != "custom")
    p.push_back("model.preset: expected mnist_cnn, small_cnn, mlp or custom");
  if (preset == "custom" && m.at("layers").empty()) p.push_back("model.layers: required when preset is custom");
  for (const auto& l : m.at("layers")) {
    if (!l.is_string()) {
      p.push_back("model.layers: entries must be strings");
      continue;
    }
    try {
      nn::parse_layer(l.get<std::string>());
    } catch (const std::exception& e) {
      p.push_back(std::string("model.layers: ") + e.what());
    }
  }
  check_positive_int(m.at("hidden"), "model.hidden", p);

  const auto& t = c.at("train");
  try {
    train::parse_method(t.at("method").get<std::string>());
  } catch (const std::exception&) {
    p.push_back("train.method: expected dpsgd or dpkfc");
  }
  if (!(num(t, "lr") > 0.0)) p.push_back("train.lr: must be > 0");
  if (!(num(t, "momentum") >= 0.0 && num(t, "momentum") < 1.0)) p.push_back("train.momentum: must lie in [0, 1)");
  check_positive_int(t.at("epochs"), "train.epochs", p);
  check_positive_int(t.at("batch"), "train.batch", p);
  check_positive_int(t.at("eval_every"), "train.eval_every", p);

  const auto& pr = c.at("privacy");
  const bool non_private = pr.at("non_private").get<bool>();
  if (!(num(pr, "clip") > 0.0)) p.push_back("privacy.clip: must be > 0");
  const bool has_sigma = !pr.at("sigma").is_null();
  const bool has_target = !pr.at("target_epsilon").is_null();
  if (!non_private && has_sigma == has_target && task == "train")
    p.push_back("privacy: set exactly one of sigma and target_epsilon");
  if (has_sigma && !(num(pr, "sigma") >= 0.0)) p.push_back("privacy.sigma: must be >= 0");
  if (has_sigma && num(pr, "sigma") == 0.0 && !non_private) p.push_back("privacy.sigma: 0 requires privacy.non_private");
  if (has_target && !(num(pr, "target_epsilon") > 0.0)) p.push_back("privacy.target_epsilon: must be > 0");
  if (!pr.at("delta").is_null() && !(num(pr, "delta") > 0.0 && num(pr, "delta") < 1.0))
    p.push_back("privacy.delta: must lie in (0, 1)");

  const auto& k = c.at("kfac");
  const std::string src = k.at("source").get<std::string>();
  if (src != "pink" && src != "token" && src != "oracle" && src != "proxy")
    p.push_back("kfac.source: expected pink, token, oracle or proxy");
  check_positive_int(k.at("probe_batch"), "kfac.probe_batch", p);
  check_positive_int(k.at("refresh_period"), "kfac.refresh_period", p);
  check_positive_int(k.at("max_factor_dim"), "kfac.max_factor_dim", p);
  check_positive_int(k.at("vocab"), "kfac.vocab", p);
  check_positive_int(k.at("max_len"), "kfac.max_len", p);
  if (!(num(k, "damping") >= 0.0)) p.push_back("kfac.damping: must be >= 0");
  if (!(num(k, "gamma") > 0.0)) p.push_back("kfac.gamma: must be > 0");
  if (!(num(k, "alpha") >= 0.0)) p.push_back("kfac.alpha: must be >= 0");
  if (!(num(k, "zipf_exponent") >= 0.0)) p.push_back("kfac.zipf_exponent: must be >= 0");

  const auto& a = c.at("accountant");
  if (task == "accountant") {
    const bool has_q = !a.at("q").is_null();
    const bool has_bn = !a.at("batch").is_null() && !a.at("n").is_null();
    if (has_q == has_bn) p.push_back("accountant: set either q or both batch and n");
    if (has_q && !(num(a, "q") > 0.0 && num(a, "q") <= 1.0)) p.push_back("accountant.q: must lie in (0, 1]");
    if (has_bn && !(num(a, "batch") >= 1.0 && num(a, "n") >= num(a, "batch")))
      p.push_back("accountant: need 1 <= batch <= n");
    if (a.at("sigma").is_null() == a.at("target_epsilon").is_null())
      p.push_back("accountant: set exactly one of sigma and target_epsilon");
    if (!a.at("sigma").is_null() && !(num(a, "sigma") > 0.0)) p.push_back("accountant.sigma: must be > 0");
    if (!a.at("target_epsilon").is_null() && !(num(a, "target_epsilon") > 0.0))
      p.push_back("accountant.target_epsilon: must be > 0");
    if (!(num(a, "delta") > 0.0 && num(a, "delta") < 1.0)) p.push_back("accountant.delta: must lie in (0, 1)");
    check_positive_int(a.at("steps"), "accountant.steps", p);
  }

  const auto& nz = c.at("noise");
  if (!(num(nz, "alpha") >= 0.0)) p.push_back("noise.alpha: must be >= 0");
  check_positive_int(nz.at("batch"), "noise.batch", p);
  check_positive_int(nz.at("channels"), "noise.channels", p);
  check_positive_int(nz.at("height"), "noise.height", p);
  check_positive_int(nz.at("width"), "noise.width", p);

  const auto& dg = c.at("diagnose");
  if (task == "diagnose" && dg.at("checkpoint").get<std::string>().empty())
    p.push_back("diagnose.checkpoint: required for the diagnose task");
  for (const auto& s : dg.at("sources")) {
    const std::string name = s.is_string() ? s.get<std::string>() : "";
    if (name != "pink" && name != "token" && name != "oracle" && name != "proxy")
      p.push_back("diagnose.sources: entries must be pink, token, oracle or proxy");
  }
  check_positive_int(dg.at("probe_batch"), "diagnose.probe_batch", p);
  check_positive_int(dg.at("slq_probes"), "diagnose.slq_probes", p, true);
  check_positive_int(dg.at("slq_steps"), "diagnose.slq_steps", p);
  check_positive_int(dg.at("slq_batch"), "diagnose.slq_batch", p);
  return p;
}

std::vector<nn::LayerSpec> preset_layers(const std::string& name, const nn::Shape& in, std::size_t num_classes,
                                         std::size_t hidden) {
  using namespace nn;
  const Activation relu{ActivationKind::relu};
  if (name == "mlp") {
    return {Flatten{}, Linear{in.size(), hidden, true}, relu, Linear{hidden, hidden, true}, relu,
            Linear{hidden, num_classes, true}};
  }
  if (name == "mnist_cnn" || name == "small_cnn") {
    // Two stride-2 3x3 convolutions (16/32 filters, or 8/16 for small_cnn), then two dense layers.
    const std::size_t c1 = name == "mnist_cnn" ? 16 : 8;
    const std::size_t c2 = name == "mnist_cnn" ? 32 : 16;
    const std::size_t stride = 2;
    const std::size_t h1 = conv_out_size(in.height, 3, stride, 1), w1 = conv_out_size(in.width, 3, stride, 1);
    const std::size_t h2 = conv_out_size(h1, 3, stride, 1), w2 = conv_out_size(w1, 3, stride, 1);
    return {Conv2d{in.channels, c1, 3, stride, 1, true}, relu, Conv2d{c1, c2, 3, stride, 1, true}, relu, Flatten{},
            Linear{c2 * h2 * w2, hidden, true}, relu, Linear{hidden, num_classes, true}};
  }
  throw ContractError("unknown model preset '" + name + "'");
}

nn::Model build_model(const Json& c, const nn::Shape& in, std::size_t num_classes) {
  const auto& m = c.at("model");
  const std::string preset = m.at("preset").get<std::string>();
  std::vector<nn::LayerSpec> layers;
  if (preset == "custom") {
    for (const auto& l : m.at("layers")) layers.push_back(nn::parse_layer(l.get<std::string>()));
  } else {
    layers = preset_layers(preset, in, num_classes, count(m, "hidden"));
  }
  return nn::Model(in, std::move(layers));
}

data::BlobsSpec blobs_spec(const Json& d) {
  data::BlobsSpec s;
  s.n = count(d, "n");
  s.dim = count(d, "dim");
  s.classes = count(d, "classes");
  s.noise = num(d, "noise");
  s.scale = num(d, "scale");
  s.seed = d.at("seed").get<std::uint64_t>();
  if (!d.at("shape").empty()) s.shape = shape_of(d.at("shape"));
  return s;
}

data::Dataset build_dataset(const Json& c) {
  const auto& d = c.at("dataset");
  data::Dataset ds;
  if (d.at("kind") == "idx") {
    ds = data::load_idx(d.at("images").get<std::string>(), d.at("labels").get<std::string>());
  } else {
    ds = data::gen_blobs(blobs_spec(d));
  }
  const std::size_t sub = count(d, "subsample");
  if (sub > 0) ds = data::subsample(ds, sub, c.at("seed").get<std::uint64_t>());
  return ds;
}

kfac::KfacConfig build_kfac_config(const Json& c) {
  const auto& k = c.at("kfac");
  kfac::KfacConfig cfg;
  cfg.probe_batch = count(k, "probe_batch");
  cfg.damping = num(k, "damping");
  cfg.gamma = num(k, "gamma");
  cfg.refresh_period = count(k, "refresh_period");
  cfg.max_factor_dim = count(k, "max_factor_dim");
  const std::string src = k.at("source").get<std::string>();
  if (src == "pink") {
    PinkNoiseSpec s;
    s.alpha = num(k, "alpha");
    cfg.source = kfac::SyntheticPink{s};
  } else if (src == "token") {
    TokenNoiseSpec s;
    s.vocab = count(k, "vocab");
    s.max_len = count(k, "max_len");
    s.zipf_exponent = num(k, "zipf_exponent");
    cfg.source = kfac::SyntheticToken{s};
  } else if (src == "oracle") {
    cfg.source = kfac::PrivateOracle{};
  } else {
    cfg.source = kfac::DatasetProbe{};  // bound to a proxy dataset by the caller
  }
  return cfg;
}

train::TrainConfig build_train_config(const Json& c, const data::Dataset& dataset) {
  const auto& t = c.at("train");
  const auto& pr = c.at("privacy");
  train::TrainConfig cfg;
  cfg.method = train::parse_method(t.at("method").get<std::string>());
  cfg.kfac = build_kfac_config(c);
  cfg.lr = num(t, "lr");
  cfg.momentum = num(t, "momentum");
  cfg.epochs = count(t, "epochs");
  cfg.expected_batch = count(t, "batch");
  cfg.eval_every = count(t, "eval_every");
  cfg.log_snr = t.at("log_snr").get<bool>();
  cfg.seed = c.at("seed").get<std::uint64_t>();
  cfg.privacy.clip = num(pr, "clip");
  cfg.privacy.non_private = pr.at("non_private").get<bool>();
  cfg.privacy.delta = pr.at("delta").is_null() ? 1.0 / static_cast<double>(std::max<std::size_t>(2, dataset.train_idx.size()))
                                               : num(pr, "delta");
  if (!pr.at("sigma").is_null()) {
    cfg.privacy.noise_multiplier = num(pr, "sigma");
  } else if (!cfg.privacy.non_private) {
    cfg.target_epsilon = num(pr, "target_epsilon");
  } else {
    cfg.privacy.noise_multiplier = 0.0;
  }
  return cfg;
}

}  // namespace dpkfc::config
