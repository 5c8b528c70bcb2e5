#include "dpkfc/app.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dpkfc/accountant.hpp"
#include "dpkfc/checkpoint.hpp"
#include "dpkfc/diagnostics.hpp"
#include "dpkfc/probes.hpp"

namespace dpkfc::app {

namespace {

using config::Json;
using io::csv_number;

/// Files are gathered in memory and only written once the task has succeeded.
struct Outputs {
  std::vector<std::pair<std::string, std::string>> files;
  void add(std::string name, std::string bytes) { files.emplace_back(std::move(name), std::move(bytes)); }
};

void commit(const std::filesystem::path& dir, const Json& resolved, Outputs& outs) {
  std::filesystem::create_directories(dir);
  Json echo = resolved;
  outs.add("config.json", echo.dump(2) + "\n");
  for (const auto& [name, bytes] : outs.files) io::write_atomic(dir / name, bytes);
}

std::uint64_t seed_of(const Json& c) { return c.at("seed").get<std::uint64_t>(); }

data::Dataset load_dataset(const Json& c) {
  auto d = config::build_dataset(c);
  d.validate();
  return d;
}

nn::Model init_model(const Json& c, const data::Dataset& d) {
  auto m = config::build_model(c, d.shape, d.num_classes);
  Rng init = Rng(seed_of(c)).split(streams::kInit);
  m.init(init);
  return m;
}

/// Factors for a named probe source ("pink", "token", "oracle", "proxy").
std::vector<kfac::FactorPair> factors_for(const std::string& source, const nn::Model& model, const Json& c,
                                          const data::Split& train_rows, const data::Dataset& proxy,
                                          std::size_t probe_batch, Rng& rng) {
  kfac::KfacConfig k = config::build_kfac_config(c);
  k.probe_batch = probe_batch;
  if (source == "pink") {
    PinkNoiseSpec s;
    s.alpha = c.at("kfac").at("alpha").get<double>();
    k.source = kfac::SyntheticPink{s};
  } else if (source == "token") {
    TokenNoiseSpec s;
    s.vocab = c.at("kfac").at("vocab").get<std::size_t>();
    s.max_len = c.at("kfac").at("max_len").get<std::size_t>();
    k.source = kfac::SyntheticToken{s};
  } else if (source == "oracle") {
    k.source = kfac::PrivateOracle{&train_rows.x, train_rows.y};
  } else {
    k.source = kfac::DatasetProbe{&proxy.features, proxy.labels, "proxy", false};
  }
  const auto probe = kfac::make_probe_batch(model, k, rng);
  return kfac::estimate_factors(model, probe.x, probe.y, k.damping);
}

std::string spectrum_csv(const diag::SpectrumReport& r) {
  std::ostringstream os;
  os << "layer,rank,value,source\n";
  for (const auto& row : r.rows)
    for (std::size_t i = 0; i < row.eigenvalues.size(); ++i)
      os << row.layer << "," << i << "," << csv_number(row.eigenvalues[i]) << "," << row.source << "\n";
  return os.str();
}

std::string alignment_csv(const diag::AlignmentReport& r) {
  std::ostringstream os;
  os << "step,layer,factor,reference,candidate,cosine,rel_frob,cosine_normalized,rel_frob_normalized\n";
  for (const auto& a : r.rows)
    os << a.step << "," << a.layer << "," << a.factor << "," << a.reference << "," << a.candidate << ","
       << csv_number(a.cosine) << "," << csv_number(a.rel_frob) << "," << csv_number(a.cosine_normalized) << ","
       << csv_number(a.rel_frob_normalized) << "\n";
  return os.str();
}

int task_train(const Json& c, std::ostream& out, Outputs& outs) {
  const auto ds = load_dataset(c);
  auto model = init_model(c, ds);
  auto cfg = config::build_train_config(c, ds);
  const data::Dataset proxy = mismatched_proxy(ds, seed_of(c));
  if (auto* p = std::get_if<kfac::DatasetProbe>(&cfg.kfac.source)) *p = {&proxy.features, proxy.labels, "proxy", false};

  auto result = train::train(std::move(model), ds, cfg);
  const auto& rec = result.record;
  outs.add("run.csv", run_csv(rec));
  Json summary = {
      {"method", rec.method},
      {"probe_source", rec.probe_source},
      {"seed", rec.seed},
      {"final_accuracy", rec.final_accuracy},
      {"final_epsilon", std::isfinite(rec.final_epsilon) ? Json(rec.final_epsilon) : Json("inf")},
      {"best_order", rec.best_order},
      {"delta", rec.delta},
      {"sigma", rec.sigma},
      {"sample_rate", rec.sample_rate},
      {"total_steps", rec.total_steps},
      {"refreshes", rec.refreshes},
      {"private_guarantee", rec.private_guarantee},
      {"normalization", ds.normalization},
  };
  if (!rec.private_guarantee) summary["warning"] = "NON-PRIVATE: this run carries no differential privacy guarantee";
  outs.add("summary.json", summary.dump(2) + "\n");
  io::Checkpoint ck{result.model, result.state, ds.normalization};
  outs.add("checkpoint.bin", io::encode_checkpoint(ck));
  out << "final_accuracy " << csv_number(rec.final_accuracy) << "\n";
  out << "final_epsilon " << csv_number(rec.final_epsilon) << "\n";
  if (!rec.private_guarantee) out << "NON-PRIVATE run\n";
  return kOk;
}

int task_accountant(const Json& c, std::ostream& out, Outputs& outs) {
  const auto& a = c.at("accountant");
  const double q = a.at("q").is_null() ? a.at("batch").get<double>() / a.at("n").get<double>() : a.at("q").get<double>();
  const auto steps = a.at("steps").get<std::size_t>();
  const double delta = a.at("delta").get<double>();
  const double sigma = a.at("sigma").is_null()
                           ? dp::calibrate_sigma(a.at("target_epsilon").get<double>(), delta, q, steps)
                           : a.at("sigma").get<double>();
  dp::AccountantState st;
  st.step(q, sigma, steps);
  const auto e = dp::epsilon_of(st, delta);
  std::ostringstream table;
  table << "order,rdp,epsilon\n";
  for (std::size_t k = 0; k < st.orders.size(); ++k)
    table << st.orders[k] << "," << csv_number(st.rdp[k]) << ","
          << csv_number(st.rdp[k] + std::log(1.0 / delta) / (st.orders[k] - 1)) << "\n";
  out << "epsilon " << csv_number(e.epsilon) << "\n";
  out << "sigma " << csv_number(sigma) << "\n";
  out << "order " << e.order << "\n";
  out << table.str();
  outs.add("accountant.csv", table.str());
  Json summary = {{"epsilon", e.epsilon}, {"sigma", sigma}, {"order", e.order}, {"q", q}, {"steps", steps}, {"delta", delta}};
  outs.add("summary.json", summary.dump(2) + "\n");
  return kOk;
}

int task_gen_noise(const Json& c, std::ostream& out, Outputs& outs) {
  const auto& n = c.at("noise");
  PinkNoiseSpec s;
  s.alpha = n.at("alpha").get<double>();
  s.batch = n.at("batch").get<std::size_t>();
  s.channels = n.at("channels").get<std::size_t>();
  s.height = n.at("height").get<std::size_t>();
  s.width = n.at("width").get<std::size_t>();
  Rng rng = Rng(seed_of(c)).split(streams::kProbe);
  const Matrix x = gen_pink_noise(s, rng);
  const Matrix per_channel(s.batch * s.channels, s.height * s.width, std::vector<double>(x.values().begin(), x.values().end()));
  const auto spec = radial_power_spectrum(per_channel, s.height, s.width);
  std::ostringstream csv;
  csv << "radius,power\n";
  for (std::size_t i = 0; i < spec.radius.size(); ++i) csv << csv_number(spec.radius[i]) << "," << csv_number(spec.power[i]) << "\n";
  outs.add("noise.tensor", io::encode_tensor(x, {s.batch, s.channels, s.height, s.width}));
  outs.add("spectrum.csv", csv.str());
  outs.add("summary.json", Json{{"alpha", s.alpha}, {"slope", spec.slope}, {"seed", seed_of(c)}}.dump(2) + "\n");
  out << "slope " << csv_number(spec.slope) << "\n";
  return kOk;
}

std::vector<std::string> source_list(const Json& c) {
  std::vector<std::string> s;
  for (const auto& v : c.at("diagnose").at("sources")) s.push_back(v.get<std::string>());
  return s;
}

void spectra_and_alignment(const Json& c, const nn::Model& model, const data::Dataset& ds, std::size_t step, Outputs& outs,
                           std::ostream& out) {
  const auto tr = data::train_split(ds);
  const auto proxy = mismatched_proxy(ds, seed_of(c));
  const auto probe_batch = c.at("diagnose").at("probe_batch").get<std::size_t>();
  const Rng root = Rng(seed_of(c)).split(streams::kDiagnostics);
  std::vector<std::pair<std::string, std::vector<kfac::FactorPair>>> sources;
  std::uint64_t stream = 0;
  for (const auto& name : source_list(c)) {
    Rng rng = root.split(stream++);
    sources.emplace_back(name, factors_for(name, model, c, tr, proxy, probe_batch, rng));
  }
  const auto spectra = diag::spectrum_report(sources);
  outs.add("spectrum.csv", spectrum_csv(spectra));
  if (sources.size() >= 2) {
    diag::AlignmentReport rep;
    std::vector<std::pair<std::string, std::vector<kfac::FactorPair>>> cands(sources.begin() + 1, sources.end());
    diag::track_alignment(rep, step, sources.front().first, sources.front().second, cands);
    outs.add("alignment.csv", alignment_csv(rep));
    // Log-spectrum cosine of the first layer against the reference.
    const auto& ref = spectra.rows;
    for (const auto& r : ref)
      if (r.layer == 0 && r.source != sources.front().first)
        for (const auto& r0 : ref)
          if (r0.layer == 0 && r0.source == sources.front().first)
            out << "layer0_log_spectrum_cosine " << r.source << " " << csv_number(diag::log_spectrum_cosine(r0.eigenvalues, r.eigenvalues))
                << "\n";
  }
}

int task_probe_spectrum(const Json& c, std::ostream& out, Outputs& outs) {
  const auto ds = load_dataset(c);
  const auto model = init_model(c, ds);
  spectra_and_alignment(c, model, ds, 0, outs, out);
  return kOk;
}

int task_diagnose(const Json& c, std::ostream& out, Outputs& outs) {
  const auto ck = io::load_checkpoint(c.at("diagnose").at("checkpoint").get<std::string>());
  const auto ds = load_dataset(c);
  if (ck.model.input_dim() != ds.shape.size()) throw ContractError("diagnose: checkpoint input does not match the dataset");
  spectra_and_alignment(c, ck.model, ds, 0, outs, out);
  if (ck.kfac) {
    diag::SpectrumReport r;
    for (const auto& l : ck.kfac->layers) r.rows.push_back({l.layer_id, "checkpoint:" + ck.kfac->source, diag::layer_spectrum(l)});
    outs.add("checkpoint_spectrum.csv", spectrum_csv(r));
  }
  const auto probes = c.at("diagnose").at("slq_probes").get<std::size_t>();
  if (probes > 0) {
    const auto tr = data::train_split(ds);
    const std::size_t m = std::min(tr.y.size(), c.at("diagnose").at("slq_batch").get<std::size_t>());
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = ds.train_idx[i];
    const auto batch = data::take(ds, idx);
    const auto theta = ck.model.flat_params();
    const double h = diag::default_hvp_step(theta);
    diag::Hvp hvp = [&](std::span<const double> v) {
      // The finite-difference step is taken along v / |v| and rescaled, keeping the operator linear.
      const double nv = norm2(v);
      if (nv == 0.0) return std::vector<double>(v.size(), 0.0);
      std::vector<double> u(v.begin(), v.end());
      for (double& x : u) x /= nv;
      auto r = diag::hvp_finite_diff(ck.model, batch.x, batch.y, u, h);
      for (double& x : r) x *= nv;
      return r;
    };
    diag::SlqOptions opt;
    opt.probes = probes;
    opt.lanczos_steps = c.at("diagnose").at("slq_steps").get<std::size_t>();
    Rng rng = Rng(seed_of(c)).split(streams::kDiagnostics).split(1000);
    const auto res = diag::slq_density(hvp, theta.size(), opt, rng);
    std::ostringstream os;
    os << "probe,node,weight\n";
    for (std::size_t p = 0; p < res.nodes.size(); ++p)
      for (std::size_t j = 0; j < res.nodes[p].size(); ++j)
        os << p << "," << csv_number(res.nodes[p][j]) << "," << csv_number(res.weights[p][j]) << "\n";
    outs.add("slq.csv", os.str());
    out << "slq_breakdowns " << res.breakdowns << "\n";
  }
  return kOk;
}

void error_record(std::ostream& err, const char* kind, const std::string& message, const std::vector<std::string>& problems = {}) {
  Json e = {{"status", "error"}, {"kind", kind}, {"message", message}};
  if (!problems.empty()) e["problems"] = problems;
  err << e.dump() << "\n";
}

}  // namespace

std::filesystem::path output_dir(const Json& resolved) {
  std::filesystem::path p = resolved.at("output_dir").get<std::string>();
  if (p.is_relative())
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) p = std::filesystem::path(root) / p;
  return p;
}

std::string run_csv(const train::RunRecord& record) {
  std::size_t nsnr = 0;
  std::vector<std::string> metric_names;
  for (const auto& s : record.steps) {
    nsnr = std::max(nsnr, s.snr.size());
    for (const auto& [k, v] : s.metrics)
      if (std::find(metric_names.begin(), metric_names.end(), k) == metric_names.end()) metric_names.push_back(k);
  }
  std::ostringstream os;
  os << "step,train_loss,test_accuracy,epsilon,batch_size";
  for (std::size_t l = 0; l < nsnr; ++l) os << ",snr_" << l;
  for (const auto& k : metric_names) os << "," << k;
  os << "\n";
  for (const auto& s : record.steps) {
    os << s.step << "," << csv_number(s.train_loss) << "," << csv_number(s.test_accuracy) << "," << csv_number(s.epsilon)
       << "," << s.batch_size;
    for (std::size_t l = 0; l < nsnr; ++l)
      os << "," << (l < s.snr.size() ? csv_number(s.snr[l]) : std::string("nan"));
    for (const auto& k : metric_names) {
      double v = std::numeric_limits<double>::quiet_NaN();
      for (const auto& [name, val] : s.metrics)
        if (name == k) v = val;
      os << "," << csv_number(v);
    }
    os << "\n";
  }
  return os.str();
}

data::Dataset mismatched_proxy(const data::Dataset& like, std::uint64_t seed) {
  data::BlobsSpec s;
  s.n = 1000;
  s.dim = like.shape.size();
  s.classes = like.num_classes;
  s.shape = like.shape;
  s.seed = seed + 7919;
  s.noise = 1.5;
  s.scale = 6.0;
  s.standardize = false;
  return data::gen_blobs(s);
}

int run(const Request& request, std::ostream& out, std::ostream& err) {
  Json resolved;
  try {
    Json user = Json::object();
    if (!request.config_path.empty()) {
      std::ifstream in(request.config_path);
      if (!in) {
        error_record(err, "config", "cannot open config file " + request.config_path);
        return kConfig;
      }
      user = Json::parse(in, nullptr, false);
      if (user.is_discarded()) {
        error_record(err, "config", "config file is not valid JSON: " + request.config_path);
        return kConfig;
      }
    }
    auto overrides = request.overrides;
    if (!request.task.empty()) overrides.insert(overrides.begin(), "task=" + request.task);
    resolved = config::resolve(user, overrides);
  } catch (const config::ConfigError& e) {
    error_record(err, "config", e.what(), e.problems());
    return kConfig;
  }

  try {
    Outputs outs;
    const std::string task = resolved.at("task").get<std::string>();
    int code = kOk;
    if (task == "train") code = task_train(resolved, out, outs);
    else if (task == "accountant") code = task_accountant(resolved, out, outs);
    else if (task == "gen-noise") code = task_gen_noise(resolved, out, outs);
    else if (task == "probe-spectrum") code = task_probe_spectrum(resolved, out, outs);
    else code = task_diagnose(resolved, out, outs);
    commit(output_dir(resolved), resolved, outs);
    return code;
  } catch (const data::ParseError& e) {
    error_record(err, "data", e.what());
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    error_record(err, "io", e.what());
    return kData;
  } catch (const NumericError& e) {
    error_record(err, "numeric", e.what());
    return kNumeric;
  } catch (const std::range_error& e) {
    error_record(err, "numeric", e.what());
    return kNumeric;
  } catch (const ContractError& e) {
    error_record(err, "contract", e.what());
    return kContract;
  } catch (const std::exception& e) {
    error_record(err, "internal", e.what());
    return kInternal;
  }
}

}  // namespace dpkfc::app
