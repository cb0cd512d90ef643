// Command-line front end. Talks to the library only through cpn/cpn.h.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpn/cpn.h"

namespace {

struct CliError {
  cpn_status status;
  std::string message;
};

void check(cpn_status st) {
  if (st != CPN_OK) throw CliError{st, cpn_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  cpn_string_free(s);
  return out;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out;
}

std::string json_string_array(const std::vector<std::string>& items) {
  std::string out = "[";
  for (std::size_t i = 0; i < items.size(); ++i)
    out += (i ? ",\"" : "\"") + escape(items[i]) + "\"";
  return out + "]";
}

std::string json_number_array(const std::vector<double>& items) {
  std::string out = "[";
  char buf[64];
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", items[i]);
    out += (i ? "," : "") + std::string(buf);
  }
  return out + "]";
}

struct Options {
  std::string config_path;
  std::optional<unsigned long long> seed;
  std::optional<unsigned> threads;
  std::optional<std::string> out_dir;
  std::vector<std::string> overrides;
  std::vector<std::string> ensemble_inputs;
  std::vector<double> ensemble_weights;
};

struct ConfigHandle {
  cpn_config* ptr = nullptr;
  ~ConfigHandle() { cpn_config_free(ptr); }
};

void build_config(const Options& o, ConfigHandle& cfg) {
  if (o.config_path.empty())
    check(cpn_config_create(nullptr, &cfg.ptr));
  else
    check(cpn_config_load(o.config_path.c_str(), &cfg.ptr));
  // Everything is applied as one batch so related keys may change together.
  std::vector<std::string> keys, values;
  auto put = [&](std::string k, std::string v) {
    keys.push_back(std::move(k));
    values.push_back(std::move(v));
  };
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw CliError{CPN_ERR_INVALID_ARGUMENT, "--set expects key=value, got '" + kv + "'"};
    put(kv.substr(0, eq), kv.substr(eq + 1));
  }
  // Dedicated flags come last so they win over both file and --set.
  if (o.seed) put("seed", std::to_string(*o.seed));
  if (o.threads) put("threads", std::to_string(*o.threads));
  if (o.out_dir) put("paths.output_dir", "\"" + escape(*o.out_dir) + "\"");
  if (!o.ensemble_inputs.empty()) put("ensemble.inputs", json_string_array(o.ensemble_inputs));
  if (!o.ensemble_weights.empty()) put("ensemble.weights", json_number_array(o.ensemble_weights));

  std::vector<const char*> kp, vp;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    kp.push_back(keys[i].c_str());
    vp.push_back(values[i].c_str());
  }
  check(cpn_config_set_many(cfg.ptr, kp.data(), vp.data(), kp.size()));
}

void add_global_flags(CLI::App& app, Options& o) {
  app.add_option("--config", o.config_path, "JSON run-config file")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Random seed (u64)");
  app.add_option("--threads", o.threads, "Worker threads; 1 gives bitwise reproducibility")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", o.out_dir, "Output directory (paths.output_dir)");
  app.add_option("--set", o.overrides, "Override a config key, e.g. --set mask.p=0.2")
      ->take_all();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware proposal network pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cpn_version());
  Options opt;
  add_global_flags(app, opt);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  auto* prep = app.add_subcommand("preprocess", "Filter annotations and build the epoch list");
  auto* train = app.add_subcommand("train", "Train a model");
  auto* infer = app.add_subcommand("infer", "Run inference and post-processing");
  auto* evp = app.add_subcommand("eval-proposals", "AR@AN and AUC report");
  auto* evd = app.add_subcommand("eval-detections", "Average mAP report");
  auto* ens = app.add_subcommand("ensemble", "Fuse outputs of several inference runs");
  app.add_subcommand("config", "Print the resolved run-config");
  ens->add_option("--inputs", opt.ensemble_inputs, "Inference output directories")->take_all();
  ens->add_option("--weights", opt.ensemble_weights, "One weight per input")->take_all();
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    ConfigHandle cfg;
    build_config(opt, cfg);
    char* a = nullptr;
    char* b = nullptr;
    if (synth->parsed()) {
      check(cpn_run_synth(cfg.ptr, &a));
      std::cout << take(a) << "\n";
    } else if (prep->parsed()) {
      check(cpn_run_preprocess(cfg.ptr, &a));
      std::cout << take(a) << "\n";
    } else if (train->parsed()) {
      check(cpn_run_train(cfg.ptr, nullptr));
      std::cout << "{\"status\":\"ok\"}\n";
    } else if (infer->parsed()) {
      check(cpn_run_infer(cfg.ptr, &a));
      std::cout << take(a) << "\n";
    } else if (evp->parsed()) {
      check(cpn_run_eval_proposals(cfg.ptr, nullptr, &b));
      std::cout << take(b);
    } else if (evd->parsed()) {
      check(cpn_run_eval_detections(cfg.ptr, nullptr, &b));
      std::cout << take(b);
    } else if (ens->parsed()) {
      check(cpn_run_ensemble(cfg.ptr, &a));
      std::cout << take(a) << "\n";
    } else {
      check(cpn_config_to_json(cfg.ptr, &a));
      std::cout << take(a) << "\n";
    }
  } catch (const CliError& e) {
    std::cerr << "error: code=" << cpn_status_name(e.status) << " message=\"" << escape(e.message)
              << "\"\n";
    return static_cast<int>(e.status);
  }
  return 0;
}
