#pragma once

// Command-line front end: run, sweep, verify.
//
// Exit codes: 0 success, 1 usage, 2 validation (bad config contents or a
// failed verification check), 3 numeric abort.
//
// Output location: --out DIR if given. A relative DIR, or the default
// runs/<config stem>, is placed under $FCCL_OUTPUT_ROOT when that is set.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fccl/config.hpp"
#include "fccl/federation.hpp"
#include "fccl/metrics.hpp"
#include "fccl/verify.hpp"

namespace fccl {

inline constexpr const char* kArtifactVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "FCCL_OUTPUT_ROOT";

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitValidation = 2, kExitNumeric = 3 };

/// Usage problems (bad flags, missing files, unknown sweep axis).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

inline fs::path resolve_output_dir(const std::optional<std::string>& out, const std::string& config_path) {
  fs::path dir = out ? fs::path(*out) : fs::path("runs") / fs::path(config_path).stem();
  if (dir.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') dir = fs::path(root) / dir;
  }
  return dir;
}

/// Writes via a temporary sibling and renames, so readers never see a partial file.
inline void write_atomically(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os << content;
    if (!os.flush()) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

struct RunManifest {
  std::string config_path;
  std::string config_hash;
  std::map<std::string, std::string> overrides;
  std::uint64_t seed = 0;
  std::string strategy;
  std::vector<std::string> outputs;  // relative to the run directory
  double wall_clock_seconds = 0.0;
  std::string status;  // complete | numeric_abort
  std::string diagnostic;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["artifact_version"] = kArtifactVersion;
    j["config_path"] = config_path;
    j["config_hash"] = config_hash;
    j["hash_algorithm"] = "fnv1a-64";
    j["overrides"] = overrides;
    j["seed"] = seed;
    j["strategy"] = strategy;
    j["outputs"] = outputs;
    j["status"] = status;
    if (!diagnostic.empty()) j["diagnostic"] = diagnostic;
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
  }
};

struct RunOutcome {
  int exit_code = kExitOk;
  Summary summary;
  double mean_forgetting_gap = 0.0;
};

/// Runs one experiment into `dir`. Config errors propagate; a numeric abort
/// is recorded in the manifest and reported through the exit code.
inline RunOutcome execute_run(const std::string& config_path, const std::string& config_bytes, const ConfigText& text,
                              const std::map<std::string, std::string>& overrides, const fs::path& dir,
                              std::ostream& err) {
  const FederationConfig cfg = build_config(text);
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(dir);

  RunManifest manifest;
  manifest.config_path = config_path;
  manifest.config_hash = content_hash(config_bytes);
  manifest.overrides = overrides;
  manifest.seed = cfg.seed;
  manifest.strategy = to_string(cfg.strategy);

  RunOutcome outcome;
  try {
    const ExperimentResult res = run_experiment(cfg);
    std::ostringstream csv;
    write_metrics_csv(res.log, csv, res.clients.size());
    write_atomically(dir / "metrics.csv", csv.str());
    manifest.outputs.push_back("metrics.csv");
    if (cfg.dump_correlation) {
      fs::create_directories(dir / "corr");
      for (const auto& d : res.correlations) {
        const std::string name =
            "corr/epoch_" + std::to_string(d.epoch) + "_client_" + std::to_string(d.client) + ".txt";
        std::ostringstream os;
        dump_correlation_matrix(d.corr, os);
        write_atomically(dir / name, os.str());
        manifest.outputs.push_back(name);
      }
    }
    manifest.status = "complete";
    outcome.summary = summarize(res.log);
    const auto gaps = forgetting_gaps(res.log);
    outcome.mean_forgetting_gap = mean(gaps);
  } catch (const NumericError& e) {
    manifest.status = "numeric_abort";
    manifest.diagnostic = std::string(e.what()) + "; " + e.diagnostic();
    err << "numeric abort: " << manifest.diagnostic << '\n';
    outcome.exit_code = kExitNumeric;
  }
  manifest.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  manifest.outputs.push_back("manifest.json");
  write_atomically(dir / "manifest.json", manifest.to_json().dump(2) + "\n");
  return outcome;
}

inline std::string read_config_or_usage(const std::string& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw UsageError("config file not found: '" + path + "'");
  return read_file(path);
}

inline int cmd_run(const std::string& config_path, const std::optional<std::string>& out,
                   const std::optional<std::uint64_t>& seed, std::ostream& os, std::ostream& err) {
  const std::string bytes = read_config_or_usage(config_path);
  ConfigText text = ConfigText::parse(bytes);
  std::map<std::string, std::string> overrides;
  if (seed) {
    text.set("experiment.seed", std::to_string(*seed));
    overrides["experiment.seed"] = std::to_string(*seed);
  }
  const fs::path dir = resolve_output_dir(out, config_path);
  const RunOutcome r = execute_run(config_path, bytes, text, overrides, dir, err);
  if (r.exit_code == kExitOk) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "intra_avg_last3=%.4f inter_avg_last3=%.4f\n", r.summary.intra_avg,
                  r.summary.inter_avg);
    os << "wrote " << dir.string() << '\n' << buf;
  }
  return r.exit_code;
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw UsageError("empty value in --values '" + s + "'");
    out.push_back(item.substr(b, e - b + 1));
  }
  if (out.empty()) throw UsageError("--values is empty");
  return out;
}

// summary.csv: axis, value, status, intra_avg_last3, inter_avg_last3,
// forgetting_gap_mean, run_dir. One row per value, in the order given.
inline int cmd_sweep(const std::string& config_path, const std::string& axis, const std::string& values_csv,
                     const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed, std::ostream& os,
                     std::ostream& err) {
  const std::string bytes = read_config_or_usage(config_path);
  std::string key;
  try {
    key = ConfigText::resolve_key(axis);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("unknown sweep axis: ") + e.what());
  }
  if (key == "format") throw UsageError("unknown sweep axis: 'format' is not an experiment setting");
  const auto values = split_csv(values_csv);
  const ConfigText base = ConfigText::parse(bytes);
  const fs::path root = resolve_output_dir(out, config_path);

  // Validate every grid point before spending time on any run.
  std::vector<ConfigText> texts;
  for (const auto& v : values) {
    ConfigText t = base;
    t.set(key, v);
    if (seed) t.set("experiment.seed", std::to_string(*seed));
    build_config(t);
    texts.push_back(std::move(t));
  }

  std::ostringstream summary;
  summary << "axis,value,status,intra_avg_last3,inter_avg_last3,forgetting_gap_mean,run_dir\n";
  int worst = kExitOk;
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::map<std::string, std::string> overrides{{key, values[i]}};
    if (seed) overrides["experiment.seed"] = std::to_string(*seed);
    const std::string sub = key + "=" + values[i];
    const RunOutcome r = execute_run(config_path, bytes, texts[i], overrides, root / sub, err);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.4f,%.4f,%.4f", r.summary.intra_avg, r.summary.inter_avg, r.mean_forgetting_gap);
    summary << key << ',' << values[i] << ',' << (r.exit_code == kExitOk ? "complete" : "numeric_abort") << ','
            << buf << ',' << sub << '\n';
    os << sub << ": " << (r.exit_code == kExitOk ? "complete" : "numeric_abort") << '\n';
    worst = std::max(worst, r.exit_code);
  }
  write_atomically(root / "summary.csv", summary.str());
  os << "wrote " << (root / "summary.csv").string() << '\n';
  return worst;
}

inline int cmd_verify(std::ostream& os, const Kernels& kernels = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_verification(kernels);
  print_results(results, os);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t failed = 0;
  for (const auto& r : results) failed += r.passed ? 0 : 1;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu checks, %zu failed, %.2fs\n", results.size(), failed, secs);
  os << buf;
  return failed == 0 ? kExitOk : kExitValidation;
}

/// Parses argv and dispatches. Never throws; every failure maps to an exit code.
inline int cli_main(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Heterogeneous federated learning simulator", "fccl"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kArtifactVersion);

  std::string config_path, axis, values;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "Run one experiment from a config file");
  run->add_option("config", config_path, "Config file")->required();
  run->add_option("--out", out, "Output directory");
  run->add_option("--seed", seed, "Override experiment.seed");

  auto* sweep = app.add_subcommand("sweep", "Run one experiment per value of a config key");
  sweep->add_option("config", config_path, "Config file")->required();
  sweep->add_option("--axis", axis, "Config key to vary, e.g. omega or loss.tau")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--out", out, "Output directory");
  sweep->add_option("--seed", seed, "Override experiment.seed for every run");

  auto* verify = app.add_subcommand("verify", "Run the built-in invariant battery");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    os << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    os << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    os << kArtifactVersion << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n' << "run 'fccl --help' for usage\n";
    return kExitUsage;
  }

  try {
    if (run->parsed()) return cmd_run(config_path, out, seed, os, err);
    if (sweep->parsed()) return cmd_sweep(config_path, axis, values, out, seed, os, err);
    if (verify->parsed()) return cmd_verify(os);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ParameterError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "; " << e.diagnostic() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitUsage;
}

}  // namespace fccl
