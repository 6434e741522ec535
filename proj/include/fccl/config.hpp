#pragma once

// Experiment configuration file, format "fccl-config/1".
//
// Line-oriented `key = value` pairs grouped under `[section]` headers; `#`
// starts a comment. Keys are addressed as `section.key`. Unknown keys are an
// error so typos never silently fall back to defaults.
//
//   format = fccl-config/1
//   [experiment]  strategy seed epochs local_rounds collab_passes pretrain_epochs
//                 parallel_clients dump_correlation
//   [optimizer]   lr collab_batch local_batch
//   [loss]        lambda mu omega tau fntd_variant fisl kd_tau_squared
//                 fccl_pretrained_term ewc_lambda
//   [data]        domains classes input_dim train_sizes test_size public_size
//                 shift_strength class_separation noise_std scale_spread
//                 bias_magnitude public_source augment
//   [models]      activation client.<i> (comma-separated hidden widths)

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fccl/federation.hpp"

namespace fccl {

inline constexpr const char* kConfigFormat = "fccl-config/1";

struct ConfigEntry {
  std::string value;
  int line = 0;
};

/// Parsed but not yet interpreted configuration: section.key → value.
class ConfigText {
 public:
  static ConfigText parse(const std::string& text) {
    ConfigText c;
    std::istringstream is(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(is, raw)) {
      ++line_no;
      std::string line = trim(strip_comment(raw));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (c.entries_.count(full)) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + full + "'");
      c.entries_[full] = {value, line_no};
    }
    return c;
  }

  const std::map<std::string, ConfigEntry>& entries() const { return entries_; }

  /// Sets `key` (full name, or a suffix matching exactly one known key).
  void set(const std::string& key, const std::string& value) { entries_[resolve_key(key)] = {value, 0}; }

  /// Full name for `key`: itself if known, else the unique known key ending in ".key".
  static std::string resolve_key(const std::string& key) {
    const auto& known = known_keys();
    for (const auto& k : known)
      if (k == key) return k;
    std::string match;
    for (const auto& k : known) {
      if (k.size() > key.size() && k.compare(k.size() - key.size(), key.size(), key) == 0 &&
          k[k.size() - key.size() - 1] == '.') {
        if (!match.empty()) throw ConfigError("ambiguous key '" + key + "'");
        match = k;
      }
    }
    if (match.empty()) {
      if (key.rfind("models.client.", 0) == 0) return key;
      throw ConfigError("unknown key '" + key + "'");
    }
    return match;
  }

  static const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "format",
        "experiment.strategy", "experiment.seed", "experiment.epochs", "experiment.local_rounds",
        "experiment.collab_passes", "experiment.pretrain_epochs", "experiment.parallel_clients",
        "experiment.dump_correlation",
        "optimizer.lr", "optimizer.collab_batch", "optimizer.local_batch",
        "loss.lambda", "loss.mu", "loss.omega", "loss.tau", "loss.fntd_variant", "loss.fisl", "loss.kd_tau_squared",
        "loss.fccl_pretrained_term", "loss.ewc_lambda",
        "data.domains", "data.classes", "data.input_dim", "data.train_sizes", "data.test_size", "data.public_size",
        "data.shift_strength", "data.class_separation", "data.noise_std", "data.scale_spread", "data.bias_magnitude",
        "data.public_source", "data.augment",
        "models.activation"};
    return keys;
  }

 private:
  static std::string strip_comment(const std::string& s) {
    const auto p = s.find('#');
    return p == std::string::npos ? s : s.substr(0, p);
  }
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, ConfigEntry> entries_;
};

namespace detail {

inline std::string at_line(const std::string& key, const ConfigEntry& e) {
  return e.line > 0 ? "line " + std::to_string(e.line) + " (" + key + ")" : key;
}

inline double parse_real(const std::string& key, const ConfigEntry& e) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(at_line(key, e) + ": expected a number, got '" + e.value + "'");
  }
}

inline std::uint64_t parse_count(const std::string& key, const ConfigEntry& e) {
  try {
    if (!e.value.empty() && e.value.front() == '-') throw std::invalid_argument("negative");
    std::size_t pos = 0;
    const auto v = std::stoull(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(at_line(key, e) + ": expected a non-negative integer, got '" + e.value + "'");
  }
}

inline bool parse_bool(const std::string& key, const ConfigEntry& e) {
  if (e.value == "true" || e.value == "1" || e.value == "yes") return true;
  if (e.value == "false" || e.value == "0" || e.value == "no") return false;
  throw ConfigError(at_line(key, e) + ": expected true/false, got '" + e.value + "'");
}

inline std::vector<std::size_t> parse_count_list(const std::string& key, const ConfigEntry& e) {
  std::vector<std::size_t> out;
  std::stringstream ss(e.value);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(' ');
    const auto en = tok.find_last_not_of(' ');
    if (b == std::string::npos) throw ConfigError(at_line(key, e) + ": empty list element");
    out.push_back(parse_count(key, {tok.substr(b, en - b + 1), e.line}));
  }
  if (out.empty()) throw ConfigError(at_line(key, e) + ": empty list");
  return out;
}

}  // namespace detail

/// Interprets parsed text into a validated FederationConfig.
inline FederationConfig build_config(const ConfigText& text) {
  FederationConfig cfg;
  std::map<std::size_t, ModelSpec> client_specs;
  std::optional<Activation> activation;

  for (const auto& [key, e] : text.entries()) {
    using namespace detail;
    try {
      if (key == "format") {
        if (e.value != kConfigFormat) throw ConfigError(at_line(key, e) + ": unsupported format '" + e.value + "'");
      } else if (key == "experiment.strategy") {
        cfg.strategy = strategy_from_string(e.value);
      } else if (key == "experiment.seed") {
        cfg.seed = parse_count(key, e);
      } else if (key == "experiment.epochs") {
        cfg.epochs = parse_count(key, e);
      } else if (key == "experiment.local_rounds") {
        cfg.local_rounds = parse_count(key, e);
      } else if (key == "experiment.collab_passes") {
        cfg.collab_passes = parse_count(key, e);
      } else if (key == "experiment.pretrain_epochs") {
        cfg.pretrain_epochs = parse_count(key, e);
      } else if (key == "experiment.parallel_clients") {
        cfg.parallel_clients = parse_bool(key, e);
      } else if (key == "experiment.dump_correlation") {
        cfg.dump_correlation = parse_bool(key, e);
      } else if (key == "optimizer.lr") {
        cfg.lr = parse_real(key, e);
      } else if (key == "optimizer.collab_batch") {
        cfg.collab_batch = parse_count(key, e);
      } else if (key == "optimizer.local_batch") {
        cfg.local_batch = parse_count(key, e);
      } else if (key == "loss.lambda") {
        cfg.lambda = parse_real(key, e);
      } else if (key == "loss.mu") {
        cfg.mu = parse_real(key, e);
      } else if (key == "loss.omega") {
        cfg.omega = parse_real(key, e);
      } else if (key == "loss.tau") {
        cfg.tau = parse_real(key, e);
      } else if (key == "loss.fntd_variant") {
        if (e.value == "renormalized") cfg.fntd_variant = FntdVariant::Renormalized;
        else if (e.value == "literal") cfg.fntd_variant = FntdVariant::Literal;
        else throw ConfigError(at_line(key, e) + ": expected renormalized|literal");
      } else if (key == "loss.fisl") {
        cfg.use_fisl = parse_bool(key, e);
      } else if (key == "loss.kd_tau_squared") {
        cfg.kd_tau_squared = parse_bool(key, e);
      } else if (key == "loss.fccl_pretrained_term") {
        cfg.fccl_pretrained_term = parse_bool(key, e);
      } else if (key == "loss.ewc_lambda") {
        cfg.ewc_lambda = parse_real(key, e);
      } else if (key == "data.domains") {
        cfg.scenario.domains = parse_count(key, e);
      } else if (key == "data.classes") {
        cfg.scenario.classes = parse_count(key, e);
      } else if (key == "data.input_dim") {
        cfg.scenario.input_dim = parse_count(key, e);
      } else if (key == "data.train_sizes") {
        cfg.scenario.train_sizes = parse_count_list(key, e);
      } else if (key == "data.test_size") {
        cfg.scenario.test_size = parse_count(key, e);
      } else if (key == "data.public_size") {
        cfg.scenario.public_size = parse_count(key, e);
      } else if (key == "data.shift_strength") {
        cfg.scenario.shift_strength = parse_real(key, e);
      } else if (key == "data.class_separation") {
        cfg.scenario.class_separation = parse_real(key, e);
      } else if (key == "data.noise_std") {
        cfg.scenario.noise_std = parse_real(key, e);
      } else if (key == "data.scale_spread") {
        cfg.scenario.scale_spread = parse_real(key, e);
      } else if (key == "data.bias_magnitude") {
        cfg.scenario.bias_magnitude = parse_real(key, e);
      } else if (key == "data.public_source") {
        if (e.value == "mixture") cfg.scenario.public_source = PublicSource::Mixture;
        else if (e.value == "heldout") cfg.scenario.public_source = PublicSource::Heldout;
        else throw ConfigError(at_line(key, e) + ": expected mixture|heldout");
      } else if (key == "data.augment") {
        cfg.augment = augment_mode_from_string(e.value);
      } else if (key == "models.activation") {
        activation = activation_from_string(e.value);
      } else if (key.rfind("models.client.", 0) == 0) {
        const std::string idx = key.substr(std::string("models.client.").size());
        const std::size_t i = parse_count(key, {idx, e.line});
        client_specs[i].widths = parse_count_list(key, e);
      } else {
        throw ConfigError(at_line(key, e) + ": unknown key");
      }
    } catch (const ParameterError& err) {
      throw ConfigError(detail::at_line(key, e) + ": " + err.what());
    }
  }

  if (!client_specs.empty()) {
    cfg.models.clear();
    for (std::size_t i = 0; i < client_specs.size(); ++i) {
      auto it = client_specs.find(i);
      if (it == client_specs.end()) throw ConfigError("models: client." + std::to_string(i) + " missing");
      cfg.models.push_back(it->second);
    }
  }
  if (activation)
    for (auto& m : cfg.models) m.activation = *activation;
  cfg.scenario.seed = cfg.seed;
  validate(cfg);
  return cfg;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline FederationConfig load_config(const std::string& path) { return build_config(ConfigText::parse(read_file(path))); }

/// FNV-1a 64 of the raw bytes, as 16 hex digits.
inline std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fccl
