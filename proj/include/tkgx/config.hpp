#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tkgx/common.hpp"

// Run configuration: built-in defaults, named per-dataset presets, flat
// key=value config files, and a canonical text form used by checkpoints and
// run manifests. Precedence (flag > file > preset > built-in) is enforced by
// the CLI layer; this header only applies layers in the order it is told to.

namespace tkgx {

struct TrainConfig {
  int64_t d = 128;
  int64_t m = 10;          // history window length
  int64_t omega = 3;       // message-passing layers per timestamp
  int64_t num_heads = 4;   // attention heads in the disentangler
  int64_t k = 50;          // virtual-graph sampling count per query
  double learning_rate = 1e-3;
  int64_t max_epochs = 60;
  uint64_t seed = 0;
  int64_t patience = 0;    // 0 disables validation-MRR early stopping
  bool multi_span = true;
  bool disentangle = true;
  bool virtual_graph = true;
  bool static_filter = false;  // non-time-aware filtering, comparison only
  std::string data_dir;
  std::string checkpoint_path;
};

inline void validate(const TrainConfig& c) {
  require(c.d >= 1, "config: d must be >= 1");
  require(c.m >= 1, "config: m must be >= 1");
  require(c.omega >= 1, "config: omega must be >= 1");
  require(c.num_heads >= 1, "config: heads must be >= 1");
  require(c.d % c.num_heads == 0, "config: d must be divisible by heads");
  require(c.k >= 1, "config: k must be >= 1");
  require(c.learning_rate > 0, "config: lr must be positive");
  require(c.max_epochs >= 0, "config: epochs must be >= 0");
  require(c.patience >= 0, "config: patience must be >= 0");
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"icews14", "icews05-15", "icews18", "gdelt", "synth"};
  return names;
}

// Per-dataset hyperparameters; the unnamed defaults above are the common
// values (d=128, lr=1e-3, k=50, 60 epochs).
inline void apply_preset(TrainConfig& c, const std::string& name) {
  if (name == "icews14") {
    c.m = 10;
    c.omega = 3;
    c.num_heads = 4;
  } else if (name == "icews05-15") {
    c.m = 2;
    c.omega = 1;
    c.num_heads = 1;
  } else if (name == "icews18") {
    c.m = 10;
    c.omega = 3;
    c.num_heads = 4;
  } else if (name == "gdelt") {
    c.m = 5;
    c.omega = 3;
    c.num_heads = 1;
  } else if (name == "synth") {
    c.d = 32;
    c.m = 4;
    c.omega = 2;
    c.num_heads = 1;
    c.k = 10;
  } else {
    throw ParseError("unknown preset '" + name + "'");
  }
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline int64_t to_int(std::string_view v, const std::string& key) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ParseError("config key '" + key + "': expected integer, got '" + std::string(v) + "'");
  return out;
}

inline double to_double(std::string_view v, const std::string& key) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ParseError("config key '" + key + "': expected number, got '" + std::string(v) + "'");
  return out;
}

inline bool to_bool(std::string_view v, const std::string& key) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ParseError("config key '" + key + "': expected boolean, got '" + std::string(v) + "'");
}

inline std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace detail

inline void set_config_key(TrainConfig& c, const std::string& key, std::string_view value) {
  using detail::to_bool;
  using detail::to_double;
  using detail::to_int;
  if (key == "d") c.d = to_int(value, key);
  else if (key == "m") c.m = to_int(value, key);
  else if (key == "omega") c.omega = to_int(value, key);
  else if (key == "heads") c.num_heads = to_int(value, key);
  else if (key == "k") c.k = to_int(value, key);
  else if (key == "lr") c.learning_rate = to_double(value, key);
  else if (key == "epochs") c.max_epochs = to_int(value, key);
  else if (key == "seed") c.seed = static_cast<uint64_t>(to_int(value, key));
  else if (key == "patience") c.patience = to_int(value, key);
  else if (key == "multi_span") c.multi_span = to_bool(value, key);
  else if (key == "disentangle") c.disentangle = to_bool(value, key);
  else if (key == "virtual_graph") c.virtual_graph = to_bool(value, key);
  else if (key == "static_filter") c.static_filter = to_bool(value, key);
  else if (key == "data") c.data_dir = std::string(value);
  else if (key == "checkpoint") c.checkpoint_path = std::string(value);
  else throw ParseError("unknown config key '" + key + "'");
}

// One "key = value" per line, # starts a comment, blank lines ignored.
inline void apply_config_text(TrainConfig& c, std::istream& in, const std::string& source) {
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view sv = line;
    if (size_t hash = sv.find('#'); hash != std::string_view::npos) sv = sv.substr(0, hash);
    sv = detail::trim(sv);
    if (sv.empty()) continue;
    size_t eq = sv.find('=');
    if (eq == std::string_view::npos)
      throw ParseError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    std::string key(detail::trim(sv.substr(0, eq)));
    std::string_view value = detail::trim(sv.substr(eq + 1));
    try {
      set_config_key(c, key, value);
    } catch (const ParseError& e) {
      throw ParseError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(TrainConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  apply_config_text(c, in, path);
}

// Canonical text form: fixed key order, one per line. Used verbatim inside
// checkpoints and echoed into run manifests.
inline std::string config_text(const TrainConfig& c) {
  std::string out;
  auto kv = [&](const char* k, const std::string& v) { out += std::string(k) + " = " + v + "\n"; };
  kv("d", std::to_string(c.d));
  kv("m", std::to_string(c.m));
  kv("omega", std::to_string(c.omega));
  kv("heads", std::to_string(c.num_heads));
  kv("k", std::to_string(c.k));
  kv("lr", detail::fmt_double(c.learning_rate));
  kv("epochs", std::to_string(c.max_epochs));
  kv("seed", std::to_string(c.seed));
  kv("patience", std::to_string(c.patience));
  kv("multi_span", c.multi_span ? "true" : "false");
  kv("disentangle", c.disentangle ? "true" : "false");
  kv("virtual_graph", c.virtual_graph ? "true" : "false");
  kv("static_filter", c.static_filter ? "true" : "false");
  kv("data", c.data_dir);
  kv("checkpoint", c.checkpoint_path);
  return out;
}

}  // namespace tkgx
