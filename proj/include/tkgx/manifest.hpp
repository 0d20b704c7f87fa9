#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tkgx/common.hpp"
#include "tkgx/config.hpp"
#include "tkgx/data.hpp"

// Run manifests: every CLI command records what it is about to do (command,
// resolved config, dataset fingerprint, output paths) before doing it, then
// stamps the finish time on completion.

namespace tkgx {

inline std::string iso8601_utc(std::chrono::system_clock::time_point tp) {
  std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string iso8601_utc_now() { return iso8601_utc(std::chrono::system_clock::now()); }

namespace detail {

inline std::string hex64(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline uint64_t chain_named_bytes(uint64_t h, const char* name, const std::string& bytes) {
  h = fnv1a64(name, std::strlen(name), h);
  return fnv1a64(bytes.data(), bytes.size(), h);
}

inline std::string quads_tsv(const std::vector<Quadruple>& quads) {
  std::string out;
  for (const auto& q : quads) {
    out += std::to_string(q.subject);
    out += '\t';
    out += std::to_string(q.relation);
    out += '\t';
    out += std::to_string(q.object);
    out += '\t';
    out += std::to_string(q.time_index);
    out += '\n';
  }
  return out;
}

}  // namespace detail

// Content hash over the three split files, file names mixed in so renames
// and reorderings change the fingerprint.
inline std::string fingerprint_dataset_dir(const std::filesystem::path& dir) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const char* name : {"train.txt", "valid.txt", "test.txt"}) {
    auto path = dir / name;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    h = detail::chain_named_bytes(h, name, ss.str());
  }
  return detail::hex64(h);
}

// Same hash for an in-memory split set, via the TSV serialization the writer
// uses, so a generated dataset fingerprints identically before and after
// hitting disk.
inline std::string fingerprint_splits(const SyntheticSplits& splits) {
  uint64_t h = 0xcbf29ce484222325ULL;
  h = detail::chain_named_bytes(h, "train.txt", detail::quads_tsv(splits.train));
  h = detail::chain_named_bytes(h, "valid.txt", detail::quads_tsv(splits.valid));
  h = detail::chain_named_bytes(h, "test.txt", detail::quads_tsv(splits.test));
  return detail::hex64(h);
}

struct RunManifest {
  std::string command;
  TrainConfig config;               // fully resolved (flags > file > preset > defaults)
  std::string dataset_fingerprint;  // 16 hex chars; empty when no dataset is involved
  std::string started;              // ISO-8601 UTC
  std::string finished;             // empty until the run completes
  std::vector<std::string> outputs;
};

inline nlohmann::json config_json(const TrainConfig& c) {
  return {{"d", c.d},
          {"m", c.m},
          {"omega", c.omega},
          {"heads", c.num_heads},
          {"k", c.k},
          {"lr", c.learning_rate},
          {"epochs", c.max_epochs},
          {"seed", c.seed},
          {"patience", c.patience},
          {"multi_span", c.multi_span},
          {"disentangle", c.disentangle},
          {"virtual_graph", c.virtual_graph},
          {"static_filter", c.static_filter},
          {"data", c.data_dir},
          {"checkpoint", c.checkpoint_path}};
}

inline nlohmann::json manifest_json(const RunManifest& mf) {
  return {{"command", mf.command},
          {"config", config_json(mf.config)},
          {"dataset_fingerprint", mf.dataset_fingerprint},
          {"seed", mf.config.seed},
          {"started", mf.started},
          {"finished", mf.finished},
          {"outputs", mf.outputs}};
}

inline void write_manifest(const std::filesystem::path& path, const RunManifest& mf) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_json(mf).dump(2) << '\n';
  if (!out) throw IoError("manifest write failed: " + path.string());
}

}  // namespace tkgx
