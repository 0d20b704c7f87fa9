#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "tkgx/common.hpp"

// Temporal knowledge graph data plumbing: quadruple files, dense timestamp
// indexing, inverse-edge augmentation, per-timestamp snapshots, sliding
// history windows, and a periodic synthetic generator for desk-scale tests.

namespace tkgx {

struct Quadruple {
  int64_t subject = 0;
  int64_t relation = 0;
  int64_t object = 0;
  int64_t time_index = 0;  // dense rank after normalize_timestamps
  bool operator==(const Quadruple&) const = default;
};

struct Triple {
  int64_t subject = 0;
  int64_t relation = 0;
  int64_t object = 0;
  bool operator==(const Triple&) const = default;
  auto operator<=>(const Triple&) const = default;
};

struct SnapshotGraph {
  int64_t time_index = 0;
  std::vector<Triple> edges;  // multigraph; duplicates only if present in source
};

struct TkgDataset {
  int64_t num_entities = 0;
  int64_t num_raw_relations = 0;  // relation ids in snapshots run to 2x this
  int64_t num_timestamps = 0;
  std::vector<SnapshotGraph> snapshots;  // exactly num_timestamps, chronological
  int64_t train_end = 0;  // first valid timestamp index
  int64_t valid_end = 0;  // first test timestamp index
};

enum class Split { train, valid, test };

struct HistoryWindow {
  int64_t query_time = 0;
  std::vector<const SnapshotGraph*> history;  // oldest first, all < query_time
  std::vector<Triple> queries;                // every edge of the query snapshot
};

namespace detail {

inline int64_t parse_nonneg_int(std::string_view field, const std::string& where) {
  int64_t out = 0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || field.empty() || out < 0)
    throw ParseError(where + ": expected non-negative integer, got '" + std::string(field) + "'");
  return out;
}

}  // namespace detail

// Lines are "s<TAB>r<TAB>o<TAB>t" with an optional ignored trailing column.
// Raw timestamps are kept as-is; run normalize_timestamps before use.
inline std::vector<Quadruple> parse_quadruple_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Quadruple> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::array<std::string_view, 4> fields;
    std::string_view rest = line;
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    for (int i = 0; i < 4; ++i) {
      size_t tab = rest.find('\t');
      if (i < 3 && tab == std::string_view::npos)
        throw ParseError(where + ": expected at least 4 tab-separated columns");
      fields[i] = rest.substr(0, tab);
      rest = tab == std::string_view::npos ? std::string_view{} : rest.substr(tab + 1);
    }
    out.push_back({detail::parse_nonneg_int(fields[0], where),
                   detail::parse_nonneg_int(fields[1], where),
                   detail::parse_nonneg_int(fields[2], where),
                   detail::parse_nonneg_int(fields[3], where)});
  }
  return out;
}

// Replaces raw timestamps by their dense rank among all distinct values.
// Returns the timestamp count T.
inline int64_t normalize_timestamps(std::vector<Quadruple>& quads) {
  require(!quads.empty(), "normalize_timestamps: need at least one quadruple");
  std::vector<int64_t> times;
  times.reserve(quads.size());
  for (const auto& q : quads) times.push_back(q.time_index);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  std::map<int64_t, int64_t> rank;
  for (size_t i = 0; i < times.size(); ++i) rank[times[i]] = static_cast<int64_t>(i);
  for (auto& q : quads) q.time_index = rank.at(q.time_index);
  return static_cast<int64_t>(times.size());
}

// Appends (o, r + num_raw_relations, s, t) for every (s, r, o, t); the first
// half of the output is the input, order preserved.
inline std::vector<Quadruple> augment_inverse(const std::vector<Quadruple>& quads, int64_t num_raw_relations) {
  std::vector<Quadruple> out;
  out.reserve(quads.size() * 2);
  for (const auto& q : quads) {
    require(q.relation < num_raw_relations,
            "augment_inverse: relation " + std::to_string(q.relation) + " >= raw count " +
                std::to_string(num_raw_relations));
    out.push_back(q);
  }
  for (const auto& q : quads)
    out.push_back({q.object, q.relation + num_raw_relations, q.subject, q.time_index});
  return out;
}

// Buckets quadruples into exactly T chronological snapshots.
inline std::vector<SnapshotGraph> build_snapshots(const std::vector<Quadruple>& quads, int64_t T) {
  std::vector<SnapshotGraph> snaps(static_cast<size_t>(T));
  for (int64_t t = 0; t < T; ++t) snaps[t].time_index = t;
  for (const auto& q : quads) {
    require(q.time_index >= 0 && q.time_index < T,
            "build_snapshots: time_index " + std::to_string(q.time_index) + " outside [0, " + std::to_string(T) + ")");
    snaps[q.time_index].edges.push_back({q.subject, q.relation, q.object});
  }
  return snaps;
}

// Assembles a dataset from per-split raw quadruples: timestamps are densified
// over the union (so split boundaries are expressible as indices), entity and
// relation counts are taken from the data, and every snapshot carries the
// inverse-augmented edge set.
inline TkgDataset build_dataset(std::vector<Quadruple> train, std::vector<Quadruple> valid,
                                std::vector<Quadruple> test) {
  require(!train.empty(), "build_dataset: train split is empty");
  const size_t ntr = train.size(), nva = valid.size();
  std::vector<Quadruple> all = std::move(train);
  all.insert(all.end(), valid.begin(), valid.end());
  all.insert(all.end(), test.begin(), test.end());

  TkgDataset ds;
  for (const auto& q : all) {
    ds.num_entities = std::max({ds.num_entities, q.subject + 1, q.object + 1});
    ds.num_raw_relations = std::max(ds.num_raw_relations, q.relation + 1);
  }
  ds.num_timestamps = normalize_timestamps(all);

  auto time_span = [&](size_t begin, size_t end) {
    int64_t lo = ds.num_timestamps, hi = -1;
    for (size_t i = begin; i < end; ++i) {
      lo = std::min(lo, all[i].time_index);
      hi = std::max(hi, all[i].time_index);
    }
    return std::pair{lo, hi};
  };
  auto [tr_lo, tr_hi] = time_span(0, ntr);
  auto [va_lo, va_hi] = time_span(ntr, ntr + nva);
  auto [te_lo, te_hi] = time_span(ntr + nva, all.size());
  if (nva > 0)
    require(tr_hi < va_lo, "build_dataset: train and valid timestamps overlap or are out of order");
  if (all.size() > ntr + nva)
    require(std::max(tr_hi, va_hi) < te_lo, "build_dataset: test timestamps overlap an earlier split");
  ds.train_end = nva > 0 ? va_lo : tr_hi + 1;
  ds.valid_end = all.size() > ntr + nva ? te_lo : std::max(ds.train_end, va_hi + 1);

  ds.snapshots = build_snapshots(augment_inverse(all, ds.num_raw_relations), ds.num_timestamps);
  return ds;
}

// Standard dataset directory: train.txt / valid.txt / test.txt.
inline TkgDataset load_dataset_dir(const std::filesystem::path& dir) {
  return build_dataset(parse_quadruple_file(dir / "train.txt"), parse_quadruple_file(dir / "valid.txt"),
                       parse_quadruple_file(dir / "test.txt"));
}

inline std::pair<int64_t, int64_t> split_time_range(const TkgDataset& ds, Split split) {
  switch (split) {
    case Split::train: return {0, ds.train_end};
    case Split::valid: return {ds.train_end, ds.valid_end};
    case Split::test: return {ds.valid_end, ds.num_timestamps};
  }
  throw ContractError("split_time_range: bad split");
}

// One window per split timestamp with a non-empty history (t = 0 has no
// evidence and is skipped). Valid/test histories draw on ground-truth
// snapshots from all earlier timestamps, crossing split boundaries.
inline std::vector<HistoryWindow> history_windows(const TkgDataset& ds, int64_t m, Split split) {
  require(m >= 1, "history_windows: window length must be >= 1");
  auto [t0, t1] = split_time_range(ds, split);
  std::vector<HistoryWindow> out;
  for (int64_t t = std::max<int64_t>(t0, 1); t < t1; ++t) {
    HistoryWindow w;
    w.query_time = t;
    for (int64_t h = std::max<int64_t>(0, t - m); h < t; ++h) w.history.push_back(&ds.snapshots[h]);
    w.queries = ds.snapshots[t].edges;
    out.push_back(std::move(w));
  }
  return out;
}

struct SyntheticSplits {
  std::vector<Quadruple> train, valid, test;
};

// Periodic synthetic TKG: `period` fixed fact sets, snapshot t carrying set
// t mod period, so a window of length >= period predicts the future exactly.
// Each fact set holds num_entities distinct random triples. Split 80/10/10
// by timestamp.
inline SyntheticSplits gen_synthetic_splits(int64_t num_entities, int64_t num_relations, int64_t period,
                                            int64_t T, uint64_t seed) {
  require(num_entities >= 1 && num_relations >= 1, "gen_synthetic_splits: need entities and relations");
  require(period >= 1, "gen_synthetic_splits: period must be >= 1");
  require(T >= 3 * period, "gen_synthetic_splits: need T >= 3*period");
  std::mt19937_64 rng(seed);
  const int64_t facts_per_phase = num_entities;
  std::vector<std::vector<Triple>> phase(static_cast<size_t>(period));
  for (auto& facts : phase) {
    std::set<Triple> seen;
    while (static_cast<int64_t>(facts.size()) < facts_per_phase) {
      Triple tr{static_cast<int64_t>(rng_below(rng, static_cast<uint64_t>(num_entities))),
                static_cast<int64_t>(rng_below(rng, static_cast<uint64_t>(num_relations))),
                static_cast<int64_t>(rng_below(rng, static_cast<uint64_t>(num_entities)))};
      if (seen.insert(tr).second) facts.push_back(tr);
    }
  }
  const int64_t train_T = (T * 8) / 10;
  const int64_t valid_T = (T * 9) / 10;
  SyntheticSplits out;
  for (int64_t t = 0; t < T; ++t) {
    auto& dst = t < train_T ? out.train : (t < valid_T ? out.valid : out.test);
    for (const auto& f : phase[static_cast<size_t>(t % period)])
      dst.push_back({f.subject, f.relation, f.object, t});
  }
  return out;
}

inline TkgDataset gen_synthetic_tkg(int64_t num_entities, int64_t num_relations, int64_t period, int64_t T,
                                    uint64_t seed) {
  auto s = gen_synthetic_splits(num_entities, num_relations, period, T, seed);
  return build_dataset(std::move(s.train), std::move(s.valid), std::move(s.test));
}

// Writes train.txt/valid.txt/test.txt in the integer TSV convention.
inline void write_dataset_dir(const std::filesystem::path& dir, const SyntheticSplits& splits) {
  std::filesystem::create_directories(dir);
  auto write_one = [&](const char* name, const std::vector<Quadruple>& quads) {
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    for (const auto& q : quads)
      out << q.subject << '\t' << q.relation << '\t' << q.object << '\t' << q.time_index << '\n';
  };
  write_one("train.txt", splits.train);
  write_one("valid.txt", splits.valid);
  write_one("test.txt", splits.test);
}

}  // namespace tkgx
