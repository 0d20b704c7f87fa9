#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tkgx/data.hpp"
#include "tkgx/decoder.hpp"
#include "tkgx/disentangle.hpp"
#include "tkgx/params.hpp"

// Time-aware filtered ranking. A query's candidate o' is removed from
// consideration when (s, r, o') is itself a true fact at the query timestamp
// (except the gold object). Ranks use the average-tie policy so a constant
// scorer lands at the analytic all-ties baseline instead of rank 1.

namespace tkgx {

struct RankRecord {
  Triple query;               // (s, r, gold o)
  int64_t time = 0;
  double raw_rank = 1;
  double filtered_rank = 1;
};

struct MetricsReport {
  double mrr = 0;
  std::map<int64_t, double> hits;  // levels 1, 3, 10
  int64_t num_queries = 0;
  struct PerTimestamp {
    int64_t time = 0;
    double mrr = 0;
    std::map<int64_t, double> hits;
    int64_t num_queries = 0;
  };
  std::vector<PerTimestamp> per_timestamp;
};

// mask[o] = true removes candidate o from ranking consideration.
inline std::vector<char> time_aware_filter(int64_t num_candidates, const Triple& query,
                                           const std::set<Triple>& facts_at_t) {
  require(facts_at_t.count(query) > 0, "time_aware_filter: gold fact missing from the truth set");
  std::vector<char> mask(static_cast<size_t>(num_candidates), 0);
  auto lo = facts_at_t.lower_bound({query.subject, query.relation, 0});
  for (auto it = lo; it != facts_at_t.end() && it->subject == query.subject && it->relation == query.relation;
       ++it)
    if (it->object != query.object) mask[it->object] = 1;
  return mask;
}

// Average-tie rank of the gold candidate among unmasked scores, computed by
// sorting and locating gold's tie block.
inline double rank_of_gold(const std::vector<double>& scores, const std::vector<char>& mask, int64_t gold) {
  require(gold >= 0 && gold < static_cast<int64_t>(scores.size()), "rank_of_gold: gold out of range");
  require(!mask[gold], "rank_of_gold: gold is masked");
  std::vector<int64_t> survivors;
  survivors.reserve(scores.size());
  for (int64_t o = 0; o < static_cast<int64_t>(scores.size()); ++o)
    if (!mask[o]) survivors.push_back(o);
  std::sort(survivors.begin(), survivors.end(),
            [&](int64_t a, int64_t b) { return scores[a] > scores[b]; });
  size_t first = 0;  // gold's tie block is contiguous after the sort
  while (first < survivors.size() && scores[survivors[first]] > scores[gold]) ++first;
  size_t last = first;
  while (last < survivors.size() && scores[survivors[last]] == scores[gold]) ++last;
  // 1-based positions first+1 .. last averaged
  return (static_cast<double>(first) + static_cast<double>(last) + 1.0) / 2.0;
}

// Independent verification oracle: exhaustive pairwise comparison, with the
// time-aware filter recomputed from scratch. Deliberately shares no helper
// with rank_of_gold.
inline double oracle_rank(const std::vector<double>& scores, const Triple& query,
                          const std::set<Triple>& facts_at_t) {
  double greater = 0, equal = 0;
  for (int64_t o = 0; o < static_cast<int64_t>(scores.size()); ++o) {
    if (o == query.object) continue;
    if (facts_at_t.count({query.subject, query.relation, o}) > 0) continue;  // filtered out
    if (scores[o] > scores[query.object]) greater += 1;
    else if (scores[o] == scores[query.object]) equal += 1;
  }
  return 1.0 + greater + equal / 2.0;
}

inline MetricsReport compute_metrics(const std::vector<RankRecord>& records) {
  require(!records.empty(), "compute_metrics: no rank records");
  const std::vector<int64_t> levels{1, 3, 10};
  auto fold = [&](auto begin, auto end, int64_t time) {
    MetricsReport::PerTimestamp out;
    out.time = time;
    for (int64_t lv : levels) out.hits[lv] = 0;
    for (auto it = begin; it != end; ++it) {
      out.mrr += 1.0 / it->filtered_rank;
      for (int64_t lv : levels)
        if (it->filtered_rank <= static_cast<double>(lv)) out.hits[lv] += 1;
      ++out.num_queries;
    }
    out.mrr /= static_cast<double>(out.num_queries);
    for (int64_t lv : levels) out.hits[lv] /= static_cast<double>(out.num_queries);
    return out;
  };
  auto total = fold(records.begin(), records.end(), -1);
  MetricsReport rep;
  rep.mrr = total.mrr;
  rep.hits = total.hits;
  rep.num_queries = total.num_queries;

  std::map<int64_t, std::vector<RankRecord>> by_time;
  for (const auto& r : records) by_time[r.time].push_back(r);
  for (const auto& [time, rs] : by_time) rep.per_timestamp.push_back(fold(rs.begin(), rs.end(), time));
  return rep;
}

inline nlohmann::json metrics_to_json(const MetricsReport& rep) {
  auto hits_json = [](const std::map<int64_t, double>& hits) {
    nlohmann::json h;
    for (const auto& [lv, frac] : hits) h[std::to_string(lv)] = frac;
    return h;
  };
  nlohmann::json j{{"mrr", rep.mrr}, {"hits", hits_json(rep.hits)}, {"num_queries", rep.num_queries}};
  j["per_timestamp"] = nlohmann::json::array();
  for (const auto& pt : rep.per_timestamp)
    j["per_timestamp"].push_back({{"t", pt.time},
                                  {"mrr", pt.mrr},
                                  {"hits", hits_json(pt.hits)},
                                  {"num_queries", pt.num_queries}});
  return j;
}

inline std::string metrics_to_csv(const MetricsReport& rep) {
  std::string out = "t,mrr,hits1,hits3,hits10,num_queries\n";
  char buf[160];
  for (const auto& pt : rep.per_timestamp) {
    std::snprintf(buf, sizeof buf, "%lld,%.10g,%.10g,%.10g,%.10g,%lld\n",
                  static_cast<long long>(pt.time), pt.mrr, pt.hits.at(1), pt.hits.at(3), pt.hits.at(10),
                  static_cast<long long>(pt.num_queries));
    out += buf;
  }
  return out;
}

inline std::set<Triple> facts_of(const SnapshotGraph& snap) {
  return {snap.edges.begin(), snap.edges.end()};
}

// Ranks every query of every split window with the full two-pass inference
// (forward-only), honoring the ablation switches and the optional
// non-time-aware comparison filter.
inline MetricsReport evaluate_split(const ModelState& model, const TkgDataset& ds, Split split,
                                    const TrainConfig& config) {
  auto windows = history_windows(ds, config.m, split);
  require(!windows.empty(), "evaluate_split: split has no query timestamps");
  const auto ab = ablation_of(config);
  std::set<Triple> all_time_facts;
  if (config.static_filter)
    for (const auto& snap : ds.snapshots) all_time_facts.insert(snap.edges.begin(), snap.edges.end());

  std::vector<RankRecord> records;
  ad::Tape tape;
  for (const auto& window : windows) {
    ad::NoGradGuard ng(tape);
    RunContext ctx{tape};
    auto run = evolve_window(ctx, model, window, ab);
    auto scores = decode_scores(ctx, model, run.state, window.queries, window.query_time, config.k, ab);
    const auto facts = facts_of(ds.snapshots[window.query_time]);
    const auto& truth = config.static_filter ? all_time_facts : facts;
    const int64_t V = model.dims.num_entities;
    const std::vector<char> no_mask(static_cast<size_t>(V), 0);
    for (size_t qi = 0; qi < window.queries.size(); ++qi) {
      const auto& q = window.queries[qi];
      std::vector<double> row(scores->val.begin() + qi * V, scores->val.begin() + (qi + 1) * V);
      RankRecord rec;
      rec.query = q;
      rec.time = window.query_time;
      rec.raw_rank = rank_of_gold(row, no_mask, q.object);
      rec.filtered_rank = rank_of_gold(row, time_aware_filter(V, q, truth), q.object);
      records.push_back(rec);
    }
    tape.reset();
  }
  return compute_metrics(records);
}

}  // namespace tkgx
