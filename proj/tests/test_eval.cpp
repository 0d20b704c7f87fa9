#include "tkgx/eval.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "tkgx/training.hpp"

using namespace tkgx;

TEST(eval, filter_masks_other_true_objects_only) {
  std::set<Triple> facts{{0, 0, 2}, {0, 0, 3}, {1, 0, 4}, {0, 1, 1}};
  auto mask = time_aware_filter(5, {0, 0, 2}, facts);
  EXPECT_EQ(mask, (std::vector<char>{0, 0, 0, 1, 0}));  // only (0,0,3) is filtered
  // different relation, same subject: (0,1,1) has no competing facts
  auto mask2 = time_aware_filter(5, {0, 1, 1}, facts);
  EXPECT_EQ(mask2, (std::vector<char>{0, 0, 0, 0, 0}));
  EXPECT_THROW(time_aware_filter(5, {0, 0, 4}, facts), ContractError);  // gold not a fact
}

TEST(eval, rank_of_gold_counts_and_averages) {
  std::vector<char> keep(3, 0);
  EXPECT_DOUBLE_EQ(rank_of_gold({0.9, 0.5, 0.7}, keep, 1), 3.0);
  EXPECT_DOUBLE_EQ(rank_of_gold({0.9, 0.5, 0.7}, keep, 0), 1.0);
  EXPECT_DOUBLE_EQ(rank_of_gold({0.5, 0.5, 0.5}, keep, 1), 2.0);  // full tie averages
  EXPECT_DOUBLE_EQ(rank_of_gold({0.9, 0.5, 0.5}, keep, 2), 2.5);
  // masking a higher-scored candidate improves the rank
  EXPECT_DOUBLE_EQ(rank_of_gold({0.9, 0.5, 0.7}, {1, 0, 0}, 1), 2.0);
  EXPECT_THROW(rank_of_gold({0.1, 0.2}, {0, 1}, 1), ContractError);
}

TEST(eval, ranks_are_invariant_under_monotone_transforms) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t n = 2 + static_cast<int64_t>(rng_below(rng, 20));
    std::vector<double> scores(n);
    for (auto& x : scores) x = std::round(rng_uniform01(rng) * 10.0) / 10.0;
    auto warped = scores;
    for (auto& x : warped) x = std::tanh(2.0 * x) + 3.0;  // strictly increasing
    std::vector<char> mask(n, 0);
    mask[rng_below(rng, static_cast<uint64_t>(n))] = 1;
    int64_t gold = static_cast<int64_t>(rng_below(rng, static_cast<uint64_t>(n)));
    if (mask[gold]) mask[gold] = 0;
    EXPECT_DOUBLE_EQ(rank_of_gold(scores, mask, gold), rank_of_gold(warped, mask, gold));
  }
}

TEST(eval, metrics_match_hand_computed_example) {
  std::vector<RankRecord> records;
  for (double rank : {1.0, 2.0, 4.0}) {
    RankRecord r;
    r.time = rank < 4 ? 10 : 20;
    r.filtered_rank = rank;
    records.push_back(r);
  }
  auto rep = compute_metrics(records);
  EXPECT_NEAR(rep.mrr, 7.0 / 12.0, 1e-9);  // (1 + 1/2 + 1/4) / 3
  EXPECT_NEAR(rep.hits.at(1), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(rep.hits.at(3), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(rep.hits.at(10), 1.0, 1e-12);
  EXPECT_EQ(rep.num_queries, 3);

  ASSERT_EQ(rep.per_timestamp.size(), 2u);
  EXPECT_EQ(rep.per_timestamp[0].time, 10);
  EXPECT_EQ(rep.per_timestamp[0].num_queries, 2);
  EXPECT_NEAR(rep.per_timestamp[0].mrr, 0.75, 1e-12);
  EXPECT_EQ(rep.per_timestamp[1].time, 20);
  EXPECT_NEAR(rep.per_timestamp[1].mrr, 0.25, 1e-12);

  EXPECT_THROW(compute_metrics({}), ContractError);
}

TEST(eval, hits_are_monotone_in_the_level) {
  std::mt19937_64 rng(5);
  std::vector<RankRecord> records(300);
  for (auto& r : records) {
    r.time = static_cast<int64_t>(rng_below(rng, 5));
    r.filtered_rank = 1.0 + rng_below(rng, 30) / 2.0;
  }
  auto rep = compute_metrics(records);
  EXPECT_LE(rep.hits.at(1), rep.hits.at(3));
  EXPECT_LE(rep.hits.at(3), rep.hits.at(10));
  for (const auto& pt : rep.per_timestamp) {
    EXPECT_LE(pt.hits.at(1), pt.hits.at(3));
    EXPECT_LE(pt.hits.at(3), pt.hits.at(10));
  }
}

TEST(eval, sorting_rank_agrees_with_counting_oracle_exhaustively) {
  // every score assignment over a small tie-friendly alphabet, every gold,
  // two filter patterns
  for (int64_t n = 2; n <= 5; ++n) {
    std::vector<int64_t> digits(n, 0);
    while (true) {
      std::vector<double> scores(n);
      for (int64_t i = 0; i < n; ++i) scores[i] = 0.1 * static_cast<double>(digits[i] + 1);
      for (int64_t gold = 0; gold < n; ++gold) {
        for (int pattern = 0; pattern < 2; ++pattern) {
          std::set<Triple> facts{{0, 0, gold}};
          if (pattern == 1) {
            facts.insert({0, 0, (gold + 1) % n});
            facts.insert({0, 0, (gold + 3) % n});
          }
          Triple query{0, 0, gold};
          auto mask = time_aware_filter(n, query, facts);
          ASSERT_DOUBLE_EQ(rank_of_gold(scores, mask, gold), oracle_rank(scores, query, facts))
              << "n=" << n << " gold=" << gold << " pattern=" << pattern;
        }
      }
      int64_t i = n - 1;
      while (i >= 0 && digits[i] == n - 1) digits[i--] = 0;
      if (i < 0) break;
      ++digits[i];
    }
  }
}

TEST(eval, sorting_rank_agrees_with_counting_oracle_randomly) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 2000; ++trial) {
    const int64_t n = 2 + static_cast<int64_t>(rng_below(rng, 49));
    std::vector<double> scores(n);
    for (auto& x : scores) x = std::round(rng_uniform01(rng) * 8.0) / 8.0;  // heavy ties
    std::set<Triple> facts;
    for (int64_t o = 0; o < n; ++o)
      if (rng_uniform01(rng) < 0.3) facts.insert({2, 5, o});
    const int64_t gold = static_cast<int64_t>(rng_below(rng, static_cast<uint64_t>(n)));
    facts.insert({2, 5, gold});
    Triple query{2, 5, gold};
    auto mask = time_aware_filter(n, query, facts);
    ASSERT_DOUBLE_EQ(rank_of_gold(scores, mask, gold), oracle_rank(scores, query, facts)) << trial;
  }
}

TEST(eval, indifferent_model_ranks_at_the_tie_midpoint) {
  // A zeroed projection scores everything 0.5, so each query's filtered rank
  // must sit exactly mid-field among the unfiltered candidates.
  auto ds = gen_synthetic_tkg(10, 2, 2, 10, 41);
  TrainConfig config;
  config.d = 8;
  config.m = 2;
  config.omega = 1;
  config.num_heads = 1;
  config.k = 3;
  auto model = init_model(dims_for(ds, config), 41);
  std::fill(model.dec_proj->val.begin(), model.dec_proj->val.end(), 0.0);
  std::fill(model.dec_proj_bias->val.begin(), model.dec_proj_bias->val.end(), 0.0);

  auto rep = evaluate_split(model, ds, Split::test, config);
  double expected = 0;
  int64_t nq = 0;
  const int64_t V = ds.num_entities;
  for (const auto& window : history_windows(ds, config.m, Split::test)) {
    auto facts = facts_of(ds.snapshots[window.query_time]);
    std::map<std::pair<int64_t, int64_t>, int64_t> n_true;
    for (const auto& f : facts) ++n_true[{f.subject, f.relation}];
    for (const auto& q : window.queries) {
      const int64_t survivors = V - (n_true[{q.subject, q.relation}] - 1);
      expected += 2.0 / static_cast<double>(survivors + 1);
      ++nq;
    }
  }
  expected /= static_cast<double>(nq);
  EXPECT_EQ(rep.num_queries, nq);
  EXPECT_NEAR(rep.mrr, expected, 1e-12);
  int64_t per_t_total = 0;
  for (const auto& pt : rep.per_timestamp) per_t_total += pt.num_queries;
  EXPECT_EQ(per_t_total, nq);
}

TEST(eval, report_serializes_to_json_and_csv) {
  std::vector<RankRecord> records;
  for (double rank : {1.0, 2.0, 4.0}) {
    RankRecord r;
    r.time = 3;
    r.filtered_rank = rank;
    records.push_back(r);
  }
  RankRecord late;
  late.time = 7;
  late.filtered_rank = 1.0;
  records.push_back(late);

  auto rep = compute_metrics(records);
  auto j = metrics_to_json(rep);
  EXPECT_NEAR(j.at("mrr").get<double>(), rep.mrr, 1e-15);
  EXPECT_NEAR(j.at("hits").at("1").get<double>(), rep.hits.at(1), 1e-15);
  EXPECT_NEAR(j.at("hits").at("10").get<double>(), 1.0, 1e-15);
  EXPECT_EQ(j.at("num_queries").get<int64_t>(), 4);
  ASSERT_EQ(j.at("per_timestamp").size(), 2u);
  EXPECT_EQ(j.at("per_timestamp")[0].at("t").get<int64_t>(), 3);
  EXPECT_EQ(j.at("per_timestamp")[1].at("num_queries").get<int64_t>(), 1);

  auto csv = metrics_to_csv(rep);
  EXPECT_NE(csv.find("t,mrr,hits1,hits3,hits10,num_queries\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);  // header + two timestamps
}

TEST(eval, static_filter_masks_across_all_timestamps) {
  // The union-of-history filter masks a superset of the per-timestamp filter,
  // and removing competitors can only improve (never hurt) the ranks.
  auto ds = gen_synthetic_tkg(10, 2, 2, 12, 17);
  TrainConfig config;
  config.d = 8;
  config.m = 2;
  config.omega = 1;
  config.num_heads = 1;
  config.k = 3;
  auto model = init_model(dims_for(ds, config), 17);

  auto time_aware = evaluate_split(model, ds, Split::test, config);
  config.static_filter = true;
  auto static_rep = evaluate_split(model, ds, Split::test, config);
  EXPECT_EQ(time_aware.num_queries, static_rep.num_queries);
  // extra masking can only remove competitors, so MRR cannot drop
  EXPECT_GE(static_rep.mrr, time_aware.mrr - 1e-12);
}
