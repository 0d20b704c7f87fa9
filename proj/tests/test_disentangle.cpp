#include "tkgx/disentangle.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

using namespace tkgx;

namespace {

ModelDims tiny_dims(int64_t V, int64_t R0, int64_t d, int64_t heads) {
  ModelDims dims;
  dims.num_entities = V;
  dims.num_raw_relations = R0;
  dims.d = d;
  dims.omega = 1;
  dims.num_heads = heads;
  return dims;
}

void fill_val(const ad::Var& v, double x) { std::fill(v->val.begin(), v->val.end(), x); }

ad::Var rand_features(std::mt19937_64& rng, int64_t rows, int64_t cols) {
  std::vector<double> v(static_cast<size_t>(rows * cols));
  for (auto& x : v) x = rng_uniform(rng, -1.5, 1.5);
  return ad::make_leaf({rows, cols}, std::move(v), true);
}

}  // namespace

TEST(disentangle, neighbor_slots_keep_order_duplicates_and_self) {
  SnapshotGraph snap{0, {{0, 0, 2}, {1, 1, 2}, {0, 0, 2}, {2, 3, 1}}};
  auto slots = neighbor_set(snap, 2, /*self_rel_row=*/8);
  EXPECT_EQ(slots.sources, (std::vector<int64_t>{0, 1, 0, 2}));
  EXPECT_EQ(slots.relation_rows, (std::vector<int64_t>{0, 1, 0, 8}));

  auto isolated = neighbor_set(snap, 0, 8);  // no in-edges: self slot only
  EXPECT_EQ(isolated.sources, (std::vector<int64_t>{0}));
  EXPECT_EQ(isolated.relation_rows, (std::vector<int64_t>{8}));
}

TEST(disentangle, attention_pair_normalizes_and_opposes) {
  auto dims = tiny_dims(5, 2, 8, 2);
  auto model = init_model(dims, 21);
  std::mt19937_64 rng(4);
  SnapshotGraph prev_snap{0, {{0, 0, 1}, {2, 1, 1}, {3, 2, 1}, {1, 3, 0}, {4, 0, 2}}};
  auto h_now = rand_features(rng, dims.num_entities, dims.d);
  auto h_prev = rand_features(rng, dims.num_entities, dims.d);
  ad::Tape tape;
  RunContext ctx{tape};
  DisentangleProbe probe;
  disentangle_step(ctx, model, h_now, h_prev, prev_snap, zero_features(dims), &probe);

  ASSERT_EQ(probe.attention.size(), 5u);
  for (int64_t o = 0; o < dims.num_entities; ++o) {
    ASSERT_EQ(probe.attention[o].size(), 2u);
    for (const auto& [eta, eta_bar] : probe.attention[o]) {
      const auto& a = eta->val;
      const auto& b = eta_bar->val;
      ASSERT_EQ(a.size(), b.size());
      EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 1.0, 1e-12);
      EXPECT_NEAR(std::accumulate(b.begin(), b.end(), 0.0), 1.0, 1e-12);
      for (double x : a) EXPECT_GT(x, 0.0);
      for (double x : b) EXPECT_GT(x, 0.0);
      // Exclusivity: the two distributions rank the slots in opposite order.
      std::vector<size_t> by_eta(a.size()), by_bar(a.size());
      std::iota(by_eta.begin(), by_eta.end(), 0u);
      by_bar = by_eta;
      std::stable_sort(by_eta.begin(), by_eta.end(), [&](size_t i, size_t j) { return a[i] > a[j]; });
      std::stable_sort(by_bar.begin(), by_bar.end(), [&](size_t i, size_t j) { return b[i] < b[j]; });
      EXPECT_EQ(by_eta, by_bar);
    }
  }
}

TEST(disentangle, zero_values_give_zero_stable_and_halved_active) {
  // With W_V = 0 both pooled inputs vanish; a zero GRU then yields
  // z = 1/2, candidate 0, so the active factor exactly halves each step.
  auto dims = tiny_dims(4, 2, 6, 1);
  auto model = init_model(dims, 9);
  for (int64_t h = 0; h < dims.num_heads; ++h) fill_val(model.heads[h].w_v, 0.0);
  for (const auto& [name, p] : model.named())
    if (name.rfind("gru.", 0) == 0) fill_val(p, 0.0);

  std::mt19937_64 rng(11);
  auto h_now = rand_features(rng, 4, 6);
  auto h_prev = rand_features(rng, 4, 6);
  auto active_prev = rand_features(rng, 4, 6);
  SnapshotGraph prev_snap{0, {{0, 0, 1}, {2, 1, 3}}};
  ad::Tape tape;
  RunContext ctx{tape};
  auto f = disentangle_step(ctx, model, h_now, h_prev, prev_snap, active_prev);
  for (double x : f.stable->val) EXPECT_EQ(x, 0.0);
  for (size_t i = 0; i < f.active->val.size(); ++i)
    EXPECT_DOUBLE_EQ(f.active->val[i], 0.5 * active_prev->val[i]);
}

TEST(disentangle, factors_steer_the_update_gates) {
  // The active factor from one step must move the next step's update gates
  // away from 1/2; feeding a zero factor instead must leave them at 1/2.
  auto dims = tiny_dims(5, 2, 8, 2);
  dims.omega = 2;
  auto model = init_model(dims, 33);
  SnapshotGraph s0{0, {{0, 0, 1}, {2, 1, 3}, {4, 2, 0}}};
  SnapshotGraph s1{1, {{1, 0, 2}, {3, 3, 4}}};
  ad::Tape tape;
  RunContext ctx{tape};
  AblationSwitches ab;

  EvolutionState state;
  evolve_snapshot(ctx, model, state, s0, ab);
  auto h_prev_top = state.prev[dims.omega];
  evolve_snapshot(ctx, model, state, s1, ab);
  auto f = disentangle_step(ctx, model, state.cur[dims.omega], h_prev_top, s0, state.active);
  state.active = f.active;
  state.stable = f.stable;

  EvolveProbe probe;
  evolve_snapshot(ctx, model, state, s1, ab, &probe);
  bool moved = false;
  for (const auto& g : probe.gate)
    for (double x : g->val) {
      EXPECT_GT(x, 0.0);
      EXPECT_LT(x, 1.0);
      moved |= x != 0.5;
    }
  EXPECT_TRUE(moved);
}

TEST(disentangle, window_runs_disentangler_after_every_step_including_last) {
  auto ds = gen_synthetic_tkg(10, 3, 2, 10, 13);
  TrainConfig config;
  config.d = 8;
  config.m = 4;
  config.omega = 1;
  config.num_heads = 2;
  auto model = init_model(dims_for(ds, config), 13);
  auto windows = history_windows(ds, config.m, Split::train);
  const auto& window = windows.back();
  ASSERT_EQ(window.history.size(), 4u);

  ad::Tape tape;
  RunContext ctx{tape};
  auto run = evolve_window(ctx, model, window, AblationSwitches{});
  // steps 1..3 each produce a stable factor; the last one is still live in
  // the state handed to the decoder.
  ASSERT_EQ(run.beta_seq.size(), 3u);
  EXPECT_EQ(run.state.stable->val, run.beta_seq.back()->val);
  bool active_nonzero = false;
  for (double x : run.state.active->val) active_nonzero |= x != 0.0;
  EXPECT_TRUE(active_nonzero);
}

TEST(disentangle, single_snapshot_window_keeps_factors_zero) {
  auto ds = gen_synthetic_tkg(10, 3, 2, 10, 13);
  TrainConfig config;
  config.d = 8;
  config.m = 1;
  config.omega = 1;
  config.num_heads = 1;
  auto model = init_model(dims_for(ds, config), 13);
  auto windows = history_windows(ds, config.m, Split::train);
  ad::Tape tape;
  RunContext ctx{tape};
  auto run = evolve_window(ctx, model, windows.back(), AblationSwitches{});
  EXPECT_TRUE(run.beta_seq.empty());
  for (double x : run.state.active->val) EXPECT_EQ(x, 0.0);
  for (double x : run.state.stable->val) EXPECT_EQ(x, 0.0);
}

TEST(disentangle, disabled_switch_keeps_factors_zero_across_steps) {
  auto ds = gen_synthetic_tkg(10, 3, 2, 10, 13);
  TrainConfig config;
  config.d = 8;
  config.m = 3;
  config.omega = 1;
  config.num_heads = 1;
  config.disentangle = false;
  auto model = init_model(dims_for(ds, config), 13);
  auto windows = history_windows(ds, config.m, Split::train);
  ad::Tape tape;
  RunContext ctx{tape};
  auto run = evolve_window(ctx, model, windows.back(), ablation_of(config));
  EXPECT_TRUE(run.beta_seq.empty());
  for (double x : run.state.active->val) EXPECT_EQ(x, 0.0);
  for (double x : run.state.stable->val) EXPECT_EQ(x, 0.0);
}

TEST(disentangle, gradients_match_finite_differences) {
  auto dims = tiny_dims(5, 2, 6, 2);
  auto model = init_model(dims, 77);
  std::mt19937_64 rng(7);
  auto h_now = rand_features(rng, 5, 6);
  auto h_prev = rand_features(rng, 5, 6);
  auto active_prev = rand_features(rng, 5, 6);
  SnapshotGraph prev_snap{0, {{0, 0, 1}, {2, 1, 1}, {3, 2, 4}, {1, 3, 0}}};

  ad::Tape tape;
  RunContext ctx{tape};
  auto f = [&]() {
    auto fac = disentangle_step(ctx, model, h_now, h_prev, prev_snap, active_prev);
    auto both = ad::add(tape, ad::sum_all(tape, fac.active), ad::sum_all(tape, fac.stable));
    return both;
  };
  std::vector<ad::Var> leaves{h_now, h_prev, active_prev};
  for (const auto& [name, p] : model.named())
    if (name.rfind("head", 0) == 0 || name.rfind("gru.", 0) == 0 || name == "self_loop_relation" ||
        name == "relation_embeddings")
      leaves.push_back(p);
  EXPECT_LT(ad::finite_difference_check(tape, f, leaves), 1e-6);
}
