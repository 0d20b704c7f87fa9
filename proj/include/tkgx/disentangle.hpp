#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tkgx/data.hpp"
#include "tkgx/encoder.hpp"
#include "tkgx/params.hpp"
#include "tkgx/tensor.hpp"

// Cross-time disentanglement. For every node, attention slots are its
// previous-snapshot in-edges plus one self-loop slot, scored per head by a
// scaled dot product of (current feature || relation) queries against
// (previous feature || relation) keys. The exclusive softmax pair weights the
// same value vectors into an active pooled input (GRU-evolved into A_t) and
// the stable factor B_t directly.

namespace tkgx {

struct Factors {
  ad::Var active;  // A_t [|V| x d]
  ad::Var stable;  // B_t [|V| x d]
};

// One (neighbor, relation-row) pair per attention slot; relation rows index
// the extended table rel_emb ++ self_loop_relation.
struct NeighborSlots {
  std::vector<int64_t> sources;
  std::vector<int64_t> relation_rows;
};

inline NeighborSlots neighbor_set(const SnapshotGraph& prev_snap, int64_t o, int64_t self_rel_row) {
  NeighborSlots slots;
  for (const auto& e : prev_snap.edges)
    if (e.object == o) {
      slots.sources.push_back(e.subject);
      slots.relation_rows.push_back(e.relation);
    }
  slots.sources.push_back(o);  // self-loop slot keeps isolated nodes total
  slots.relation_rows.push_back(self_rel_row);
  return slots;
}

// Per-node, per-head attention distributions, captured for tests.
struct DisentangleProbe {
  std::vector<std::vector<std::pair<ad::Var, ad::Var>>> attention;  // [node][head] -> (eta, eta_bar)
};

inline Factors disentangle_step(const RunContext& ctx, const ModelState& model, const ad::Var& h_now,
                                const ad::Var& h_prev, const SnapshotGraph& prev_snap,
                                const ad::Var& active_prev, DisentangleProbe* probe = nullptr) {
  auto& t = ctx.tape;
  const int64_t V = model.dims.num_entities;
  const int64_t d = model.dims.d;
  const int64_t nh = model.dims.num_heads;
  const int64_t dh = model.dims.head_dim();
  require(h_now->shape == (ad::Shape{V, d}) && h_prev->shape == (ad::Shape{V, d}),
          "disentangle_step: feature shape mismatch");
  const int64_t self_row = model.dims.num_relations();
  auto rel_ext = ad::concat_rows(t, model.rel_emb, ad::stack_rows(t, {model.self_loop_rel}));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  // Group edges by object once; scanning the edge list per node would be
  // quadratic in dense snapshots.
  std::vector<NeighborSlots> slots(static_cast<size_t>(V));
  for (const auto& e : prev_snap.edges) {
    slots[e.object].sources.push_back(e.subject);
    slots[e.object].relation_rows.push_back(e.relation);
  }
  for (int64_t o = 0; o < V; ++o) {
    slots[o].sources.push_back(o);
    slots[o].relation_rows.push_back(self_row);
  }

  if (probe) probe->attention.assign(static_cast<size_t>(V), {});
  std::vector<ad::Var> active_in_rows, stable_rows;
  active_in_rows.reserve(V);
  stable_rows.reserve(V);
  for (int64_t o = 0; o < V; ++o) {
    const auto& sl = slots[o];
    const auto n_slots = static_cast<int64_t>(sl.sources.size());
    auto feats_prev = ad::gather_rows(t, h_prev, sl.sources);
    auto rels = ad::gather_rows(t, rel_ext, sl.relation_rows);
    auto feat_now = ad::gather_rows(t, h_now, std::vector<int64_t>(n_slots, o));
    ad::Var active_in, stable;
    for (int64_t h = 0; h < nh; ++h) {
      const auto& hp = model.heads[h];
      const int64_t c0 = h * dh, c1 = (h + 1) * dh;
      auto rel_h = ad::slice_cols(t, rels, c0, c1);
      auto q = ad::matmul(t, ad::concat_cols(t, ad::slice_cols(t, feat_now, c0, c1), rel_h), hp.w_q);
      auto k = ad::matmul(t, ad::concat_cols(t, ad::slice_cols(t, feats_prev, c0, c1), rel_h), hp.w_k);
      auto e = ad::affine(t, ad::rows_dot(t, q, k), inv_sqrt_dh, 0.0);
      auto [eta, eta_bar] = ad::exclusive_softmax(t, e);
      if (probe) probe->attention[o].emplace_back(eta, eta_bar);
      auto values = ad::matmul(t, ad::slice_cols(t, feats_prev, c0, c1), hp.w_v);
      auto a_h = ad::mean_rows(t, ad::scale_rows(t, values, eta));
      auto b_h = ad::mean_rows(t, ad::scale_rows(t, values, eta_bar));
      active_in = h == 0 ? a_h : ad::concat_cols(t, active_in, a_h);
      stable = h == 0 ? b_h : ad::concat_cols(t, stable, b_h);
    }
    active_in_rows.push_back(active_in);
    stable_rows.push_back(stable);
  }
  auto active_in_mat = ad::stack_rows(t, active_in_rows);
  auto stable_mat = ad::stack_rows(t, stable_rows);
  auto active = ad::gru_cell(t, model.gru, active_prev, active_in_mat);
  return {active, stable_mat};
}

// Full-window evolution: evolve each history snapshot in order; from the
// second snapshot on, disentangle against the previous snapshot and hand the
// factors to the next timestamp. The state is left ready for one more
// evolve_snapshot (the decoder's virtual step), and every computed stable
// factor is returned for the smoothness loss.
struct WindowRun {
  EvolutionState state;
  std::vector<ad::Var> beta_seq;
};

inline WindowRun evolve_window(const RunContext& ctx, const ModelState& model, const HistoryWindow& window,
                               const AblationSwitches& ab) {
  require(!window.history.empty(), "evolve_window: empty history");
  WindowRun run;
  for (size_t j = 0; j < window.history.size(); ++j) {
    ad::Var h_prev_top = run.state.started ? run.state.prev[model.dims.omega] : ad::Var{};
    evolve_snapshot(ctx, model, run.state, *window.history[j], ab);
    if (j >= 1 && ab.disentangle) {
      auto f = disentangle_step(ctx, model, run.state.cur[model.dims.omega], h_prev_top,
                                *window.history[j - 1], run.state.active);
      run.state.active = f.active;
      run.state.stable = f.stable;
      run.beta_seq.push_back(f.stable);
    }
  }
  return run;
}

}  // namespace tkgx
