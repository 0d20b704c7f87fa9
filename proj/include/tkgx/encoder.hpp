#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tkgx/data.hpp"
#include "tkgx/params.hpp"
#include "tkgx/tensor.hpp"

// The evolution backbone. Each timestamp runs omega message-passing layers;
// layer l additionally consumes layer l's own output from the previous
// timestamp (the multi-span path), blended by a gate driven by the active
// factor. Layer 0 is re-initialized each timestamp from the static embeddings
// and the previous top-layer features, gated by the stable factor.

namespace tkgx {

struct AblationSwitches {
  bool multi_span = true;
  bool disentangle = true;
  bool virtual_graph = true;
};

inline AblationSwitches ablation_of(const TrainConfig& c) {
  return {c.multi_span, c.disentangle, c.virtual_graph};
}

struct EvolutionState {
  std::vector<ad::Var> cur;   // features per layer 0..omega at the last evolved timestamp
  std::vector<ad::Var> prev;  // same for the timestamp before that
  ad::Var active, stable;     // factors consumed by the NEXT timestamp's gates
  bool started = false;
};

// Test/diagnostic capture of one evolve_snapshot call, per layer 1..omega.
struct EvolveProbe {
  std::vector<ad::Var> pre_gate;   // aggregation output H before gating
  std::vector<ad::Var> prev_used;  // the historical features the gate blends in
  std::vector<ad::Var> gate;       // U itself
};

// r^l = rel_emb * W_REL^l + b_REL^l, the layer-specific relation table.
inline ad::Var relation_layer_embed(const RunContext& ctx, const ModelState& model, int64_t l) {
  require(l >= 1 && l <= model.dims.omega, "relation_layer_embed: layer out of range");
  const auto& lp = model.layers[l - 1];
  return ad::add_rowvec(ctx.tape, ad::matmul(ctx.tape, model.rel_emb, lp.w_rel), lp.b_rel);
}

// Per-node PNA aggregation over the message multiset: every in-edge message
// W_nbr(h_s + r^l) plus the node's own self-loop message W_sf h_o, reduced by
// concat(mean, max, min, population std), projected back to d, then
// residual + layer norm + activation.
inline ad::Var aggregate_messages(const RunContext& ctx, const ModelState& model, const SnapshotGraph& snap,
                                  const ad::Var& ddot, const ad::Var& rel_layer, int64_t l) {
  auto& t = ctx.tape;
  const auto& lp = model.layers[l - 1];
  const int64_t V = model.dims.num_entities;
  require(ddot->shape == ad::Shape{V, model.dims.d}, "aggregate_messages: bad feature shape");

  ad::Var self_msg = ad::matmul(t, ddot, lp.w_sf);
  ad::Var msgs;
  std::vector<int64_t> seg;
  seg.reserve(snap.edges.size() + V);
  if (!snap.edges.empty()) {
    std::vector<int64_t> src, rel;
    src.reserve(snap.edges.size());
    rel.reserve(snap.edges.size());
    for (const auto& e : snap.edges) {
      src.push_back(e.subject);
      rel.push_back(e.relation);
      seg.push_back(e.object);
    }
    auto nbr = ad::matmul(
        t, ad::add(t, ad::gather_rows(t, ddot, src), ad::gather_rows(t, rel_layer, rel)), lp.w_nbr);
    msgs = ad::concat_rows(t, nbr, self_msg);
  } else {
    msgs = self_msg;
  }
  for (int64_t o = 0; o < V; ++o) seg.push_back(o);  // self messages, one per node

  auto mean = ad::segment_mean(t, msgs, seg, V);
  auto mx = ad::segment_max(t, msgs, seg, V);
  auto mn = ad::segment_min(t, msgs, seg, V);
  auto centered = ad::sub(t, msgs, ad::gather_rows(t, mean, seg));
  auto var = ad::segment_mean(t, ad::mul(t, centered, centered), seg, V);
  auto sd = ad::sqrt_guarded(t, var);
  auto pna = ad::concat_cols(t, ad::concat_cols(t, mean, mx), ad::concat_cols(t, mn, sd));
  auto proj = ad::matmul(t, pna, lp.pna_proj);
  return ad::add(t, ddot, ctx.act(ad::layer_norm(t, proj, lp.ln_gain, lp.ln_bias)));
}

// ddot = H_t^{l-1} + W_CE^l H_{t-1}^l; the cross-time term is the multi-span
// path and vanishes under the ablation.
inline ad::Var cross_time_input(const RunContext& ctx, const ModelState& model, const ad::Var& cur_below,
                                const ad::Var& prev_same, int64_t l, bool multi_span) {
  if (!multi_span) return cur_below;
  return ad::add(ctx.tape, cur_below, ad::matmul(ctx.tape, prev_same, model.layers[l - 1].w_ce));
}

// U = sigmoid(A_{t-1} W_UG + b_UG); out = U*H + (1-U)*H_prev.
inline ad::Var gated_update(const RunContext& ctx, const ModelState& model, const ad::Var& h_agg,
                            const ad::Var& prev_same, const ad::Var& active_factor, int64_t l,
                            EvolveProbe* probe = nullptr) {
  auto& t = ctx.tape;
  const auto& lp = model.layers[l - 1];
  auto gate = ad::sigmoid(t, ad::add_rowvec(t, ad::matmul(t, active_factor, lp.w_ug), lp.b_ug));
  if (probe) {
    probe->pre_gate.push_back(h_agg);
    probe->prev_used.push_back(prev_same);
    probe->gate.push_back(gate);
  }
  return ad::add(t, ad::mul(t, gate, h_agg), ad::mul(t, ad::one_minus(t, gate), prev_same));
}

// Mean of base relation embeddings over each node's current in-edges; nodes
// with none pool the learned null-relation vector instead.
inline ad::Var pooled_incident_relations(const RunContext& ctx, const ModelState& model,
                                         const SnapshotGraph& snap) {
  auto& t = ctx.tape;
  const int64_t V = model.dims.num_entities;
  std::vector<char> has_edge(V, 0);
  std::vector<int64_t> rel_ids, seg;
  for (const auto& e : snap.edges) {
    rel_ids.push_back(e.relation);
    seg.push_back(e.object);
    has_edge[e.object] = 1;
  }
  const int64_t null_id = model.dims.num_relations();
  for (int64_t o = 0; o < V; ++o)
    if (!has_edge[o]) {
      rel_ids.push_back(null_id);
      seg.push_back(o);
    }
  auto extended = ad::concat_rows(t, model.rel_emb, ad::stack_rows(t, {model.null_rel}));
  return ad::segment_mean(t, ad::gather_rows(t, extended, rel_ids), seg, V);
}

// Layer-0 features: P is the raw embedding table at a window start, otherwise
// a stable-factor-gated blend of embeddings and the previous top layer; then
// the 2-layer init network over (P || pooled relations).
inline ad::Var init_layer0(const RunContext& ctx, const ModelState& model, const SnapshotGraph& snap,
                           const ad::Var& prev_top, const ad::Var& stable_factor, bool window_start) {
  auto& t = ctx.tape;
  ad::Var p;
  if (window_start) {
    p = model.node_emb;
  } else {
    auto gate = ad::sigmoid(t, ad::add_rowvec(t, ad::matmul(t, stable_factor, model.w_ig), model.b_ig));
    p = ad::add(t, ad::mul(t, gate, model.node_emb), ad::mul(t, ad::one_minus(t, gate), prev_top));
  }
  auto pooled = pooled_incident_relations(ctx, model, snap);
  auto hidden = ctx.act(ad::add_rowvec(t, ad::matmul(t, ad::concat_cols(t, p, pooled), model.g_w1), model.g_b1));
  return ad::add_rowvec(t, ad::matmul(t, hidden, model.g_w2), model.g_b2);
}

inline ad::Var zero_features(const ModelDims& dims) {
  return ad::zeros({dims.num_entities, dims.d});
}

// One timestamp of evolution. Fills state.cur from state.prev, then rolls
// prev = cur for the next call. At a window start every historical reference
// resolves to the first timestamp's layer-0 initialization and the factors
// are zero.
inline void evolve_snapshot(const RunContext& ctx, const ModelState& model, EvolutionState& state,
                            const SnapshotGraph& snap, const AblationSwitches& ab,
                            EvolveProbe* probe = nullptr) {
  const int64_t omega = model.dims.omega;
  if (!state.started) {
    state.active = zero_features(model.dims);
    state.stable = zero_features(model.dims);
    auto h0 = init_layer0(ctx, model, snap, {}, {}, /*window_start=*/true);
    state.prev.assign(static_cast<size_t>(omega) + 1, h0);
    state.cur.assign(static_cast<size_t>(omega) + 1, {});
    state.cur[0] = h0;
    state.started = true;
  } else {
    state.cur.assign(static_cast<size_t>(omega) + 1, {});
    state.cur[0] = init_layer0(ctx, model, snap, state.prev[omega], state.stable, /*window_start=*/false);
  }
  for (int64_t l = 1; l <= omega; ++l) {
    auto rel_layer = relation_layer_embed(ctx, model, l);
    auto ddot = cross_time_input(ctx, model, state.cur[l - 1], state.prev[l], l, ab.multi_span);
    auto h = aggregate_messages(ctx, model, snap, ddot, rel_layer, l);
    state.cur[l] = ab.multi_span ? gated_update(ctx, model, h, state.prev[l], state.active, l, probe) : h;
  }
  state.prev = state.cur;
}

}  // namespace tkgx
