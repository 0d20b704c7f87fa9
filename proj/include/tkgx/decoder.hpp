#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <vector>

#include "tkgx/data.hpp"
#include "tkgx/disentangle.hpp"
#include "tkgx/encoder.hpp"
#include "tkgx/params.hpp"
#include "tkgx/tensor.hpp"

// Two-stage decoding. Stage one scores every (subject, relation) query
// against all candidate objects with ConvTransE over the end-of-window
// features. The top-k candidates per query form a provisional next-timestamp
// snapshot; stage two evolves one more step over it and re-scores. The
// discrete top-k choice is non-differentiable by design: gradients flow
// through the second pass only.

namespace tkgx {

// phi(o | s, r) for all queries at once -> [Q x |V|] of probabilities.
inline ad::Var convtranse_scores(const RunContext& ctx, const ModelState& model, const ad::Var& features,
                                 const std::vector<Triple>& queries) {
  require(!queries.empty(), "convtranse_scores: no queries");
  auto& t = ctx.tape;
  std::vector<int64_t> subj, rel;
  subj.reserve(queries.size());
  rel.reserve(queries.size());
  for (const auto& q : queries) {
    subj.push_back(q.subject);
    rel.push_back(q.relation);
  }
  auto conv = ad::conv2row(t, ad::gather_rows(t, features, subj), ad::gather_rows(t, model.rel_emb, rel),
                           model.conv_kernels, model.conv_bias);
  auto proj = ad::add_rowvec(t, ad::matmul(t, ctx.act(conv), model.dec_proj), model.dec_proj_bias);
  return ad::sigmoid(t, ad::matmul_nt(t, proj, features));
}

struct VirtualGraph {
  SnapshotGraph snapshot;  // sampled edges plus inverse copies, deduplicated
  std::vector<std::vector<int64_t>> per_query_candidates;  // the k chosen ids per query
};

// Top-k candidates per query by first-pass score, ties to the lower entity
// id, unioned into one snapshot at T+1 with inverse copies so the encoder can
// process it.
inline VirtualGraph sample_virtual_graph(const std::vector<double>& scores, int64_t num_candidates,
                                         const std::vector<Triple>& queries, int64_t k,
                                         int64_t num_raw_relations, int64_t query_time) {
  require(k >= 1, "sample_virtual_graph: k must be >= 1");
  require(scores.size() == queries.size() * static_cast<size_t>(num_candidates),
          "sample_virtual_graph: score matrix shape mismatch");
  const int64_t kk = std::min<int64_t>(k, num_candidates);
  VirtualGraph vg;
  vg.snapshot.time_index = query_time;
  std::set<Triple> edge_set;
  std::vector<int64_t> order(static_cast<size_t>(num_candidates));
  for (size_t qi = 0; qi < queries.size(); ++qi) {
    const double* row = &scores[qi * num_candidates];
    for (int64_t i = 0; i < num_candidates; ++i) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int64_t a, int64_t b) {
      return row[a] != row[b] ? row[a] > row[b] : a < b;
    });
    auto& chosen = vg.per_query_candidates.emplace_back(order.begin(), order.begin() + kk);
    for (int64_t o : chosen) {
      Triple fwd{queries[qi].subject, queries[qi].relation, o};
      int64_t inv_rel = fwd.relation < num_raw_relations ? fwd.relation + num_raw_relations
                                                         : fwd.relation - num_raw_relations;
      edge_set.insert(fwd);
      edge_set.insert({fwd.object, inv_rel, fwd.subject});
    }
  }
  vg.snapshot.edges.assign(edge_set.begin(), edge_set.end());
  return vg;
}

// One more evolution step over the virtual snapshot (gates driven by the
// end-of-window factors), then ConvTransE on the T+1 features.
inline ad::Var rescore_with_virtual(const RunContext& ctx, const ModelState& model, EvolutionState& state,
                                    const VirtualGraph& vg, const std::vector<Triple>& queries,
                                    const AblationSwitches& ab) {
  evolve_snapshot(ctx, model, state, vg.snapshot, ab);
  return convtranse_scores(ctx, model, state.cur[model.dims.omega], queries);
}

// The full two-pass decode used by training and evaluation. Under the
// w/o-virtual-graph ablation the first pass is the output (and then it must
// carry gradients); otherwise the first pass only selects candidates, so it
// runs grad-free.
inline ad::Var decode_scores(const RunContext& ctx, const ModelState& model, EvolutionState& state,
                             const std::vector<Triple>& queries, int64_t query_time, int64_t k,
                             const AblationSwitches& ab, VirtualGraph* vg_out = nullptr) {
  const int64_t omega = model.dims.omega;
  if (!ab.virtual_graph) return convtranse_scores(ctx, model, state.cur[omega], queries);
  std::vector<double> first_pass;
  {
    ad::NoGradGuard ng(ctx.tape);
    first_pass = convtranse_scores(ctx, model, state.cur[omega], queries)->val;
  }
  auto vg = sample_virtual_graph(first_pass, model.dims.num_entities, queries, k,
                                 model.dims.num_raw_relations, query_time);
  if (vg_out) *vg_out = vg;
  return rescore_with_virtual(ctx, model, state, vg, queries, ab);
}

}  // namespace tkgx
