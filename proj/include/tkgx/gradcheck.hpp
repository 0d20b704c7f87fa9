#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "tkgx/decoder.hpp"
#include "tkgx/disentangle.hpp"
#include "tkgx/training.hpp"

// End-to-end finite-difference verification of the whole pipeline (window
// evolution, disentanglement, two-pass decode, both loss terms) on a small
// synthetic instance. The virtual graph is sampled once from the baseline
// parameters and then held fixed, so the checked function is differentiable.

namespace tkgx {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> per_tensor;
  double worst = 0;
  double seconds = 0;
};

inline GradCheckReport gradcheck_pipeline(uint64_t seed = 7, double eps = 1e-5) {
  const auto t_start = std::chrono::steady_clock::now();

  TrainConfig config;
  config.d = 8;
  config.m = 3;
  config.omega = 2;
  config.num_heads = 1;
  config.k = 3;
  auto ds = gen_synthetic_tkg(/*num_entities=*/12, /*num_relations=*/4, /*period=*/2,
                              /*T=*/10, seed);
  auto dims = dims_for(ds, config);
  auto model = init_model(dims, seed);
  const auto ab = ablation_of(config);

  auto windows = history_windows(ds, config.m, Split::train);
  require(!windows.empty(), "gradcheck: no training windows");
  const auto& window = windows.back();  // deepest history available in train

  ad::Tape tape;
  RunContext ctx{tape, /*train_mode=*/false};

  VirtualGraph vg;
  {
    ad::NoGradGuard ng(tape);
    auto run = evolve_window(ctx, model, window, ab);
    auto first = convtranse_scores(ctx, model, run.state.cur[dims.omega], window.queries);
    vg = sample_virtual_graph(first->val, dims.num_entities, window.queries, config.k,
                              dims.num_raw_relations, window.query_time);
    tape.reset();
  }

  auto labels = build_labels(window.queries, SnapshotGraph{window.query_time, window.queries},
                             dims.num_entities);
  auto loss_fn = [&]() -> ad::Var {
    auto run = evolve_window(ctx, model, window, ab);
    auto scores = rescore_with_virtual(ctx, model, run.state, vg, window.queries, ab);
    auto l_pred = prediction_loss(ctx, scores, labels);
    auto l_dis = disentangle_loss(ctx, run.beta_seq);
    return total_loss(ctx, l_pred, l_dis);
  };

  GradCheckReport report;
  for (const auto& [name, p] : model.named()) {
    double err = ad::finite_difference_check(tape, loss_fn, {p}, eps);
    report.per_tensor.push_back({name, err});
    report.worst = std::max(report.worst, err);
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

}  // namespace tkgx
