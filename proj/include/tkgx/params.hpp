#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tkgx/config.hpp"
#include "tkgx/data.hpp"
#include "tkgx/tensor.hpp"

// All learned tensors of the model, created as off-tape autodiff leaves so
// they survive tape resets between windows. Enumeration order is fixed and
// doubles as the initialization order, so a seed pins every weight.

namespace tkgx {

struct ModelDims {
  int64_t num_entities = 0;
  int64_t num_raw_relations = 0;
  int64_t d = 0;
  int64_t omega = 0;
  int64_t num_heads = 0;
  int64_t conv_channels = 32;
  int64_t conv_width = 3;

  int64_t head_dim() const { return d / num_heads; }
  int64_t num_relations() const { return 2 * num_raw_relations; }
};

inline ModelDims dims_for(const TkgDataset& ds, const TrainConfig& c) {
  return {ds.num_entities, ds.num_raw_relations, c.d, c.omega, c.num_heads};
}

struct LayerParams {
  ad::Var w_nbr, w_sf;        // neighbor / self-loop message maps
  ad::Var w_rel, b_rel;       // layer-specific relation transform
  ad::Var pna_proj;           // [4d x d] back-projection of the aggregator concat
  ad::Var ln_gain, ln_bias;   // layer norm affine
  ad::Var w_ce;               // cross-time same-layer input map
  ad::Var w_ug, b_ug;         // update gate driven by the active factor
};

struct HeadParams {
  ad::Var w_q, w_k;  // [2*dh x dh] on (feature || relation) head slices
  ad::Var w_v;       // [dh x dh]
};

struct ModelState {
  ModelDims dims;
  ad::Var node_emb;        // [|V| x d]
  ad::Var rel_emb;         // [2|R0| x d]
  ad::Var null_rel;        // pooled by nodes with no in-edges
  std::vector<LayerParams> layers;  // 1..omega
  ad::Var w_ig, b_ig;      // initialization gate driven by the stable factor
  ad::Var g_w1, g_b1, g_w2, g_b2;  // 2-layer init network [2d -> d -> d]
  std::vector<HeadParams> heads;
  ad::Var self_loop_rel;   // relation stand-in for the disentangler's self slot
  ad::GruParams gru;       // evolves the active factor
  ad::Var conv_kernels;    // [C x 2 x w]
  ad::Var conv_bias;       // [C]
  ad::Var dec_proj;        // [C*d x d]
  ad::Var dec_proj_bias;   // [d]

  std::vector<std::pair<std::string, ad::Var>> named() const {
    std::vector<std::pair<std::string, ad::Var>> out;
    out.emplace_back("node_embeddings", node_emb);
    out.emplace_back("relation_embeddings", rel_emb);
    out.emplace_back("null_relation", null_rel);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l + 1) + ".";
      out.emplace_back(p + "w_nbr", layers[l].w_nbr);
      out.emplace_back(p + "w_sf", layers[l].w_sf);
      out.emplace_back(p + "w_rel", layers[l].w_rel);
      out.emplace_back(p + "b_rel", layers[l].b_rel);
      out.emplace_back(p + "pna_proj", layers[l].pna_proj);
      out.emplace_back(p + "ln_gain", layers[l].ln_gain);
      out.emplace_back(p + "ln_bias", layers[l].ln_bias);
      out.emplace_back(p + "w_ce", layers[l].w_ce);
      out.emplace_back(p + "w_ug", layers[l].w_ug);
      out.emplace_back(p + "b_ug", layers[l].b_ug);
    }
    out.emplace_back("w_ig", w_ig);
    out.emplace_back("b_ig", b_ig);
    out.emplace_back("init_net.w1", g_w1);
    out.emplace_back("init_net.b1", g_b1);
    out.emplace_back("init_net.w2", g_w2);
    out.emplace_back("init_net.b2", g_b2);
    for (size_t h = 0; h < heads.size(); ++h) {
      const std::string p = "head" + std::to_string(h + 1) + ".";
      out.emplace_back(p + "w_q", heads[h].w_q);
      out.emplace_back(p + "w_k", heads[h].w_k);
      out.emplace_back(p + "w_v", heads[h].w_v);
    }
    out.emplace_back("self_loop_relation", self_loop_rel);
    out.emplace_back("gru.wz", gru.wz);
    out.emplace_back("gru.uz", gru.uz);
    out.emplace_back("gru.bz", gru.bz);
    out.emplace_back("gru.wr", gru.wr);
    out.emplace_back("gru.ur", gru.ur);
    out.emplace_back("gru.br", gru.br);
    out.emplace_back("gru.wh", gru.wh);
    out.emplace_back("gru.uh", gru.uh);
    out.emplace_back("gru.bh", gru.bh);
    out.emplace_back("decoder.kernels", conv_kernels);
    out.emplace_back("decoder.conv_bias", conv_bias);
    out.emplace_back("decoder.proj", dec_proj);
    out.emplace_back("decoder.proj_bias", dec_proj_bias);
    return out;
  }

  void zero_grads() const {
    for (auto& [name, v] : named())
      std::fill(v->grad.begin(), v->grad.end(), 0.0);
  }
};

namespace detail {

inline ad::Var glorot(std::mt19937_64& rng, ad::Shape shape) {
  double fan_in = 0, fan_out = 0;
  if (shape.size() == 1) {
    fan_in = 1;  // lone embedding vectors behave like a 1-row table
    fan_out = static_cast<double>(shape[0]);
  } else if (shape.size() == 2) {
    fan_in = static_cast<double>(shape[0]);
    fan_out = static_cast<double>(shape[1]);
  } else {  // conv kernels [C, in_rows, w]
    fan_in = static_cast<double>(shape[1] * shape[2]);
    fan_out = static_cast<double>(shape[0] * shape[2]);
  }
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<double> vals(ad::shape_numel(shape));
  for (auto& x : vals) x = rng_uniform(rng, -limit, limit);
  return ad::make_leaf(std::move(shape), std::move(vals), true);
}

inline ad::Var const_leaf(ad::Shape shape, double fill) {
  std::vector<double> vals(ad::shape_numel(shape), fill);
  return ad::make_leaf(std::move(shape), std::move(vals), true);
}

}  // namespace detail

inline ModelState init_model(const ModelDims& dims, uint64_t seed) {
  require(dims.num_entities >= 1 && dims.num_raw_relations >= 1, "init_model: empty vocabulary");
  require(dims.d >= 1 && dims.omega >= 1 && dims.num_heads >= 1, "init_model: bad dims");
  require(dims.d % dims.num_heads == 0, "init_model: d not divisible by heads");
  require(dims.conv_width % 2 == 1, "init_model: conv width must be odd");
  std::mt19937_64 rng(seed);
  const int64_t d = dims.d, dh = dims.head_dim();
  auto W = [&](int64_t r, int64_t c) { return detail::glorot(rng, {r, c}); };
  auto B = [&](int64_t n) { return detail::const_leaf({n}, 0.0); };

  ModelState m;
  m.dims = dims;
  m.node_emb = detail::glorot(rng, {dims.num_entities, d});
  m.rel_emb = detail::glorot(rng, {dims.num_relations(), d});
  m.null_rel = detail::glorot(rng, {d});
  for (int64_t l = 0; l < dims.omega; ++l) {
    LayerParams lp;
    lp.w_nbr = W(d, d);
    lp.w_sf = W(d, d);
    lp.w_rel = W(d, d);
    lp.b_rel = B(d);
    lp.pna_proj = W(4 * d, d);
    lp.ln_gain = detail::const_leaf({d}, 1.0);
    lp.ln_bias = B(d);
    lp.w_ce = W(d, d);
    lp.w_ug = W(d, d);
    lp.b_ug = B(d);
    m.layers.push_back(std::move(lp));
  }
  m.w_ig = W(d, d);
  m.b_ig = B(d);
  m.g_w1 = W(2 * d, d);
  m.g_b1 = B(d);
  m.g_w2 = W(d, d);
  m.g_b2 = B(d);
  for (int64_t h = 0; h < dims.num_heads; ++h)
    m.heads.push_back({W(2 * dh, dh), W(2 * dh, dh), W(dh, dh)});
  m.self_loop_rel = detail::glorot(rng, {d});
  m.gru = {W(d, d), W(d, d), B(d), W(d, d), W(d, d), B(d), W(d, d), W(d, d), B(d)};
  m.conv_kernels = detail::glorot(rng, {dims.conv_channels, 2, dims.conv_width});
  m.conv_bias = B(dims.conv_channels);
  m.dec_proj = W(dims.conv_channels * d, d);
  m.dec_proj_bias = B(d);
  return m;
}

// Per-run execution context threaded through every forward pass.
struct RunContext {
  ad::Tape& tape;
  bool train_mode = false;
  std::mt19937_64* rng = nullptr;  // consumed by train-mode activations
  double rrelu_lo = 1.0 / 8.0;
  double rrelu_hi = 1.0 / 3.0;

  ad::Var act(const ad::Var& x) const {
    return ad::rrelu(tape, x, train_mode, rrelu_lo, rrelu_hi, rng);
  }
};

}  // namespace tkgx
