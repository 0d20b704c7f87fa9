#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tkgx/config.hpp"
#include "tkgx/decoder.hpp"
#include "tkgx/disentangle.hpp"
#include "tkgx/eval.hpp"
#include "tkgx/params.hpp"

// Loss assembly, Adam, the window-per-step training loop, and checkpointing.
// One optimizer step per history window, windows in chronological order; the
// run rng drives train-mode activations only, so a (params, adam, rng) triple
// fully determines the rest of training.

namespace tkgx {

// Multi-label targets: y[q][o] = 1 for every true object of (s_q, r_q) in
// the query snapshot.
inline ad::Var build_labels(const std::vector<Triple>& queries, const SnapshotGraph& query_snap,
                            int64_t num_candidates) {
  std::map<std::pair<int64_t, int64_t>, std::vector<int64_t>> objects;
  for (const auto& e : query_snap.edges) objects[{e.subject, e.relation}].push_back(e.object);
  std::vector<double> y(queries.size() * static_cast<size_t>(num_candidates), 0.0);
  for (size_t qi = 0; qi < queries.size(); ++qi)
    for (int64_t o : objects.at({queries[qi].subject, queries[qi].relation}))
      y[qi * num_candidates + o] = 1.0;
  return ad::make_leaf({static_cast<int64_t>(queries.size()), num_candidates}, std::move(y));
}

// Mean over queries of the full binary cross-entropy against all candidates,
// scores clipped away from {0,1} before the logs.
inline ad::Var prediction_loss(const RunContext& ctx, const ad::Var& scores, const ad::Var& labels) {
  auto& t = ctx.tape;
  require(scores->shape == labels->shape, "prediction_loss: score/label shape mismatch");
  const double q = static_cast<double>(scores->shape[0]);
  auto p = ad::clip(t, scores, 1e-12, 1.0 - 1e-12);
  auto pos = ad::mul(t, labels, ad::vlog(t, p));
  auto neg = ad::mul(t, ad::one_minus(t, labels), ad::vlog(t, ad::one_minus(t, p)));
  return ad::affine(t, ad::sum_all(t, ad::add(t, pos, neg)), -1.0 / q, 0.0);
}

// Sum over consecutive computed stable factors of (1 - cosine) per node.
// Fewer than two factors (short windows, ablations) contribute exactly zero.
inline ad::Var disentangle_loss(const RunContext& ctx, const std::vector<ad::Var>& beta_seq) {
  auto& t = ctx.tape;
  if (beta_seq.size() < 2) return t.record(ad::scalar(0.0));
  ad::Var total;
  for (size_t i = 1; i < beta_seq.size(); ++i) {
    auto cos = ad::cosine_rows(t, beta_seq[i - 1], beta_seq[i]);
    auto term = ad::sum_all(t, ad::one_minus(t, cos));
    total = total ? ad::add(t, total, term) : term;
  }
  return total;
}

inline ad::Var total_loss(const RunContext& ctx, const ad::Var& pred, const ad::Var& dis) {
  return ad::add(ctx.tape, pred, dis);
}

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

inline void adam_step(const ModelState& model, AdamState& st, double lr) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (auto& [name, p] : model.named()) {
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.empty()) m.assign(p->val.size(), 0.0);
    if (v.empty()) v.assign(p->val.size(), 0.0);
    for (size_t i = 0; i < p->val.size(); ++i) {
      const double g = p->grad[i];
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      p->val[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
    }
  }
}

struct WindowLoss {
  double l_pred = 0, l_dis = 0;
};

// Forward + backward + one Adam step on a single history window.
inline WindowLoss train_window(const ModelState& model, const HistoryWindow& window,
                               const TrainConfig& config, AdamState& adam, std::mt19937_64& rng) {
  ad::Tape tape;
  RunContext ctx{tape, /*train_mode=*/true, &rng};
  const auto ab = ablation_of(config);
  auto run = evolve_window(ctx, model, window, ab);
  auto scores =
      decode_scores(ctx, model, run.state, window.queries, window.query_time, config.k, ab);
  auto labels = build_labels(window.queries, SnapshotGraph{window.query_time, window.queries},
                             model.dims.num_entities);
  auto l_pred = prediction_loss(ctx, scores, labels);
  auto l_dis = disentangle_loss(ctx, run.beta_seq);
  auto loss = total_loss(ctx, l_pred, l_dis);
  model.zero_grads();
  tape.backward(loss);
  adam_step(model, adam, config.learning_rate);
  // the optimized separation loss is the node sum; report it per node so the
  // logged value is comparable across graph sizes
  return {l_pred->val[0], l_dis->val[0] / static_cast<double>(model.dims.num_entities)};
}

struct EpochStats {
  double l_pred = 0, l_dis = 0;  // means over windows
  double wall_seconds = 0;
};

inline EpochStats train_epoch(const ModelState& model, const TkgDataset& ds, const TrainConfig& config,
                              AdamState& adam, std::mt19937_64& rng) {
  const auto t0 = std::chrono::steady_clock::now();
  auto windows = history_windows(ds, config.m, Split::train);
  require(!windows.empty(), "train_epoch: no training windows");
  EpochStats stats;
  for (const auto& w : windows) {
    auto wl = train_window(model, w, config, adam, rng);
    stats.l_pred += wl.l_pred;
    stats.l_dis += wl.l_dis;
  }
  stats.l_pred /= static_cast<double>(windows.size());
  stats.l_dis /= static_cast<double>(windows.size());
  stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

struct TrainLogEntry {
  int64_t epoch = 0;
  double l_pred = 0, l_dis = 0, valid_mrr = 0;
};

// Full training run with per-epoch validation MRR and optional early stopping
// on it (config.patience > 0). The callback fires after each epoch with the
// rng already advanced, so checkpoint writers see a resumable state.
inline std::vector<TrainLogEntry> train_model(
    const ModelState& model, const TkgDataset& ds, const TrainConfig& config, AdamState& adam,
    std::mt19937_64& rng, int64_t start_epoch = 0,
    const std::function<void(const TrainLogEntry&)>& on_epoch = {}) {
  std::vector<TrainLogEntry> log;
  double best_mrr = -1;
  int64_t since_best = 0;
  for (int64_t epoch = start_epoch + 1; epoch <= config.max_epochs; ++epoch) {
    auto stats = train_epoch(model, ds, config, adam, rng);
    TrainLogEntry entry{epoch, stats.l_pred, stats.l_dis, 0.0};
    entry.valid_mrr = evaluate_split(model, ds, Split::valid, config).mrr;
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (config.patience > 0) {
      if (entry.valid_mrr > best_mrr) {
        best_mrr = entry.valid_mrr;
        since_best = 0;
      } else if (++since_best >= config.patience) {
        break;
      }
    }
  }
  return log;
}

// ---- checkpointing -----------------------------------------------------------
// Layout: magic "TKGXCKPT", u32 version, u64 metadata length + flat key=value
// text (config, epoch, adam step, rng state), u64 tensor count, then per
// tensor: u32 name length, name, u32 rank, u64 dims, raw little-endian
// doubles. Adam moments ride along as "adam.m.<name>" / "adam.v.<name>".

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores raw little-endian doubles");

constexpr char kCkptMagic[8] = {'T', 'K', 'G', 'X', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

template <class T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

inline void write_tensor(std::ostream& out, const std::string& name, const ad::Shape& shape,
                         const std::vector<double>& vals) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<uint32_t>(out, static_cast<uint32_t>(shape.size()));
  for (int64_t dim : shape) write_pod<uint64_t>(out, static_cast<uint64_t>(dim));
  out.write(reinterpret_cast<const char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(double)));
}

}  // namespace detail

struct CheckpointMeta {
  TrainConfig config;
  int64_t epoch = 0;
  int64_t adam_step = 0;
  std::string rng_state;
};

namespace detail {

// Reads magic, version, and the metadata block, leaving the stream at the
// tensor count.
inline CheckpointMeta read_ckpt_header(std::istream& in, const std::string& path) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCkptMagic, sizeof magic) != 0)
    throw IoError("checkpoint: bad magic bytes in " + path);
  const auto version = read_pod<uint32_t>(in, "version");
  if (version != kCkptVersion)
    throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  const auto meta_len = read_pod<uint64_t>(in, "metadata length");
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw IoError("checkpoint: truncated metadata");

  CheckpointMeta cm;
  std::istringstream meta_in(meta);
  std::string line;
  while (std::getline(meta_in, line)) {
    size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key == "epoch") cm.epoch = std::stoll(value);
    else if (key == "adam_step") cm.adam_step = std::stoll(value);
    else if (key == "rng") cm.rng_state = value;
    else set_config_key(cm.config, key, value);
  }
  return cm;
}

}  // namespace detail

// Metadata without the tensor payload, e.g. to size a model before loading.
inline CheckpointMeta peek_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return detail::read_ckpt_header(in, path);
}

inline void save_checkpoint(const std::string& path, const ModelState& model, const AdamState& adam,
                            const TrainConfig& config, int64_t epoch, const std::string& rng_state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(detail::kCkptMagic, sizeof detail::kCkptMagic);
  detail::write_pod<uint32_t>(out, detail::kCkptVersion);
  std::string meta = config_text(config);
  meta += "epoch = " + std::to_string(epoch) + "\n";
  meta += "adam_step = " + std::to_string(adam.step) + "\n";
  meta += "rng = " + rng_state + "\n";
  detail::write_pod<uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));

  auto named = model.named();
  detail::write_pod<uint64_t>(out, named.size() * 3);
  for (const auto& [name, p] : named) {
    detail::write_tensor(out, name, p->shape, p->val);
    const auto& m = adam.m.count(name) ? adam.m.at(name) : std::vector<double>(p->val.size(), 0.0);
    const auto& v = adam.v.count(name) ? adam.v.at(name) : std::vector<double>(p->val.size(), 0.0);
    detail::write_tensor(out, "adam.m." + name, p->shape, m);
    detail::write_tensor(out, "adam.v." + name, p->shape, v);
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

// Loads into an already-built model (shapes fixed by config + data); any
// missing tensor, unknown tensor, or shape mismatch is reported by name.
inline CheckpointMeta load_checkpoint(const std::string& path, const ModelState& model, AdamState& adam) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  CheckpointMeta cm = detail::read_ckpt_header(in, path);
  adam.step = cm.adam_step;

  std::map<std::string, ad::Var> expected;
  for (auto& [name, p] : model.named()) expected[name] = p;
  std::map<std::string, std::vector<double>*> moments;
  for (auto& [name, p] : model.named()) {
    auto& m = adam.m[name];
    auto& v = adam.v[name];
    m.assign(p->val.size(), 0.0);
    v.assign(p->val.size(), 0.0);
    moments["adam.m." + name] = &m;
    moments["adam.v." + name] = &v;
  }
  std::set<std::string> seen;
  const auto count = detail::read_pod<uint64_t>(in, "tensor count");
  for (uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<uint32_t>(in, "tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw IoError("checkpoint: truncated tensor name");
    const auto rank = detail::read_pod<uint32_t>(in, "tensor rank");
    ad::Shape shape(rank);
    for (auto& dim : shape) dim = static_cast<int64_t>(detail::read_pod<uint64_t>(in, "tensor dim"));
    const std::string base = name.rfind("adam.m.", 0) == 0   ? name.substr(7)
                             : name.rfind("adam.v.", 0) == 0 ? name.substr(7)
                                                             : name;
    auto it = expected.find(base);
    if (it == expected.end()) throw IoError("checkpoint: unknown tensor '" + name + "'");
    if (it->second->shape != shape)
      throw IoError("checkpoint: tensor '" + name + "' has shape " + ad::shape_str(shape) +
                    " but the model expects " + ad::shape_str(it->second->shape));
    std::vector<double>* dst = name == base ? &it->second->val : moments.at(name);
    in.read(reinterpret_cast<char*>(dst->data()),
            static_cast<std::streamsize>(dst->size() * sizeof(double)));
    if (!in) throw IoError("checkpoint: truncated data for tensor '" + name + "'");
    seen.insert(name);
  }
  for (const auto& [name, p] : expected)
    if (!seen.count(name)) throw IoError("checkpoint: missing tensor '" + name + "'");
  return cm;
}

}  // namespace tkgx
