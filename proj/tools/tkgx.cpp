// Command-line front end: train / eval / gradcheck / synth / sweep.
// Exit codes: 0 success, 1 data or runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <limits>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tkgx/config.hpp"
#include "tkgx/data.hpp"
#include "tkgx/eval.hpp"
#include "tkgx/gradcheck.hpp"
#include "tkgx/manifest.hpp"
#include "tkgx/params.hpp"
#include "tkgx/training.hpp"

namespace fs = std::filesystem;
using namespace tkgx;

namespace {

// Tuning flags shared by train/eval/sweep. Precedence: explicit flag >
// --config file > --preset > the base config handed to resolve().
struct TuningOpts {
  std::string preset, config_file, data, checkpoint;
  int64_t d = 0, m = 0, omega = 0, heads = 0, k = 0, epochs = 0, patience = 0;
  double lr = 0;
  uint64_t seed = 0;
  std::vector<std::string> ablate;
  bool no_virtual_graph = false, use_static_filter = false;

  CLI::Option* o_preset = nullptr;
  CLI::Option* o_config = nullptr;
  CLI::Option* o_d = nullptr;
  CLI::Option* o_m = nullptr;
  CLI::Option* o_omega = nullptr;
  CLI::Option* o_heads = nullptr;
  CLI::Option* o_k = nullptr;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_epochs = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_patience = nullptr;
  CLI::Option* o_data = nullptr;
  CLI::Option* o_checkpoint = nullptr;

  void attach(CLI::App* c, bool with_data) {
    o_preset = c->add_option("--preset", preset, "named preset")->check(CLI::IsMember(preset_names()));
    o_config = c->add_option("--config", config_file, "key = value config file");
    o_d = c->add_option("--d", d, "embedding width");
    o_m = c->add_option("--m", m, "history window length");
    o_omega = c->add_option("--omega", omega, "message-passing layers per timestamp");
    o_heads = c->add_option("--heads", heads, "attention heads in the disentangler");
    o_k = c->add_option("--k", k, "virtual-graph facts sampled per query");
    o_lr = c->add_option("--lr", lr, "learning rate");
    o_epochs = c->add_option("--epochs", epochs, "max training epochs");
    o_seed = c->add_option("--seed", seed, "rng seed for init and training");
    o_patience = c->add_option("--patience", patience, "early-stop patience on valid MRR (0 = off)");
    c->add_option("--ablate", ablate, "disable a component; repeatable")
        ->check(CLI::IsMember({"multi-span", "disentangle", "virtual-graph"}));
    c->add_flag("--no-virtual-graph", no_virtual_graph, "score in a single pass, no virtual graph");
    c->add_flag("--static-filter", use_static_filter, "filter against facts from all timestamps");
    if (with_data)
      o_data = c->add_option("--data", data, "dataset directory, or 'synth' for the built-in benchmark");
    o_checkpoint = c->add_option("--checkpoint", checkpoint, "checkpoint path");
  }

  TrainConfig resolve(TrainConfig cfg = {}) const {
    if (o_preset->count()) apply_preset(cfg, preset);
    if (o_config->count()) apply_config_file(cfg, config_file);
    if (o_d->count()) cfg.d = d;
    if (o_m->count()) cfg.m = m;
    if (o_omega->count()) cfg.omega = omega;
    if (o_heads->count()) cfg.num_heads = heads;
    if (o_k->count()) cfg.k = k;
    if (o_lr->count()) cfg.learning_rate = lr;
    if (o_epochs->count()) cfg.max_epochs = epochs;
    if (o_seed->count()) cfg.seed = seed;
    if (o_patience->count()) cfg.patience = patience;
    if (o_data && o_data->count()) cfg.data_dir = data;
    if (o_checkpoint->count()) cfg.checkpoint_path = checkpoint;
    for (const auto& a : ablate) {
      if (a == "multi-span") cfg.multi_span = false;
      else if (a == "disentangle") cfg.disentangle = false;
      else if (a == "virtual-graph") cfg.virtual_graph = false;
    }
    if (no_virtual_graph) cfg.virtual_graph = false;
    if (use_static_filter) cfg.static_filter = true;
    return cfg;
  }
};

struct LoadedData {
  TkgDataset ds;
  std::string fingerprint;
};

// "synth" is a fixed periodic benchmark (20 entities, 2 relations, period 2,
// 200 timestamps, data seed 1), identical to `tkgx synth` with its defaults.
LoadedData load_data(const std::string& where) {
  if (where == "synth") {
    auto splits = gen_synthetic_splits(20, 2, 2, 200, 1);
    auto fp = fingerprint_splits(splits);
    return {build_dataset(splits.train, splits.valid, splits.test), fp};
  }
  return {load_dataset_dir(where), fingerprint_dataset_dir(where)};
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "valid") return Split::valid;
  if (name == "test") return Split::test;
  throw ParseError("unknown split '" + name + "'");
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void print_metrics(const char* tag, const MetricsReport& rep) {
  std::printf("%s: mrr %.6f  hits@1 %.6f  hits@3 %.6f  hits@10 %.6f  (%lld queries)\n", tag, rep.mrr,
              rep.hits.at(1), rep.hits.at(3), rep.hits.at(10), static_cast<long long>(rep.num_queries));
}

int run_train(const TuningOpts& t, const std::string& out_dir) {
  TrainConfig cfg = t.resolve();
  if (cfg.data_dir.empty()) throw ParseError("train: pass --data DIR (or --data synth)");
  if (cfg.checkpoint_path.empty()) cfg.checkpoint_path = (fs::path(out_dir) / "model.ckpt").string();
  validate(cfg);
  auto [ds, fp] = load_data(cfg.data_dir);

  const fs::path out(out_dir);
  fs::create_directories(out);
  const auto log_path = out / "train_log.jsonl";
  RunManifest mf{"train", cfg, fp, iso8601_utc_now(), "", {log_path.string(), cfg.checkpoint_path}};
  write_manifest(out / "manifest.json", mf);

  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write " + log_path.string());

  auto model = init_model(dims_for(ds, cfg), cfg.seed);
  AdamState adam;
  std::mt19937_64 rng(cfg.seed);
  auto entries = train_model(model, ds, cfg, adam, rng, 0, [&](const TrainLogEntry& e) {
    nlohmann::json j{{"epoch", e.epoch}, {"l_pred", e.l_pred}, {"l_dis", e.l_dis}, {"valid_mrr", e.valid_mrr}};
    log << j.dump() << '\n' << std::flush;
    save_checkpoint(cfg.checkpoint_path, model, adam, cfg, e.epoch, rng_text(rng));
    std::printf("epoch %lld  l_pred %.6f  l_dis %.6f  valid_mrr %.6f\n", static_cast<long long>(e.epoch),
                e.l_pred, e.l_dis, e.valid_mrr);
  });

  mf.finished = iso8601_utc_now();
  write_manifest(out / "manifest.json", mf);
  double best = 0;
  for (const auto& e : entries) best = std::max(best, e.valid_mrr);
  std::printf("done: %zu epochs, best valid mrr %.6f, checkpoint %s\n", entries.size(), best,
              cfg.checkpoint_path.c_str());
  return 0;
}

int run_eval(const TuningOpts& t, const std::string& ckpt, const std::string& split_name,
             const std::string& out_dir, bool want_csv) {
  CheckpointMeta meta = peek_checkpoint_meta(ckpt);
  TrainConfig cfg = t.resolve(meta.config);
  cfg.checkpoint_path = ckpt;
  validate(cfg);
  if (cfg.data_dir.empty()) throw ParseError("eval: checkpoint carries no data path; pass --data");
  auto [ds, fp] = load_data(cfg.data_dir);
  const Split split = parse_split(split_name);

  const fs::path out(out_dir);
  fs::create_directories(out);
  std::vector<std::string> outputs{(out / "metrics.json").string()};
  if (want_csv) outputs.push_back((out / "metrics.csv").string());
  RunManifest mf{"eval", cfg, fp, iso8601_utc_now(), "", outputs};
  write_manifest(out / "manifest.json", mf);

  auto model = init_model(dims_for(ds, cfg), cfg.seed);
  AdamState adam;
  load_checkpoint(ckpt, model, adam);

  auto rep = evaluate_split(model, ds, split, cfg);
  write_text(out / "metrics.json", metrics_to_json(rep).dump(2) + "\n");
  if (want_csv) write_text(out / "metrics.csv", metrics_to_csv(rep));

  mf.finished = iso8601_utc_now();
  write_manifest(out / "manifest.json", mf);
  print_metrics(split_name.c_str(), rep);
  return 0;
}

int run_gradcheck(uint64_t seed, double eps, double tol, const std::string& out_dir) {
  const fs::path out(out_dir);
  fs::create_directories(out);
  TrainConfig cfg;
  cfg.seed = seed;
  RunManifest mf{"gradcheck", cfg, "", iso8601_utc_now(), "", {(out / "report.json").string()}};
  write_manifest(out / "manifest.json", mf);

  auto rep = gradcheck_pipeline(seed, eps);
  nlohmann::json per;
  for (const auto& e : rep.per_tensor) {
    per[e.name] = e.max_rel_err;
    std::printf("%-28s %.3e\n", e.name.c_str(), e.max_rel_err);
  }
  std::printf("worst %.3e in %.2fs (tolerance %.1e)\n", rep.worst, rep.seconds, tol);
  write_text(out / "report.json",
             nlohmann::json{{"per_tensor", per}, {"worst", rep.worst}, {"seconds", rep.seconds}}.dump(2) + "\n");

  mf.finished = iso8601_utc_now();
  write_manifest(out / "manifest.json", mf);
  if (rep.worst >= tol) {
    std::fprintf(stderr, "gradient check failed:\n");
    for (const auto& e : rep.per_tensor)
      if (e.max_rel_err >= tol) std::fprintf(stderr, "  %s  %.3e\n", e.name.c_str(), e.max_rel_err);
    return 1;
  }
  return 0;
}

int run_synth(int64_t entities, int64_t relations, int64_t period, int64_t timesteps, uint64_t seed,
              const std::string& out_dir) {
  auto splits = gen_synthetic_splits(entities, relations, period, timesteps, seed);
  auto fp = fingerprint_splits(splits);

  const fs::path out(out_dir);
  fs::create_directories(out);
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.data_dir = out_dir;
  RunManifest mf{"synth", cfg, fp, iso8601_utc_now(), "",
                 {(out / "train.txt").string(), (out / "valid.txt").string(), (out / "test.txt").string(),
                  (out / "stats.json").string()}};
  write_manifest(out / "manifest.json", mf);

  write_dataset_dir(out, splits);
  auto ds = build_dataset(splits.train, splits.valid, splits.test);
  nlohmann::json stats{{"entities", ds.num_entities},
                       {"relations", ds.num_raw_relations},
                       {"timestamps", ds.num_timestamps},
                       {"period", period},
                       {"seed", seed},
                       {"train_quads", splits.train.size()},
                       {"valid_quads", splits.valid.size()},
                       {"test_quads", splits.test.size()}};
  write_text(out / "stats.json", stats.dump(2) + "\n");

  mf.finished = iso8601_utc_now();
  write_manifest(out / "manifest.json", mf);
  std::printf("wrote %zu train / %zu valid / %zu test quads to %s (fingerprint %s)\n", splits.train.size(),
              splits.valid.size(), splits.test.size(), out_dir.c_str(), fp.c_str());
  return 0;
}

int run_sweep(const TuningOpts& t, const std::string& param, const std::vector<int64_t>& values,
              const std::string& out_dir) {
  TrainConfig base = t.resolve();
  if (base.data_dir.empty()) throw ParseError("sweep: pass --data DIR (or --data synth)");
  if (param == "k" && !base.virtual_graph)
    throw ParseError("sweep over k is contradictory with the virtual graph disabled");
  validate(base);
  auto [ds, fp] = load_data(base.data_dir);

  const fs::path out(out_dir);
  fs::create_directories(out);
  const auto csv_path = out / "sweep.csv";
  RunManifest mf{"sweep", base, fp, iso8601_utc_now(), "", {csv_path.string()}};
  write_manifest(out / "manifest.json", mf);

  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv << "param,value,mrr,hits1,hits3,hits10\n";
  for (int64_t v : values) {
    TrainConfig cfg = base;
    if (param == "m") cfg.m = v;
    else if (param == "omega") cfg.omega = v;
    else cfg.k = v;
    validate(cfg);
    auto model = init_model(dims_for(ds, cfg), cfg.seed);
    AdamState adam;
    std::mt19937_64 rng(cfg.seed);
    train_model(model, ds, cfg, adam, rng);
    auto rep = evaluate_split(model, ds, Split::test, cfg);
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s,%lld,%.10g,%.10g,%.10g,%.10g\n", param.c_str(),
                  static_cast<long long>(v), rep.mrr, rep.hits.at(1), rep.hits.at(3), rep.hits.at(10));
    csv << buf << std::flush;
    std::printf("%s=%lld: mrr %.6f  hits@1 %.6f  hits@3 %.6f  hits@10 %.6f\n", param.c_str(),
                static_cast<long long>(v), rep.mrr, rep.hits.at(1), rep.hits.at(3), rep.hits.at(10));
  }

  mf.finished = iso8601_utc_now();
  write_manifest(out / "manifest.json", mf);
  std::printf("sweep written to %s\n", csv_path.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temporal knowledge graph extrapolation"};
  app.require_subcommand(1);
  int rc = 0;

  auto* c_train = app.add_subcommand("train", "train a model and checkpoint every epoch");
  TuningOpts t_train;
  t_train.attach(c_train, true);
  std::string train_out = "runs/train";
  c_train->add_option("--out", train_out, "output directory");
  c_train->callback([&] { rc = run_train(t_train, train_out); });

  auto* c_eval = app.add_subcommand("eval", "rank a split with a trained checkpoint");
  TuningOpts t_eval;
  t_eval.attach(c_eval, true);
  t_eval.o_checkpoint->required();
  std::string eval_split = "test", eval_out = "runs/eval";
  bool eval_csv = false;
  c_eval->add_option("--split", eval_split, "split to rank")->check(CLI::IsMember({"train", "valid", "test"}));
  c_eval->add_option("--out", eval_out, "output directory");
  c_eval->add_flag("--csv", eval_csv, "also write per-timestamp metrics.csv");
  c_eval->callback([&] { rc = run_eval(t_eval, t_eval.checkpoint, eval_split, eval_out, eval_csv); });

  auto* c_grad = app.add_subcommand("gradcheck", "finite-difference check of the full pipeline");
  uint64_t grad_seed = 7;
  double grad_eps = 1e-5, grad_tol = 1e-3;
  std::string grad_out = "runs/gradcheck";
  c_grad->add_option("--seed", grad_seed, "rng seed");
  c_grad->add_option("--eps", grad_eps, "finite-difference step");
  c_grad->add_option("--tol", grad_tol, "max relative error allowed");
  c_grad->add_option("--out", grad_out, "output directory");
  c_grad->callback([&] { rc = run_gradcheck(grad_seed, grad_eps, grad_tol, grad_out); });

  auto* c_synth = app.add_subcommand("synth", "generate a periodic synthetic dataset");
  int64_t sy_entities = 20, sy_relations = 2, sy_period = 2, sy_timesteps = 200;
  uint64_t sy_seed = 1;
  std::string sy_out;
  const auto at_least_one = CLI::Range(int64_t{1}, std::numeric_limits<int64_t>::max());
  c_synth->add_option("--entities", sy_entities, "entity count")->check(at_least_one);
  c_synth->add_option("--relations", sy_relations, "relation count")->check(at_least_one);
  c_synth->add_option("--period", sy_period, "repeat period in timestamps")->check(at_least_one);
  c_synth->add_option("--timesteps", sy_timesteps, "total timestamps")->check(at_least_one);
  c_synth->add_option("--seed", sy_seed, "generator seed");
  c_synth->add_option("--out", sy_out, "output dataset directory")->required();
  c_synth->callback(
      [&] { rc = run_synth(sy_entities, sy_relations, sy_period, sy_timesteps, sy_seed, sy_out); });

  auto* c_sweep = app.add_subcommand("sweep", "train/eval across one hyperparameter grid");
  TuningOpts t_sweep;
  t_sweep.attach(c_sweep, true);
  std::string sw_param, sw_out = "runs/sweep";
  std::vector<int64_t> sw_values;
  c_sweep->add_option("--param", sw_param, "hyperparameter to sweep")
      ->required()
      ->check(CLI::IsMember({"m", "omega", "k"}));
  c_sweep->add_option("--values", sw_values, "grid values")->required()->delimiter(',');
  c_sweep->add_option("--out", sw_out, "output directory");
  c_sweep->callback([&] { rc = run_sweep(t_sweep, sw_param, sw_values, sw_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return rc;
}
