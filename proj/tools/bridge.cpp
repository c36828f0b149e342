// bridge: command-line entry point for the bundle recommendation pipeline.
//
//   bridge synth              --out DIR
//   bridge split              --data DIR --out DIR
//   bridge train              --data DIR [--split DIR] --out DIR [--resume]
//   bridge evaluate           --data DIR [--split DIR] --checkpoint PATH... --out DIR
//   bridge recommend          --data DIR --checkpoint PATH --users 0,3 --out DIR
//   bridge export-embeddings  --checkpoint PATH --out DIR
//   bridge stats              --data DIR [--out DIR]
//
// Settings resolve as defaults < --config file < --set key=value < flags.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bridge/checkpoint.hpp"
#include "bridge/dataset.hpp"
#include "bridge/eval.hpp"
#include "bridge/runconfig.hpp"
#include "bridge/training.hpp"

namespace fs = std::filesystem;
using namespace bridge;

namespace {

// Bad invocation: reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> sets;
  std::optional<std::string> data, split_dir;
  std::vector<std::string> checkpoints;
  std::vector<std::uint64_t> users;
  std::optional<std::string> ks;
  std::optional<std::size_t> top_k;
  std::optional<double> alpha;
  bool resume = false;
};

RunConfig resolve(const Options& o) {
  RunConfig rc;
  if (!o.config.empty()) {
    try {
      rc.apply(read_config_file(o.config));
    } catch (const ParseError& e) {
      throw ConfigError(e.what());
    }
  }
  KeyValues sets;
  for (const auto& s : o.sets) sets.push_back(split_assignment(s));
  rc.apply(sets);
  if (o.seed) rc.train.seed = *o.seed;
  if (o.out) rc.out_dir = *o.out;
  if (o.data) rc.data_dir = *o.data;
  if (o.split_dir) rc.split_dir = *o.split_dir;
  if (o.ks) rc.ks = *o.ks;
  if (o.top_k) rc.top_k = *o.top_k;
  if (o.alpha) rc.train.alpha = *o.alpha;
  if (o.checkpoints.size() == 1) rc.checkpoint = o.checkpoints.front();
  rc.validate();
  return rc;
}

InteractionDataset load_data(const RunConfig& rc) {
  if (rc.data_dir.empty()) throw UsageError("no dataset given (use --data or the data_dir key)");
  if (!fs::is_directory(rc.data_dir)) throw UsageError("dataset directory not found: " + rc.data_dir);
  return load_dir(rc.data_dir);
}

DatasetSplit make_split(const RunConfig& rc, const InteractionDataset& ds, std::uint64_t seed) {
  if (rc.split_dir.empty()) return split(ds, rc.ratios(), seed);
  if (!fs::is_directory(rc.split_dir)) throw UsageError("split directory not found: " + rc.split_dir);
  return load_split(ds, rc.split_dir);
}

TrainState read_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path.string());
  return load_checkpoint(path);
}

void check_compatible(const TrainState& s, const InteractionDataset& ds) {
  if (s.model.num_items() != ds.num_items)
    throw ValidationError("checkpoint has " + std::to_string(s.model.num_items()) + " items, dataset has " +
                          std::to_string(ds.num_items));
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string stats_json(const InteractionDataset& ds) {
  const DatasetStats s = stats(ds);
  nlohmann::ordered_json j;
  j["num_users"] = s.num_users;
  j["num_bundles"] = s.num_bundles;
  j["num_items"] = s.num_items;
  j["user_bundle_interactions"] = ds.X.nnz();
  j["bundle_item_pairs"] = ds.Y.nnz();
  j["user_item_interactions"] = ds.Z.nnz();
  j["user_item_density"] = s.ui_density;
  j["user_bundle_density"] = s.ub_density;
  j["avg_items_per_bundle"] = s.avg_items_per_bundle;
  j["avg_bundles_per_item"] = s.avg_bundles_per_item;
  j["avg_history_len"] = s.avg_history_len;
  return j.dump(2) + "\n";
}

int cmd_synth(const Options& o) {
  RunConfig rc = resolve(o);
  if (o.seed) rc.synth.seed = *o.seed;
  const auto ds = generate_synthetic(rc.synth);
  export_dir(ds, rc.out_dir);
  write_file(fs::path(rc.out_dir) / "stats.json", stats_json(ds));
  std::cout << "wrote " << ds.num_users << " users, " << ds.num_bundles << " bundles, " << ds.num_items
            << " items to " << rc.out_dir << '\n';
  return 0;
}

int cmd_split(const Options& o) {
  const RunConfig rc = resolve(o);
  const auto ds = load_data(rc);
  const auto sp = split(ds, rc.ratios(), rc.train.seed);
  export_split(sp, rc.out_dir);
  std::size_t val = 0, test = 0;
  for (const auto& v : sp.val) val += v.size();
  for (const auto& t : sp.test) test += t.size();
  std::cout << "train " << sp.train.X.nnz() << ", valid " << val << ", test " << test << " -> " << rc.out_dir << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig rc = resolve(o);
  const auto ds = load_data(rc);
  const auto sp = make_split(rc, ds, rc.train.seed);
  fs::create_directories(rc.out_dir);
  const fs::path ck = rc.checkpoint_path();
  TrainState s;
  if (o.resume) {
    s = read_checkpoint(ck);
    check_compatible(s, ds);
    s.cfg.epochs = rc.train.epochs;
    std::cerr << "resuming at epoch " << s.epoch << '\n';
  } else {
    s = init_state(sp, rc.train);
  }
  write_file(fs::path(rc.out_dir) / "config.txt", format_key_values(rc.to_key_values()));
  // One checkpoint per epoch, so a diverging run leaves the last good state on disk.
  save_checkpoint(s, ck);
  while (s.epoch < s.cfg.epochs && !s.stopped) {
    train(s, sp, s.epoch + 1, &std::cerr);
    save_checkpoint(s, ck);
    std::ostringstream csv;
    write_loss_csv(s.curve, csv);
    write_file(fs::path(rc.out_dir) / "loss.csv", csv.str());
  }
  std::ostringstream csv;
  write_loss_csv(s.curve, csv);
  write_file(fs::path(rc.out_dir) / "loss.csv", csv.str());
  std::cout << "trained " << s.epoch << " epochs (best " << s.best_epoch << "), checkpoint " << ck.string() << '\n';
  return 0;
}

int cmd_evaluate(const Options& o) {
  const RunConfig rc = resolve(o);
  const auto ds = load_data(rc);
  std::vector<std::string> paths = o.checkpoints;
  if (paths.empty()) paths.push_back(rc.checkpoint_path().string());
  std::vector<std::uint64_t> seeds;
  std::vector<EvalResult> results;
  for (const auto& path : paths) {
    const TrainState s = read_checkpoint(path);
    check_compatible(s, ds);
    const auto sp = make_split(rc, ds, s.cfg.seed);
    EvalOptions opt;
    opt.ks = rc.k_list();
    opt.alpha = o.alpha ? *o.alpha : s.cfg.alpha;
    opt.mode = rc.query_mode();
    results.push_back(evaluate_test(best_model(s), sp, opt));
    seeds.push_back(s.cfg.seed);
  }
  const auto report = aggregate(seeds, results);
  fs::create_directories(rc.out_dir);
  std::ostringstream csv;
  write_csv(report, csv);
  write_file(fs::path(rc.out_dir) / "report.csv", csv.str());
  const std::string table = format_table(report);
  write_file(fs::path(rc.out_dir) / "report.txt", table);
  std::cout << table;
  return 0;
}

int cmd_recommend(const Options& o) {
  const RunConfig rc = resolve(o);
  if (o.users.empty()) throw UsageError("recommend needs --users");
  const auto ds = load_data(rc);
  for (auto u : o.users)
    if (u >= ds.num_users)
      throw UsageError("unknown user id " + std::to_string(u) + " (dataset has " + std::to_string(ds.num_users) +
                       " users)");
  const TrainState s = read_checkpoint(rc.checkpoint_path());
  check_compatible(s, ds);
  const auto sp = make_split(rc, ds, s.cfg.seed);
  const BridgeModel model = best_model(s);
  const auto& r_hat = model.index().r_hat();
  const BundleCatalog catalog(sp.train.Y, r_hat);
  const double alpha = o.alpha ? *o.alpha : s.cfg.alpha;
  std::ostringstream os;
  char buf[64];
  for (auto u64 : o.users) {
    const Id u = static_cast<Id>(u64);
    const IdSet history = user_history(sp.train, u);
    IdSet pseudo;
    if (rc.query_mode() == QueryMode::history) {
      pseudo = history;
    } else if (!history.empty()) {
      pseudo = generate(model.generator(), history).items;
    }
    const Query q = make_query(pseudo, r_hat, history);
    os << u;
    for (const auto& sb : rank_topk(q, catalog, alpha, rc.top_k, sp.train.X.row(u))) {
      std::snprintf(buf, sizeof buf, " %u:%.6f", sb.bundle, sb.score);
      os << buf;
    }
    os << '\n';
  }
  fs::create_directories(rc.out_dir);
  write_file(fs::path(rc.out_dir) / "recommendations.txt", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_export_embeddings(const Options& o) {
  const RunConfig rc = resolve(o);
  const TrainState s = read_checkpoint(rc.checkpoint_path());
  const BridgeModel model = best_model(s);
  const Matrix& r = model.index().r_hat();
  std::ostringstream os;
  char buf[64];
  for (std::size_t i = 0; i < r.rows; ++i) {
    os << i;
    for (std::size_t c = 0; c < r.cols; ++c) {
      std::snprintf(buf, sizeof buf, " %.17g", r(i, c));
      os << buf;
    }
    os << '\n';
  }
  fs::create_directories(rc.out_dir);
  write_file(fs::path(rc.out_dir) / "embeddings.txt", os.str());
  std::cout << "wrote " << r.rows << " x " << r.cols << " embeddings to " << (fs::path(rc.out_dir) / "embeddings.txt").string()
            << '\n';
  return 0;
}

int cmd_stats(const Options& o) {
  const RunConfig rc = resolve(o);
  const std::string json = stats_json(load_data(rc));
  if (o.out) {
    fs::create_directories(rc.out_dir);
    write_file(fs::path(rc.out_dir) / "stats.json", json);
  }
  std::cout << json;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BRIDGE bundle recommendation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "key=value configuration file");
  app.add_option("--seed", o.seed, "random seed (synth: dataset seed; otherwise split and training seed)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--set", o.sets, "override one configuration key, key=value")->take_all();

  auto data = [&](CLI::App* sub) { sub->add_option("--data", o.data, "dataset directory"); };
  auto split_dir = [&](CLI::App* sub) {
    sub->add_option("--split", o.split_dir, "directory with user_bundle_{train,valid,test}.txt");
  };
  auto checkpoint = [&](CLI::App* sub) { sub->add_option("--checkpoint", o.checkpoints, "checkpoint file"); };

  auto* synth = app.add_subcommand("synth", "generate the planted synthetic dataset");
  auto* split_cmd = app.add_subcommand("split", "split user-bundle interactions 7:1:2 per user");
  data(split_cmd);
  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint.bin and loss.csv");
  data(train_cmd);
  split_dir(train_cmd);
  checkpoint(train_cmd);
  train_cmd->add_flag("--resume", o.resume, "continue from the checkpoint");
  auto* eval_cmd = app.add_subcommand("evaluate", "Recall@K and NDCG@K on the test split");
  data(eval_cmd);
  split_dir(eval_cmd);
  checkpoint(eval_cmd);
  eval_cmd->add_option("--ks", o.ks, "comma-separated K list (default 1,2)");
  eval_cmd->add_option("--alpha", o.alpha, "Jaccard weight (default: the checkpoint's)");
  auto* rec_cmd = app.add_subcommand("recommend", "top-K bundles for the given users");
  data(rec_cmd);
  split_dir(rec_cmd);
  checkpoint(rec_cmd);
  rec_cmd->add_option("--users", o.users, "user ids")->delimiter(',');
  rec_cmd->add_option("--top-k", o.top_k, "list length (default 10)");
  rec_cmd->add_option("--alpha", o.alpha, "Jaccard weight (default: the checkpoint's)");
  auto* emb_cmd = app.add_subcommand("export-embeddings", "write the normalized item embeddings");
  checkpoint(emb_cmd);
  auto* stats_cmd = app.add_subcommand("stats", "dataset statistics as JSON");
  data(stats_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train_cmd->parsed() || rec_cmd->parsed() || emb_cmd->parsed())
      if (o.checkpoints.size() > 1) throw UsageError("only one --checkpoint is accepted here");
    if (synth->parsed()) return cmd_synth(o);
    if (split_cmd->parsed()) return cmd_split(o);
    if (train_cmd->parsed()) return cmd_train(o);
    if (eval_cmd->parsed()) return cmd_evaluate(o);
    if (rec_cmd->parsed()) return cmd_recommend(o);
    if (emb_cmd->parsed()) return cmd_export_embeddings(o);
    if (stats_cmd->parsed()) return cmd_stats(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
