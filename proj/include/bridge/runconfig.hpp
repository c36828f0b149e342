#pragma once

// Configuration for one CLI invocation: dataset and output locations,
// synthetic generation, splitting, training and evaluation keys in a single
// flat key=value namespace.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "bridge/config.hpp"
#include "bridge/dataset.hpp"
#include "bridge/errors.hpp"
#include "bridge/model.hpp"
#include "bridge/training.hpp"

namespace bridge {

struct RunConfig {
  std::string data_dir;
  std::string split_dir;   // empty: split data_dir with `seed`
  std::string out_dir = ".";
  std::string checkpoint;  // empty: <out_dir>/checkpoint.bin
  std::string ks = "1,2";
  std::string query = "generated";  // generated | history
  std::size_t top_k = 10;
  double split_train = 7.0, split_val = 1.0, split_test = 2.0;
  SyntheticConfig synth;
  TrainConfig train;

  template <class F>
  void visit(F&& f) {
    f("data_dir", data_dir);
    f("split_dir", split_dir);
    f("out_dir", out_dir);
    f("checkpoint", checkpoint);
    f("ks", ks);
    f("query", query);
    f("top_k", top_k);
    f("split_train", split_train);
    f("split_val", split_val);
    f("split_test", split_test);
    f("synth_users", synth.num_users);
    f("synth_items", synth.num_items);
    f("synth_bundles", synth.num_bundles);
    f("synth_categories", synth.num_categories);
    f("synth_noise", synth.noise_rate);
    f("synth_min_interactions", synth.interactions_per_user.min);
    f("synth_max_interactions", synth.interactions_per_user.max);
    f("synth_min_bundle_items", synth.items_per_bundle.min);
    f("synth_max_bundle_items", synth.items_per_bundle.max);
    f("synth_bundle_item_rate", synth.bundle_item_rate);
    f("synth_seed", synth.seed);
    train.visit(f);
  }

  void apply(const KeyValues& kvs) {
    apply_key_values(kvs, [&](auto&& f) { visit(f); });
  }
  KeyValues to_key_values() const {
    RunConfig copy = *this;
    return collect_key_values([&](auto&& f) { copy.visit(f); });
  }

  SplitRatios ratios() const { return {split_train, split_val, split_test}; }

  std::vector<std::size_t> k_list() const {
    std::vector<std::size_t> out;
    std::string_view rest = ks;
    while (!rest.empty()) {
      const auto comma = rest.find(',');
      const std::string item(trim(rest.substr(0, comma)));
      std::uint64_t k = 0;
      kv::parse("ks", item, k);
      if (k < 1) throw ConfigError("ks: every K must be >= 1");
      out.push_back(k);
      rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    }
    if (out.empty()) throw ConfigError("ks must list at least one K");
    return out;
  }

  QueryMode query_mode() const {
    if (query == "generated") return QueryMode::generated;
    if (query == "history") return QueryMode::history;
    throw ConfigError("query must be generated or history, got '" + query + "'");
  }

  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(out_dir) / "checkpoint.bin" : std::filesystem::path(checkpoint);
  }

  void validate() const {
    train.validate();
    synth.validate();
    k_list();
    query_mode();
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    if (!(split_train > 0.0 && split_val >= 0.0 && split_test >= 0.0)) throw ConfigError("invalid split ratios");
  }
};

inline KeyValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  return parse_key_values(in, path.string());
}

}  // namespace bridge
