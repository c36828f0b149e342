#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bridge/errors.hpp"
#include "bridge/sparse.hpp"

namespace bridge {

using Id = std::uint32_t;
using IdPairs = std::vector<std::pair<Id, Id>>;
using IdSet = std::vector<Id>;  // sorted, unique

// User-bundle (X), bundle-item (Y) and user-item (Z) binary interactions.
struct InteractionDataset {
  std::size_t num_users = 0;
  std::size_t num_bundles = 0;
  std::size_t num_items = 0;
  BinaryMatrix X;
  BinaryMatrix Y;
  BinaryMatrix Z;

  // Throws ValidationError when a bundle has no items.
  void validate() const {
    if (X.rows() != num_users || X.cols() != num_bundles) throw ValidationError("X has wrong shape");
    if (Y.rows() != num_bundles || Y.cols() != num_items) throw ValidationError("Y has wrong shape");
    if (Z.rows() != num_users || Z.cols() != num_items) throw ValidationError("Z has wrong shape");
    for (std::size_t b = 0; b < num_bundles; ++b)
      if (Y.row_nnz(b) == 0) throw ValidationError("bundle " + std::to_string(b) + " has no items");
  }

  friend bool operator==(const InteractionDataset&, const InteractionDataset&) = default;
};

inline InteractionDataset make_dataset(std::size_t users, std::size_t bundles, std::size_t items, IdPairs ub,
                                       IdPairs bi, IdPairs ui) {
  InteractionDataset ds;
  ds.num_users = users;
  ds.num_bundles = bundles;
  ds.num_items = items;
  try {
    ds.X = BinaryMatrix::from_pairs(users, bundles, std::move(ub));
    ds.Y = BinaryMatrix::from_pairs(bundles, items, std::move(bi));
    ds.Z = BinaryMatrix::from_pairs(users, items, std::move(ui));
  } catch (const std::out_of_range& e) {
    throw ValidationError(e.what());
  }
  ds.validate();
  return ds;
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::uint64_t parse_id(std::string_view tok, const std::string& path, std::size_t line_no) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size() || v > 0xFFFFFFFEull)
    throw ParseError(path, line_no, "expected a non-negative integer id, got '" + std::string(tok) + "'");
  return v;
}

}  // namespace detail

// Reads whitespace-separated integer id pairs, one per line. Blank lines are skipped.
inline IdPairs read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  IdPairs out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != 2) throw ParseError(path.string(), line_no, "expected two ids per line");
    out.emplace_back(static_cast<Id>(detail::parse_id(toks[0], path.string(), line_no)),
                     static_cast<Id>(detail::parse_id(toks[1], path.string(), line_no)));
  }
  return out;
}

inline void write_pairs(const std::filesystem::path& path, const std::vector<std::pair<std::uint32_t, std::uint32_t>>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (const auto& [a, b] : pairs) out << a << '\t' << b << '\n';
}

struct DatasetSizes {
  std::size_t users = 0, bundles = 0, items = 0;
};

// Size file: "num_users num_bundles num_items" on one line.
inline DatasetSizes read_sizes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != 3) throw ParseError(path.string(), line_no, "expected three counts");
    return {detail::parse_id(toks[0], path.string(), line_no), detail::parse_id(toks[1], path.string(), line_no),
            detail::parse_id(toks[2], path.string(), line_no)};
  }
  throw ParseError(path.string(), line_no, "empty size file");
}

// Ids are used as given; each dimension is max id + 1 unless a size file
// supplies it. Duplicate lines collapse to a single entry.
inline InteractionDataset load_interactions(const std::filesystem::path& ub_path, const std::filesystem::path& bi_path,
                                            const std::filesystem::path& ui_path,
                                            const std::optional<std::filesystem::path>& size_path = std::nullopt) {
  IdPairs ub = read_pairs(ub_path);
  IdPairs bi = read_pairs(bi_path);
  IdPairs ui = read_pairs(ui_path);
  DatasetSizes sz;
  if (size_path) {
    sz = read_sizes(*size_path);
  } else {
    for (auto [u, b] : ub) sz.users = std::max<std::size_t>(sz.users, u + 1), sz.bundles = std::max<std::size_t>(sz.bundles, b + 1);
    for (auto [b, i] : bi) sz.bundles = std::max<std::size_t>(sz.bundles, b + 1), sz.items = std::max<std::size_t>(sz.items, i + 1);
    for (auto [u, i] : ui) sz.users = std::max<std::size_t>(sz.users, u + 1), sz.items = std::max<std::size_t>(sz.items, i + 1);
  }
  return make_dataset(sz.users, sz.bundles, sz.items, std::move(ub), std::move(bi), std::move(ui));
}

struct DatasetPaths {
  std::filesystem::path user_bundle, bundle_item, user_item, sizes;

  static DatasetPaths in(const std::filesystem::path& dir) {
    return {dir / "user_bundle.txt", dir / "bundle_item.txt", dir / "user_item.txt", dir / "data_size.txt"};
  }
};

inline InteractionDataset load_dir(const std::filesystem::path& dir) {
  auto p = DatasetPaths::in(dir);
  std::optional<std::filesystem::path> sizes;
  if (std::filesystem::exists(p.sizes)) sizes = p.sizes;
  return load_interactions(p.user_bundle, p.bundle_item, p.user_item, sizes);
}

inline void export_dir(const InteractionDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto p = DatasetPaths::in(dir);
  write_pairs(p.user_bundle, ds.X.pairs());
  write_pairs(p.bundle_item, ds.Y.pairs());
  write_pairs(p.user_item, ds.Z.pairs());
  std::ofstream out(p.sizes, std::ios::binary);
  out << ds.num_users << '\t' << ds.num_bundles << '\t' << ds.num_items << '\n';
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 7.0, val = 1.0, test = 2.0;
};

struct DatasetSplit {
  InteractionDataset train;  // X restricted to training interactions
  std::vector<IdSet> val;    // per-user held-out bundles
  std::vector<IdSet> test;
  std::uint64_t seed = 0;
};

// Per-user shuffle then ratio cut. Users with fewer than three bundles keep
// one in train and send the rest to test.
inline DatasetSplit split(const InteractionDataset& ds, SplitRatios ratios = {}, std::uint64_t seed = 0) {
  const double total = ratios.train + ratios.val + ratios.test;
  if (!(ratios.train > 0 && ratios.val >= 0 && ratios.test >= 0)) throw ConfigError("invalid split ratios");
  std::mt19937_64 rng(seed);
  DatasetSplit out;
  out.seed = seed;
  out.val.resize(ds.num_users);
  out.test.resize(ds.num_users);
  IdPairs train_pairs;
  for (std::size_t u = 0; u < ds.num_users; ++u) {
    auto row = ds.X.row(u);
    std::vector<Id> bundles(row.begin(), row.end());
    std::shuffle(bundles.begin(), bundles.end(), rng);
    const std::size_t n = bundles.size();
    std::size_t n_val = 0, n_test = 0;
    if (n >= 3) {
      n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.val / total));
      n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.test / total));
      while (n_val + n_test >= n) (n_test > 0 ? n_test : n_val)--;
    } else if (n == 2) {
      n_test = 1;
    }
    const std::size_t n_train = n - n_val - n_test;
    for (std::size_t k = 0; k < n_train; ++k) train_pairs.emplace_back(static_cast<Id>(u), bundles[k]);
    out.val[u].assign(bundles.begin() + static_cast<std::ptrdiff_t>(n_train),
                      bundles.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test[u].assign(bundles.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), bundles.end());
    std::sort(out.val[u].begin(), out.val[u].end());
    std::sort(out.test[u].begin(), out.test[u].end());
  }
  out.train = ds;
  out.train.X = BinaryMatrix::from_pairs(ds.num_users, ds.num_bundles, std::move(train_pairs));
  return out;
}

inline IdPairs held_out_pairs(const std::vector<IdSet>& per_user) {
  IdPairs out;
  for (std::size_t u = 0; u < per_user.size(); ++u)
    for (Id b : per_user[u]) out.emplace_back(static_cast<Id>(u), b);
  return out;
}

inline void export_split(const DatasetSplit& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_pairs(dir / "user_bundle_train.txt", s.train.X.pairs());
  write_pairs(dir / "user_bundle_valid.txt", held_out_pairs(s.val));
  write_pairs(dir / "user_bundle_test.txt", held_out_pairs(s.test));
}

// Rebuilds a split from exported train/valid/test files over a loaded dataset.
inline DatasetSplit load_split(const InteractionDataset& ds, const std::filesystem::path& dir) {
  DatasetSplit s;
  s.val.resize(ds.num_users);
  s.test.resize(ds.num_users);
  auto check = [&](const IdPairs& pairs, const std::string& name) {
    for (auto [u, b] : pairs)
      if (u >= ds.num_users || b >= ds.num_bundles)
        throw ValidationError(name + ": pair (" + std::to_string(u) + ", " + std::to_string(b) + ") out of range");
  };
  IdPairs train = read_pairs(dir / "user_bundle_train.txt");
  IdPairs val = read_pairs(dir / "user_bundle_valid.txt");
  IdPairs test = read_pairs(dir / "user_bundle_test.txt");
  check(train, "train");
  check(val, "valid");
  check(test, "test");
  for (auto [u, b] : val) s.val[u].push_back(b);
  for (auto [u, b] : test) s.test[u].push_back(b);
  for (auto* v : {&s.val, &s.test})
    for (auto& row : *v) {
      std::sort(row.begin(), row.end());
      row.erase(std::unique(row.begin(), row.end()), row.end());
    }
  s.train = ds;
  s.train.X = BinaryMatrix::from_pairs(ds.num_users, ds.num_bundles, std::move(train));
  return s;
}

// Items the user touched directly (Z) united with the items of the user's
// bundles in X. Pass the training view to exclude held-out bundles.
inline IdSet user_history(const InteractionDataset& ds, std::size_t u) {
  if (u >= ds.num_users) throw LookupError("unknown user " + std::to_string(u));
  auto direct = ds.Z.row(u);
  IdSet out(direct.begin(), direct.end());
  for (Id b : ds.X.row(u)) {
    auto items = ds.Y.row(b);
    out.insert(out.end(), items.begin(), items.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline std::vector<IdSet> all_histories(const InteractionDataset& ds) {
  std::vector<IdSet> out(ds.num_users);
  for (std::size_t u = 0; u < ds.num_users; ++u) out[u] = user_history(ds, u);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data with planted categories

struct CountRange {
  std::size_t min = 1, max = 1;
};

struct SyntheticConfig {
  std::size_t num_users = 200;
  std::size_t num_items = 500;
  std::size_t num_bundles = 120;
  std::size_t num_categories = 8;
  double noise_rate = 0.1;
  CountRange interactions_per_user{4, 10};
  CountRange items_per_bundle{3, 7};
  // Probability that a user also interacts directly with each item of a bundle they adopted.
  double bundle_item_rate = 0.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (num_users < 1 || num_items < 1 || num_bundles < 1 || num_categories < 1)
      throw ConfigError("synthetic counts must be >= 1");
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw ConfigError("noise_rate must lie in [0, 1]");
    if (!(bundle_item_rate >= 0.0 && bundle_item_rate <= 1.0)) throw ConfigError("bundle_item_rate must lie in [0, 1]");
    if (num_categories > std::min(num_items, num_bundles))
      throw ConfigError("num_categories must not exceed min(num_items, num_bundles)");
    for (const auto& [name, r] : {std::pair{"interactions_per_user", interactions_per_user},
                                  std::pair{"items_per_bundle", items_per_bundle}})
      if (r.min < 1 || r.min > r.max) throw ConfigError(std::string(name) + " must satisfy 1 <= min <= max");
    if (items_per_bundle.max > num_items / num_categories)
      throw ConfigError("items_per_bundle exceeds the number of items in a category");
    if (interactions_per_user.max > num_bundles || interactions_per_user.max > num_items)
      throw ConfigError("interactions_per_user exceeds the catalog size");
  }
};

// Contiguous equal-size blocks; the first (n mod c) categories get one extra member.
inline std::size_t category_of(std::size_t index, std::size_t count, std::size_t categories) {
  return index * categories / count;
}

inline std::vector<std::vector<Id>> category_members(std::size_t count, std::size_t categories) {
  std::vector<std::vector<Id>> out(categories);
  for (std::size_t i = 0; i < count; ++i) out[category_of(i, count, categories)].push_back(static_cast<Id>(i));
  return out;
}

namespace detail {

// Draws `n` distinct ids; each draw comes from `home` with probability 1 - noise, otherwise from [0, universe).
inline std::vector<Id> draw_distinct(std::size_t n, const std::vector<Id>& home, std::size_t universe, double noise,
                                     std::mt19937_64& rng) {
  std::vector<Id> picked;
  std::bernoulli_distribution is_noise(noise);
  std::uniform_int_distribution<std::size_t> any(0, universe - 1);
  std::uniform_int_distribution<std::size_t> in_home(0, home.size() - 1);
  std::size_t home_left = home.size();
  while (picked.size() < n) {
    // Once the home pool is exhausted every draw comes from the universe.
    const bool from_home = home_left > 0 && !is_noise(rng);
    const Id cand = from_home ? home[in_home(rng)] : static_cast<Id>(any(rng));
    if (std::find(picked.begin(), picked.end(), cand) != picked.end()) continue;
    picked.push_back(cand);
    if (std::binary_search(home.begin(), home.end(), cand)) --home_left;
  }
  return picked;
}

}  // namespace detail

inline InteractionDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto items_by_cat = category_members(cfg.num_items, cfg.num_categories);
  const auto bundles_by_cat = category_members(cfg.num_bundles, cfg.num_categories);

  IdPairs bi;
  std::vector<std::vector<Id>> bundle_items(cfg.num_bundles);
  std::uniform_int_distribution<std::size_t> bundle_size(cfg.items_per_bundle.min, cfg.items_per_bundle.max);
  for (std::size_t b = 0; b < cfg.num_bundles; ++b) {
    const auto& home = items_by_cat[category_of(b, cfg.num_bundles, cfg.num_categories)];
    bundle_items[b] = detail::draw_distinct(bundle_size(rng), home, cfg.num_items, cfg.noise_rate, rng);
    for (Id i : bundle_items[b]) bi.emplace_back(static_cast<Id>(b), i);
  }

  IdPairs ub, ui;
  std::uniform_int_distribution<std::size_t> pick_cat(0, cfg.num_categories - 1);
  std::uniform_int_distribution<std::size_t> n_inter(cfg.interactions_per_user.min, cfg.interactions_per_user.max);
  std::bernoulli_distribution adopt_item(cfg.bundle_item_rate);
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    const std::size_t c = pick_cat(rng);
    const auto bundles = detail::draw_distinct(n_inter(rng), bundles_by_cat[c], cfg.num_bundles, cfg.noise_rate, rng);
    for (Id b : bundles) {
      ub.emplace_back(static_cast<Id>(u), b);
      for (Id i : bundle_items[b])
        if (adopt_item(rng)) ui.emplace_back(static_cast<Id>(u), i);
    }
    for (Id i : detail::draw_distinct(n_inter(rng), items_by_cat[c], cfg.num_items, cfg.noise_rate, rng))
      ui.emplace_back(static_cast<Id>(u), i);
  }
  return make_dataset(cfg.num_users, cfg.num_bundles, cfg.num_items, std::move(ub), std::move(bi), std::move(ui));
}

// ---------------------------------------------------------------------------
// Statistics

struct DatasetStats {
  std::size_t num_users = 0, num_bundles = 0, num_items = 0;
  double ui_density = 0.0;
  double ub_density = 0.0;
  double avg_items_per_bundle = 0.0;
  double avg_bundles_per_item = 0.0;
  double avg_history_len = 0.0;
};

inline DatasetStats stats(const InteractionDataset& ds) {
  DatasetStats s;
  s.num_users = ds.num_users;
  s.num_bundles = ds.num_bundles;
  s.num_items = ds.num_items;
  const auto U = static_cast<double>(ds.num_users), B = static_cast<double>(ds.num_bundles),
             V = static_cast<double>(ds.num_items);
  s.ui_density = static_cast<double>(ds.Z.nnz()) / (U * V);
  s.ub_density = static_cast<double>(ds.X.nnz()) / (U * B);
  s.avg_items_per_bundle = static_cast<double>(ds.Y.nnz()) / B;
  s.avg_bundles_per_item = static_cast<double>(ds.Y.nnz()) / V;
  double total = 0.0;
  for (std::size_t u = 0; u < ds.num_users; ++u) total += static_cast<double>(user_history(ds, u).size());
  s.avg_history_len = total / U;
  return s;
}

}  // namespace bridge
