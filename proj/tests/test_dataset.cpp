#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "bridge/dataset.hpp"
#include "oracles.hpp"

using namespace bridge;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("bridge_test_dataset_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

InteractionDataset tiny(std::size_t bundles_per_user) {
  IdPairs ub, bi;
  for (Id b = 0; b < 12; ++b) bi.emplace_back(b, b % 4);
  for (Id b = 0; b < bundles_per_user; ++b) ub.emplace_back(0, b);
  return make_dataset(1, 12, 4, ub, bi, {});
}

}  // namespace

TEST(Load, ReadsPairsAndSizesFromMaxIds) {
  auto dir = scratch("load");
  write_text(dir / "ub.txt", "0 0\n0 1\n1 1\n");
  write_text(dir / "bi.txt", "0 0\n1 1\n");
  write_text(dir / "ui.txt", "1 0\n");
  auto ds = load_interactions(dir / "ub.txt", dir / "bi.txt", dir / "ui.txt");
  EXPECT_EQ(ds.X.nnz(), 3u);
  EXPECT_EQ(ds.num_users, 2u);
  EXPECT_EQ(ds.num_bundles, 2u);
  EXPECT_EQ(ds.num_items, 2u);
}

TEST(Load, DuplicateLinesCollapse) {
  auto dir = scratch("dup");
  write_text(dir / "ub.txt", "0 0\n0 0\n\n");
  write_text(dir / "bi.txt", "0 0\n");
  write_text(dir / "ui.txt", "");
  auto ds = load_interactions(dir / "ub.txt", dir / "bi.txt", dir / "ui.txt");
  EXPECT_EQ(ds.X.nnz(), 1u);
  EXPECT_TRUE(ds.X.contains(0, 0));
}

TEST(Load, MalformedLineReportsItsNumber) {
  auto dir = scratch("bad");
  write_text(dir / "ub.txt", "0 0\n0 x\n");
  write_text(dir / "bi.txt", "0 0\n");
  write_text(dir / "ui.txt", "");
  try {
    load_interactions(dir / "ub.txt", dir / "bi.txt", dir / "ui.txt");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line_number, 2u);
    EXPECT_NE(std::string(e.what()).find("'x'"), std::string::npos);
  }
  write_text(dir / "ub.txt", "0 -1\n");
  EXPECT_THROW(load_interactions(dir / "ub.txt", dir / "bi.txt", dir / "ui.txt"), ParseError);
  write_text(dir / "ub.txt", "0 1 2\n");
  EXPECT_THROW(load_interactions(dir / "ub.txt", dir / "bi.txt", dir / "ui.txt"), ParseError);
}

TEST(Load, EmptyBundleIsNamed) {
  auto dir = scratch("empty_bundle");
  write_text(dir / "ub.txt", "0 0\n0 2\n");
  write_text(dir / "bi.txt", "0 0\n2 1\n");
  write_text(dir / "ui.txt", "");
  try {
    load_interactions(dir / "ub.txt", dir / "bi.txt", dir / "ui.txt");
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("bundle 1"), std::string::npos);
  }
}

TEST(Load, ExportRoundTripsExactly) {
  SyntheticConfig cfg;
  cfg.num_users = 40;
  cfg.num_items = 60;
  cfg.num_bundles = 20;
  cfg.num_categories = 4;
  const auto ds = generate_synthetic(cfg);
  auto dir = scratch("roundtrip");
  export_dir(ds, dir);
  EXPECT_EQ(load_dir(dir), ds);
}

TEST(Split, TenInteractionsGoSevenOneTwo) {
  const auto s = split(tiny(10), {}, 3);
  EXPECT_EQ(s.train.X.row_nnz(0), 7u);
  EXPECT_EQ(s.val[0].size(), 1u);
  EXPECT_EQ(s.test[0].size(), 2u);
}

TEST(Split, ShortUsersKeepOneInTrain) {
  auto one = split(tiny(1), {}, 0);
  EXPECT_EQ(one.train.X.row_nnz(0), 1u);
  EXPECT_TRUE(one.val[0].empty());
  EXPECT_TRUE(one.test[0].empty());
  auto two = split(tiny(2), {}, 0);
  EXPECT_EQ(two.train.X.row_nnz(0), 1u);
  EXPECT_TRUE(two.val[0].empty());
  EXPECT_EQ(two.test[0].size(), 1u);
}

TEST(Split, IsADeterministicPartitionForEverySeed) {
  SyntheticConfig cfg;
  const auto ds = generate_synthetic(cfg);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = split(ds, {}, seed);
    for (std::size_t u = 0; u < ds.num_users; ++u) {
      std::multiset<Id> parts;
      for (Id b : s.train.X.row(u)) parts.insert(b);
      parts.insert(s.val[u].begin(), s.val[u].end());
      parts.insert(s.test[u].begin(), s.test[u].end());
      const auto all = ds.X.row(u);
      ASSERT_EQ(parts, std::multiset<Id>(all.begin(), all.end())) << "seed " << seed << " user " << u;
      const std::size_t n = all.size();
      if (n >= 3) {
        ASSERT_LE(std::abs(static_cast<double>(s.val[u].size()) - n * 0.1), 1.0);
        ASSERT_LE(std::abs(static_cast<double>(s.test[u].size()) - n * 0.2), 1.0);
      }
    }
  }
  const auto a = split(ds, {}, 42), b = split(ds, {}, 42);
  EXPECT_EQ(a.train.X, b.train.X);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);
}

TEST(Split, ExportedSplitReloads) {
  const auto ds = generate_synthetic(SyntheticConfig{});
  const auto s = split(ds, {}, 5);
  auto dir = scratch("split");
  export_split(s, dir);
  const auto back = load_split(ds, dir);
  EXPECT_EQ(back.train.X, s.train.X);
  EXPECT_EQ(back.val, s.val);
  EXPECT_EQ(back.test, s.test);
}

TEST(History, UnionOfDirectAndBundleItems) {
  auto ds = make_dataset(2, 2, 6, {{0, 0}, {1, 1}}, {{0, 2}, {0, 3}, {1, 5}}, {{0, 1}, {0, 2}});
  EXPECT_EQ(user_history(ds, 0), (IdSet{1, 2, 3}));
  EXPECT_EQ(user_history(ds, 1), (IdSet{5}));
  EXPECT_THROW(user_history(ds, 2), LookupError);
}

TEST(History, MatchesEnumerationOnRandomFixture) {
  std::mt19937_64 rng(17);
  auto x = oracle::random_binary(5, 6, 0.4, rng);
  auto y = oracle::random_binary(6, 9, 0.3, rng);
  for (std::size_t b = 0; b < 6; ++b) y[b][b] = 1;
  auto z = oracle::random_binary(5, 9, 0.25, rng);
  auto ds = make_dataset(5, 6, 9, oracle::to_pairs(x), oracle::to_pairs(y), oracle::to_pairs(z));
  for (std::size_t u = 0; u < 5; ++u) {
    std::set<Id> want;
    for (Id i = 0; i < 9; ++i) {
      if (z[u][i]) want.insert(i);
      for (std::size_t b = 0; b < 6; ++b)
        if (x[u][b] && y[b][i]) want.insert(i);
    }
    EXPECT_EQ(user_history(ds, u), IdSet(want.begin(), want.end())) << "user " << u;
    for (Id b : ds.X.row(u))
      for (Id i : ds.Y.row(b)) EXPECT_TRUE(std::binary_search(want.begin(), want.end(), i));
  }
}

TEST(Synthetic, NoiselessBundlesStayInOneCategory) {
  SyntheticConfig cfg;
  cfg.noise_rate = 0.0;
  const auto ds = generate_synthetic(cfg);
  for (std::size_t b = 0; b < ds.num_bundles; ++b) {
    std::set<std::size_t> cats;
    for (Id i : ds.Y.row(b)) cats.insert(i * cfg.num_categories / cfg.num_items);
    EXPECT_EQ(cats.size(), 1u) << "bundle " << b;
  }
}

TEST(Synthetic, SingleCategoryHoldsAllMass) {
  SyntheticConfig cfg;
  cfg.num_categories = 1;
  cfg.items_per_bundle = {3, 7};
  const auto ds = generate_synthetic(cfg);
  for (std::size_t i = 0; i < ds.num_items; ++i) EXPECT_EQ(category_of(i, ds.num_items, 1), 0u);
}

// Counts ordered co-interacted item pairs (i != j) per user from Z and the
// share whose two items fall in the same block of 500/8 consecutive ids.
TEST(Synthetic, PlantedConfigConcentratesCooccurrenceWithinCategories) {
  SyntheticConfig cfg;
  cfg.num_users = 200;
  cfg.num_items = 500;
  cfg.num_bundles = 120;
  cfg.num_categories = 8;
  cfg.noise_rate = 0.1;
  cfg.seed = 7;
  const auto ds = generate_synthetic(cfg);
  std::map<Id, std::vector<Id>> items_of_user;
  for (auto [u, i] : ds.Z.pairs()) items_of_user[u].push_back(i);
  long long same = 0, total = 0;
  for (const auto& [u, items] : items_of_user)
    for (Id i : items)
      for (Id j : items) {
        if (i == j) continue;
        ++total;
        same += (i * 8 / 500) == (j * 8 / 500);
      }
  ASSERT_GT(total, 0);
  EXPECT_GT(static_cast<double>(same) / static_cast<double>(total), 0.8);
}

TEST(Synthetic, DeterministicAndValidated) {
  SyntheticConfig cfg;
  EXPECT_EQ(generate_synthetic(cfg), generate_synthetic(cfg));
  SyntheticConfig bad = cfg;
  bad.items_per_bundle = {3, 100};
  EXPECT_THROW(generate_synthetic(bad), ConfigError);
  bad = cfg;
  bad.noise_rate = 1.5;
  EXPECT_THROW(generate_synthetic(bad), ConfigError);
  bad = cfg;
  bad.num_categories = 121;
  EXPECT_THROW(generate_synthetic(bad), ConfigError);
}

TEST(Stats, ClosedFormFixtures) {
  auto ds = make_dataset(2, 2, 6, {{0, 0}}, {{0, 0}, {0, 1}, {1, 2}, {1, 3}, {1, 4}, {1, 5}}, {{1, 0}});
  const auto s = stats(ds);
  EXPECT_DOUBLE_EQ(s.ub_density, 0.25);
  EXPECT_DOUBLE_EQ(s.avg_items_per_bundle, 3.0);
  EXPECT_DOUBLE_EQ(s.avg_bundles_per_item, 1.0);
  EXPECT_DOUBLE_EQ(s.ui_density, 1.0 / 12.0);
  EXPECT_DOUBLE_EQ(s.avg_history_len, 1.5);
}

TEST(Stats, SyntheticFixtureMatchesHandCount) {
  const auto ds = generate_synthetic(SyntheticConfig{});
  std::size_t x = 0, y = 0, z = 0;
  for (std::size_t u = 0; u < ds.num_users; ++u)
    for (std::size_t b = 0; b < ds.num_bundles; ++b) x += ds.X.contains(u, b);
  for (std::size_t b = 0; b < ds.num_bundles; ++b)
    for (std::size_t i = 0; i < ds.num_items; ++i) y += ds.Y.contains(b, i);
  for (std::size_t u = 0; u < ds.num_users; ++u)
    for (std::size_t i = 0; i < ds.num_items; ++i) z += ds.Z.contains(u, i);
  const auto s = stats(ds);
  EXPECT_DOUBLE_EQ(s.ub_density, static_cast<double>(x) / (200.0 * 120.0));
  EXPECT_DOUBLE_EQ(s.ui_density, static_cast<double>(z) / (200.0 * 500.0));
  EXPECT_DOUBLE_EQ(s.avg_items_per_bundle, static_cast<double>(y) / 120.0);
  EXPECT_GT(s.ui_density, 0.0);
  EXPECT_LE(s.ui_density, 1.0);
}
