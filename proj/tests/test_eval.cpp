#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "bridge/eval.hpp"
#include "bridge/training.hpp"
#include "oracles.hpp"
#include "planted.hpp"

using namespace bridge;

namespace {

std::vector<Id> random_ranking(std::size_t n, std::size_t len, std::mt19937_64& rng) {
  std::vector<Id> ids(n);
  std::iota(ids.begin(), ids.end(), Id{0});
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(len);
  return ids;
}

IdSet random_truth(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(1, 5);
  auto ids = random_ranking(n, len(rng), rng);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

TEST(Recall, Fixtures) {
  const std::vector<Id> ranked{3, 1, 7};
  EXPECT_EQ(recall_at_k(ranked, {1}, 2), 1.0);
  EXPECT_EQ(recall_at_k(ranked, {1, 9}, 2), 0.5);
  EXPECT_EQ(recall_at_k(ranked, {7}, 2), 0.0);
  EXPECT_EQ(recall_at_k(ranked, {7}, 3), 1.0);
  EXPECT_THROW(recall_at_k(ranked, {}, 2), std::invalid_argument);
}

TEST(Ndcg, Fixtures) {
  EXPECT_EQ(ndcg_at_k(std::vector<Id>{4, 2}, {4}, 2), 1.0);
  EXPECT_NEAR(ndcg_at_k(std::vector<Id>{2, 4}, {4}, 2), 0.630930, 1e-6);
  EXPECT_EQ(ndcg_at_k(std::vector<Id>{2, 4}, {4}, 2), 1.0 / std::log2(3.0));
  EXPECT_EQ(ndcg_at_k(std::vector<Id>{2, 4}, {9}, 2), 0.0);
  EXPECT_EQ(ndcg_at_k(std::vector<Id>{4, 9, 1}, {4, 9}, 2), 1.0);
  EXPECT_THROW(ndcg_at_k(std::vector<Id>{1}, {}, 1), std::invalid_argument);
}

TEST(Metrics, MatchBruteForceOracles) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto ranked = random_ranking(30, 10, rng);
    const IdSet truth = random_truth(30, rng);
    const std::set<Id> truth_set(truth.begin(), truth.end());
    for (std::size_t k : {1, 2, 5, 10}) {
      ASSERT_NEAR(ndcg_at_k(ranked, truth, k), oracle::brute_ndcg(ranked, truth_set, k), 1e-12);
      ASSERT_NEAR(recall_at_k(ranked, truth, k), oracle::brute_recall(ranked, truth_set, k), 1e-12);
    }
  }
}

TEST(Metrics, BoundedMonotoneAndPerfectOnlyWhenTopSlotsHit) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto ranked = random_ranking(20, 10, rng);
    const IdSet truth = random_truth(20, rng);
    double prev = 0.0;
    for (std::size_t k = 1; k <= 10; ++k) {
      const double r = recall_at_k(ranked, truth, k), n = ndcg_at_k(ranked, truth, k);
      ASSERT_LE(r, 1.0);
      ASSERT_LE(n, 1.0 + 1e-15);
      ASSERT_GE(r, prev);
      prev = r;
      bool all_hit = true;
      for (std::size_t s = 0; s < std::min(k, truth.size()); ++s)
        all_hit = all_hit && std::binary_search(truth.begin(), truth.end(), ranked[s]);
      ASSERT_EQ(std::abs(n - 1.0) < 1e-12, all_hit);
    }
  }
}

TEST(Metrics, InvariantUnderRelabelling) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const auto perm = random_ranking(25, 25, rng);
    const auto ranked = random_ranking(25, 8, rng);
    const IdSet truth = random_truth(25, rng);
    std::vector<Id> ranked2;
    for (Id b : ranked) ranked2.push_back(perm[b]);
    IdSet truth2;
    for (Id b : truth) truth2.push_back(perm[b]);
    std::sort(truth2.begin(), truth2.end());
    for (std::size_t k : {1, 3, 8}) {
      ASSERT_EQ(recall_at_k(ranked, truth, k), recall_at_k(ranked2, truth2, k));
      ASSERT_EQ(ndcg_at_k(ranked, truth, k), ndcg_at_k(ranked2, truth2, k));
    }
  }
}

// Each user's query is exactly their single truth bundle, so Jaccard-only
// ranking puts it first.
TEST(Evaluate, PerfectQueriesScoreOne) {
  std::mt19937_64 rng(4);
  const std::size_t items = 30, bundles = 12, users = 10;
  std::vector<std::vector<Id>> rows;
  for (std::size_t b = 0; b < bundles; ++b) rows.push_back({static_cast<Id>(2 * b), static_cast<Id>(2 * b + 1)});
  const auto y = BinaryMatrix::from_row_sets(items, rows);
  const Matrix r_hat = finalize({oracle::random_matrix(items, 4, rng)}).r_hat;
  const BundleCatalog catalog(y, r_hat);
  std::vector<IdSet> truth(users + 1), queries(users + 1), histories(users + 1);
  IdPairs train_pairs;
  for (Id u = 0; u < users; ++u) {
    truth[u] = {u};
    queries[u] = rows[u];
    histories[u] = {20, 21};
    train_pairs.emplace_back(u, (u + 1) % bundles);
  }
  histories[users] = {1};  // no truth
  const auto x = BinaryMatrix::from_pairs(users + 1, bundles, train_pairs);
  const auto res = evaluate_queries(catalog, r_hat, x, histories, queries, truth, 1.0, {1, 2});
  EXPECT_EQ(res.users_evaluated, users);
  EXPECT_EQ(res.excluded_empty_truth, 1u);
  for (const auto& m : res.metrics) {
    EXPECT_EQ(m.recall, 1.0);
    EXPECT_EQ(m.ndcg, 1.0);
  }
  // Masking the truth bundle as a train positive makes it unreachable.
  const auto masked = BinaryMatrix::from_pairs(users + 1, bundles, {{0, 0}});
  truth.assign(users + 1, {});
  truth[0] = {0};
  EXPECT_EQ(evaluate_queries(catalog, r_hat, masked, histories, queries, truth, 1.0, {5}).at(5).recall, 0.0);
  EXPECT_THROW(evaluate_queries(catalog, r_hat, x, histories, queries, truth, 1.0, {}), std::invalid_argument);
  EXPECT_THROW(evaluate_queries(catalog, r_hat, x, histories, queries, truth, 1.0, {0}), std::invalid_argument);
}

TEST(Evaluate, UserWithoutHistoryIsExcludedAndCounted) {
  const auto y = BinaryMatrix::from_row_sets(4, {{0, 1}, {2, 3}});
  const BundleCatalog catalog(y, Matrix::from_rows({{1, 0}, {0, 1}, {1, 1}, {-1, 0}}));
  const auto x = BinaryMatrix::from_pairs(2, 2, {});
  const auto res = evaluate_queries(catalog, catalog.embeddings, x, {{}, {0}}, {{}, {}}, {{0}, {1}}, 0.5, {1});
  EXPECT_EQ(res.users_evaluated, 1u);
  EXPECT_EQ(res.excluded_no_history, 1u);
}

// The untrained model should rank no better than chance. The reference is
// the distribution of mean R@5 when every user gets a uniformly random
// ranking of their unmasked bundles.
TEST(Evaluate, UntrainedModelMatchesRandomBaseline) {
  const auto sp = split(planted::dataset(), {}, 0);
  const TrainState s = init_state(sp, planted::config(0));
  const auto res = evaluate_test(s.model, sp, EvalOptions{{5}, 0.5, QueryMode::generated});

  const auto histories = all_histories(sp.train);
  std::mt19937_64 rng(99);
  std::vector<double> means;
  for (int rep = 0; rep < 2000; ++rep) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t u = 0; u < sp.test.size(); ++u) {
      if (sp.test[u].empty() || histories[u].empty()) continue;
      const auto masked = sp.train.X.row(u);
      std::vector<Id> candidates;
      for (Id b = 0; b < sp.train.num_bundles; ++b)
        if (!std::binary_search(masked.begin(), masked.end(), b)) candidates.push_back(b);
      std::shuffle(candidates.begin(), candidates.end(), rng);
      candidates.resize(5);
      sum += recall_at_k(candidates, sp.test[u], 5);
      ++n;
    }
    means.push_back(sum / static_cast<double>(n));
  }
  const double mu = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
  double var = 0.0;
  for (double m : means) var += (m - mu) * (m - mu);
  const double sigma = std::sqrt(var / static_cast<double>(means.size() - 1));
  EXPECT_LE(std::abs(res.at(5).recall - mu), 3.0 * sigma)
      << "untrained " << res.at(5).recall << ", random " << mu << " +- " << sigma;
}

TEST(Report, AggregateCsvAndTable) {
  EvalResult a, b;
  a.metrics = {{1, 0.2, 0.3}, {2, 0.4, 0.5}};
  b.metrics = {{1, 0.4, 0.1}, {2, 0.6, 0.7}};
  a.users_evaluated = b.users_evaluated = 10;
  const auto r = aggregate({0, 1}, {a, b});
  EXPECT_NEAR(r.mean[0].recall, 0.3, 1e-15);
  EXPECT_NEAR(r.mean[1].ndcg, 0.6, 1e-15);
  std::ostringstream csv;
  write_csv(r, csv);
  EXPECT_EQ(csv.str(),
            "seed,users,R@1,R@2,N@1,N@2\n"
            "0,10,0.200000,0.400000,0.300000,0.500000\n"
            "1,10,0.400000,0.600000,0.100000,0.700000\n"
            "mean,,0.300000,0.500000,0.200000,0.600000\n");
  const std::string table = format_table(r);
  EXPECT_NE(table.find("R@1"), std::string::npos);
  EXPECT_NE(table.find("BRIDGE"), std::string::npos);
  EXPECT_NE(table.find("0.3000"), std::string::npos);
  EXPECT_THROW(aggregate({0}, {}), std::invalid_argument);
}
