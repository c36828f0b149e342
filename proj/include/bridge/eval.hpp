#pragma once

// Recall@K / NDCG@K over held-out user-bundle interactions and the reports
// built from them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridge/dataset.hpp"
#include "bridge/model.hpp"
#include "bridge/retrieval.hpp"

namespace bridge {

inline bool contains_sorted(const IdSet& s, Id x) { return std::binary_search(s.begin(), s.end(), x); }

// |top-K ∩ truth| / |truth|
inline double recall_at_k(std::span<const Id> ranked, const IdSet& truth, std::size_t k) {
  if (truth.empty()) throw std::invalid_argument("recall_at_k: empty truth");
  std::size_t hits = 0;
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) hits += contains_sorted(truth, ranked[r]);
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// DCG over hits in the top K with gain 1/log2(rank + 1), divided by the ideal DCG.
inline double ndcg_at_k(std::span<const Id> ranked, const IdSet& truth, std::size_t k) {
  if (truth.empty()) throw std::invalid_argument("ndcg_at_k: empty truth");
  double dcg = 0.0, idcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r)
    if (contains_sorted(truth, ranked[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  for (std::size_t r = 0; r < std::min(k, truth.size()); ++r) idcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / idcg;
}

struct MetricAtK {
  std::size_t k = 0;
  double recall = 0.0;
  double ndcg = 0.0;
};

struct EvalResult {
  std::vector<MetricAtK> metrics;
  std::size_t users_evaluated = 0;
  std::size_t excluded_empty_truth = 0;
  std::size_t excluded_no_history = 0;

  const MetricAtK& at(std::size_t k) const {
    for (const auto& m : metrics)
      if (m.k == k) return m;
    throw std::out_of_range("no metric for K=" + std::to_string(k));
  }
};

inline void check_ks(const std::vector<std::size_t>& ks) {
  if (ks.empty()) throw std::invalid_argument("K list must be non-empty");
  for (std::size_t k : ks)
    if (k < 1) throw std::invalid_argument("every K must be >= 1");
}

// Ranks every user with non-empty truth and history; train positives are masked.
// `queries[u]` is the item set scored for u (empty falls back to the history mean).
inline EvalResult evaluate_queries(const BundleCatalog& catalog, const Matrix& r_hat, const BinaryMatrix& x_train,
                                   const std::vector<IdSet>& histories, const std::vector<IdSet>& queries,
                                   const std::vector<IdSet>& truth, double alpha, const std::vector<std::size_t>& ks) {
  check_ks(ks);
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  EvalResult out;
  for (std::size_t k : ks) out.metrics.push_back({k, 0.0, 0.0});
  for (std::size_t u = 0; u < truth.size(); ++u) {
    if (truth[u].empty()) {
      ++out.excluded_empty_truth;
      continue;
    }
    if (histories[u].empty()) {
      ++out.excluded_no_history;
      continue;
    }
    const Query q = make_query(queries[u], r_hat, histories[u]);
    const auto top = rank_topk(q, catalog, alpha, kmax, x_train.row(u));
    std::vector<Id> ids;
    for (const auto& s : top) ids.push_back(s.bundle);
    for (auto& m : out.metrics) {
      m.recall += recall_at_k(ids, truth[u], m.k);
      m.ndcg += ndcg_at_k(ids, truth[u], m.k);
    }
    ++out.users_evaluated;
  }
  if (out.users_evaluated > 0)
    for (auto& m : out.metrics) {
      m.recall /= static_cast<double>(out.users_evaluated);
      m.ndcg /= static_cast<double>(out.users_evaluated);
    }
  return out;
}

struct EvalOptions {
  std::vector<std::size_t> ks{1, 2};
  double alpha = 0.5;
  QueryMode mode = QueryMode::generated;
};

inline EvalResult evaluate(const BridgeModel& model, const DatasetSplit& split, const std::vector<IdSet>& truth,
                           const EvalOptions& opt) {
  const auto histories = all_histories(split.train);
  const BundleCatalog catalog(split.train.Y, model.index().r_hat());
  const auto queries = query_sets(model, histories, opt.mode);
  return evaluate_queries(catalog, model.index().r_hat(), split.train.X, histories, queries, truth, opt.alpha, opt.ks);
}

inline EvalResult evaluate_test(const BridgeModel& model, const DatasetSplit& split, const EvalOptions& opt) {
  return evaluate(model, split, split.test, opt);
}

// ---------------------------------------------------------------------------
// Reports across seeds

struct EvalReport {
  std::vector<std::size_t> ks;
  std::vector<std::uint64_t> seeds;
  std::vector<EvalResult> per_seed;
  std::vector<MetricAtK> mean;
  std::string label = "BRIDGE";
};

inline EvalReport aggregate(std::vector<std::uint64_t> seeds, std::vector<EvalResult> results, std::string label = "BRIDGE") {
  if (seeds.size() != results.size() || results.empty()) throw std::invalid_argument("aggregate: one result per seed");
  EvalReport r;
  r.label = std::move(label);
  for (const auto& m : results.front().metrics) r.ks.push_back(m.k);
  r.seeds = std::move(seeds);
  r.per_seed = std::move(results);
  for (std::size_t k : r.ks) {
    MetricAtK m{k, 0.0, 0.0};
    for (const auto& res : r.per_seed) {
      m.recall += res.at(k).recall;
      m.ndcg += res.at(k).ndcg;
    }
    m.recall /= static_cast<double>(r.per_seed.size());
    m.ndcg /= static_cast<double>(r.per_seed.size());
    r.mean.push_back(m);
  }
  return r;
}

// One row per seed plus a "mean" row: seed,users,R@K...,N@K...
inline void write_csv(const EvalReport& r, std::ostream& os) {
  os << "seed,users";
  for (std::size_t k : r.ks) os << ",R@" << k;
  for (std::size_t k : r.ks) os << ",N@" << k;
  os << '\n' << std::fixed << std::setprecision(6);
  for (std::size_t s = 0; s < r.per_seed.size(); ++s) {
    os << r.seeds[s] << ',' << r.per_seed[s].users_evaluated;
    for (std::size_t k : r.ks) os << ',' << r.per_seed[s].at(k).recall;
    for (std::size_t k : r.ks) os << ',' << r.per_seed[s].at(k).ndcg;
    os << '\n';
  }
  os << "mean,";
  for (const auto& m : r.mean) os << ',' << m.recall;
  for (const auto& m : r.mean) os << ',' << m.ndcg;
  os << '\n';
}

// Metric x K columns, one model per row.
inline std::string format_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "Model";
  for (std::size_t k : r.ks) os << std::setw(10) << ("R@" + std::to_string(k));
  for (std::size_t k : r.ks) os << std::setw(10) << ("N@" + std::to_string(k));
  os << '\n' << std::setw(10) << r.label << std::fixed << std::setprecision(4);
  for (const auto& m : r.mean) os << std::setw(10) << m.recall;
  for (const auto& m : r.mean) os << std::setw(10) << m.ndcg;
  os << '\n';
  std::size_t users = 0;
  for (const auto& res : r.per_seed) users += res.users_evaluated;
  os << "seeds: " << r.seeds.size() << ", users evaluated per seed (mean): " << std::setprecision(1)
     << static_cast<double>(users) / static_cast<double>(r.per_seed.size());
  if (!r.per_seed.empty())
    os << ", excluded (empty truth / no history): " << r.per_seed.front().excluded_empty_truth << " / "
       << r.per_seed.front().excluded_no_history;
  os << '\n';
  return os.str();
}

}  // namespace bridge
