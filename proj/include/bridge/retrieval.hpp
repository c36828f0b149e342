#pragma once

// Scoring predefined bundles against a pseudo bundle: Jaccard overlap,
// cosine between mean-pooled item embeddings, their convex combination,
// top-K ranking and the pairwise recommendation loss.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "bridge/autodiff.hpp"
#include "bridge/dataset.hpp"
#include "bridge/errors.hpp"
#include "bridge/sparse.hpp"
#include "bridge/tensor.hpp"

namespace bridge {

inline std::size_t intersection_size(std::span<const Id> a, std::span<const Id> b) {
  std::size_t n = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

// |g ∩ b| / (|g| + |b| - |g ∩ b|) over sorted id sets; 0 when both are empty.
inline double jaccard(std::span<const Id> g, std::span<const Id> b) {
  const std::size_t inter = intersection_size(g, b);
  const std::size_t uni = g.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Mean of the r_hat rows of `items`.
inline std::vector<double> bundle_embedding(std::span<const Id> items, const Matrix& r_hat) {
  if (items.empty()) throw std::invalid_argument("bundle_embedding: empty item set");
  std::vector<double> out(r_hat.cols, 0.0);
  for (Id i : items) {
    if (i >= r_hat.rows) throw LookupError("unknown item " + std::to_string(i));
    for (std::size_t j = 0; j < r_hat.cols; ++j) out[j] += r_hat(i, j);
  }
  for (double& v : out) v /= static_cast<double>(items.size());
  return out;
}

// dot / (|a| |b|); a zero vector scores 0.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in [0, 1]");
}

inline double combined_score(double alpha, double y_jaccard, double y_cosine) {
  check_alpha(alpha);
  return alpha * y_jaccard + (1.0 - alpha) * y_cosine;
}

// Item sets and mean-pooled embeddings for every predefined bundle.
struct BundleCatalog {
  std::vector<IdSet> items;
  Matrix embeddings;            // |B| x d
  Csr<double> mean_operator;    // rows average the bundle's items

  BundleCatalog() = default;
  BundleCatalog(const BinaryMatrix& y, const Matrix& r_hat) {
    items.resize(y.rows());
    for (std::size_t b = 0; b < y.rows(); ++b) {
      auto row = y.row(b);
      if (row.empty()) throw ValidationError("bundle " + std::to_string(b) + " has no items");
      items[b].assign(row.begin(), row.end());
    }
    mean_operator = bridge::mean_operator(y.cols(), items);
    refresh(r_hat);
  }

  void refresh(const Matrix& r_hat) { embeddings = spmm(mean_operator, r_hat); }

  std::size_t size() const { return items.size(); }
  std::size_t bundle_size(std::size_t b) const { return items[b].size(); }
};

// A pseudo bundle prepared for scoring. An empty item set falls back to the
// mean embedding of the user's history for the cosine term.
struct Query {
  IdSet items;
  std::vector<double> embedding;
  bool fallback = false;
};

inline Query make_query(std::span<const Id> pseudo_items, const Matrix& r_hat, const IdSet& history) {
  Query q;
  q.items.assign(pseudo_items.begin(), pseudo_items.end());
  std::sort(q.items.begin(), q.items.end());
  q.items.erase(std::unique(q.items.begin(), q.items.end()), q.items.end());
  if (!q.items.empty()) {
    q.embedding = bundle_embedding(q.items, r_hat);
  } else if (!history.empty()) {
    q.embedding = bundle_embedding(history, r_hat);
    q.fallback = true;
  } else {
    q.embedding.assign(r_hat.cols, 0.0);
    q.fallback = true;
  }
  return q;
}

struct ScoredBundle {
  Id bundle = 0;
  double jaccard = 0.0;
  double cosine = 0.0;
  double score = 0.0;
};

inline ScoredBundle score_bundle(const Query& q, const BundleCatalog& catalog, Id b, double alpha) {
  ScoredBundle s;
  s.bundle = b;
  s.jaccard = jaccard(q.items, catalog.items[b]);
  s.cosine = cosine(q.embedding, catalog.embeddings.row(b));
  s.score = alpha * s.jaccard + (1.0 - alpha) * s.cosine;
  return s;
}

// Descending score, ties by ascending bundle id; bundles in `mask` are skipped.
inline std::vector<ScoredBundle> rank_topk(const Query& q, const BundleCatalog& catalog, double alpha, std::size_t k,
                                           std::span<const Id> mask) {
  check_alpha(alpha);
  if (k < 1) throw std::invalid_argument("rank_topk: K must be >= 1");
  std::vector<bool> masked(catalog.size(), false);
  for (Id b : mask)
    if (b < catalog.size()) masked[b] = true;
  std::vector<ScoredBundle> all;
  all.reserve(catalog.size());
  for (std::size_t b = 0; b < catalog.size(); ++b)
    if (!masked[b]) all.push_back(score_bundle(q, catalog, static_cast<Id>(b), alpha));
  const auto better = [](const ScoredBundle& x, const ScoredBundle& y) {
    return x.score != y.score ? x.score > y.score : x.bundle < y.bundle;
  };
  const std::size_t n = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), better);
  all.resize(n);
  return all;
}

// ---------------------------------------------------------------------------
// Recommendation loss

struct BundleTriple {
  Id user = 0, positive = 0, negative = 0;
  friend bool operator==(const BundleTriple&, const BundleTriple&) = default;
};

// One (positive, negative) draw for `user`; nullopt if the user has no
// positive or no negative bundle.
inline std::optional<BundleTriple> sample_bundle_triple(const BinaryMatrix& x_train, Id user, std::mt19937_64& rng) {
  auto pos = x_train.row(user);
  if (pos.empty() || pos.size() >= x_train.cols()) return std::nullopt;
  const Id p = pos[std::uniform_int_distribution<std::size_t>(0, pos.size() - 1)(rng)];
  std::uniform_int_distribution<std::size_t> any(0, x_train.cols() - 1);
  Id n;
  do n = static_cast<Id>(any(rng));
  while (std::binary_search(pos.begin(), pos.end(), n));
  return BundleTriple{user, p, n};
}

// Users are drawn uniformly among those with both a positive and a negative
// bundle. Users whose every bundle is positive are reported in `skipped`.
inline std::vector<BundleTriple> sample_bundle_triples(const BinaryMatrix& x_train, std::size_t batch,
                                                       std::mt19937_64& rng, std::vector<Id>* skipped = nullptr) {
  std::vector<Id> eligible;
  for (std::size_t u = 0; u < x_train.rows(); ++u) {
    const std::size_t n = x_train.row_nnz(u);
    if (n == 0) continue;
    if (n >= x_train.cols()) {
      if (skipped) skipped->push_back(static_cast<Id>(u));
      continue;
    }
    eligible.push_back(static_cast<Id>(u));
  }
  if (eligible.empty()) throw SamplingError("sample_bundle_triples: no user has both a positive and a negative bundle");
  std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
  std::vector<BundleTriple> out;
  out.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) out.push_back(*sample_bundle_triple(x_train, eligible[pick(rng)], rng));
  return out;
}

inline std::vector<BundleTriple> sample_bundle_triples(const BinaryMatrix& x_train, std::size_t batch, std::uint64_t seed,
                                                       std::vector<Id>* skipped = nullptr) {
  std::mt19937_64 rng(seed);
  return sample_bundle_triples(x_train, batch, rng, skipped);
}

struct PairwiseLoss {
  double loss = 0.0;
  std::vector<double> d_positive;  // dL / dy_pos
  std::vector<double> d_negative;  // dL / dy_neg
};

// Batch mean of -ln sigmoid(y_pos - y_neg) and its derivative w.r.t. each score.
inline PairwiseLoss recommendation_loss(std::span<const double> y_pos, std::span<const double> y_neg) {
  if (y_pos.size() != y_neg.size() || y_pos.empty()) throw std::invalid_argument("recommendation_loss: bad batch");
  PairwiseLoss out;
  const double n = static_cast<double>(y_pos.size());
  for (std::size_t k = 0; k < y_pos.size(); ++k) {
    const double diff = y_pos[k] - y_neg[k];
    out.loss += neg_log_sigmoid(diff) / n;
    const double g = -sigmoid(-diff) / n;
    out.d_positive.push_back(g);
    out.d_negative.push_back(-g);
  }
  return out;
}

// Triples plus the per-user queries they score against. The Jaccard parts
// are constants; only the cosine term depends on the embeddings.
struct RecommendationBatch {
  Csr<double> query_mean;  // one row per triple
  std::vector<std::size_t> query_row, positive, negative;
  std::vector<double> jaccard_positive, jaccard_negative;

  RecommendationBatch(const std::vector<BundleTriple>& triples, const std::vector<IdSet>& query_items,
                      const BundleCatalog& catalog, std::size_t num_items) {
    // query_items[k] is the set scored for triples[k]; it must be non-empty.
    std::vector<IdSet> rows;
    for (std::size_t k = 0; k < triples.size(); ++k) {
      const IdSet& q = query_items[k];
      if (q.empty()) throw std::invalid_argument("RecommendationBatch: empty query set");
      query_row.push_back(rows.size());
      rows.push_back(q);
      positive.push_back(triples[k].positive);
      negative.push_back(triples[k].negative);
    }
    query_mean = mean_operator(num_items, rows);
    for (std::size_t k = 0; k < triples.size(); ++k) {
      jaccard_positive.push_back(jaccard(query_items[k], catalog.items[triples[k].positive]));
      jaccard_negative.push_back(jaccard(query_items[k], catalog.items[triples[k].negative]));
    }
  }

  // A history fallback query (empty pseudo bundle) scores Jaccard 0.
  void zero_jaccard(std::size_t k) { jaccard_positive[k] = jaccard_negative[k] = 0.0; }
};

// y = alpha * J + (1 - alpha) * cos(b_hat, g_hat); loss = mean -ln sigmoid(y_pos - y_neg).
inline ad::Var recommendation_loss(ad::Tape& t, ad::Var r_hat, const BundleCatalog& catalog,
                                   const RecommendationBatch& batch, double alpha) {
  check_alpha(alpha);
  ad::Var bundles = ad::spmm(t, catalog.mean_operator, r_hat);
  ad::Var queries = ad::spmm(t, batch.query_mean, r_hat);
  ad::Var cos_pos = ad::row_cosines(t, bundles, queries, batch.positive, batch.query_row);
  ad::Var cos_neg = ad::row_cosines(t, bundles, queries, batch.negative, batch.query_row);
  ad::Var diff = ad::scale(t, ad::sub(t, cos_pos, cos_neg), 1.0 - alpha);
  Matrix jdiff(batch.positive.size(), 1);
  for (std::size_t k = 0; k < jdiff.rows; ++k)
    jdiff.data[k] = alpha * (batch.jaccard_positive[k] - batch.jaccard_negative[k]);
  diff = ad::add(t, diff, t.constant(std::move(jdiff)));
  return ad::mean_all(t, ad::neg_log_sigmoid(t, diff));
}

}  // namespace bridge
