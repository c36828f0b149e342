#pragma once

// Item co-occurrence graph, propagated item embeddings, correlation scores,
// kNN clusters and the pairwise clustering loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bridge/autodiff.hpp"
#include "bridge/dataset.hpp"
#include "bridge/errors.hpp"
#include "bridge/sparse.hpp"
#include "bridge/tensor.hpp"

namespace bridge {

using CooccurrenceMatrix = Csr<std::int64_t>;

// C = Z^T Z: C[i][j] counts users that interacted with both i and j.
inline CooccurrenceMatrix build_cooccurrence(const BinaryMatrix& z) {
  const BinaryMatrix zt = z.transpose();  // item -> users
  const std::size_t n = z.cols();
  std::vector<std::vector<std::pair<std::uint32_t, std::int64_t>>> rows(n);
  std::vector<std::int64_t> acc(n, 0);
  std::vector<std::uint32_t> touched;
  for (std::size_t i = 0; i < n; ++i) {
    touched.clear();
    for (auto u : zt.row(i))
      for (auto j : z.row(u)) {
        if (acc[j] == 0) touched.push_back(j);
        ++acc[j];
      }
    std::sort(touched.begin(), touched.end());
    rows[i].reserve(touched.size());
    for (auto j : touched) {
      rows[i].emplace_back(j, acc[j]);
      acc[j] = 0;
    }
  }
  return CooccurrenceMatrix::from_rows(n, rows);
}

// Undirected item graph with an edge wherever C(i, j) > 0, i != j.
struct ItemGraph {
  std::size_t num_items = 0;
  std::vector<IdSet> neighbors;  // M_i, never contains i
  // Symmetric-normalised adjacency; isolated items carry a unit self-weight
  // so that propagation copies their embedding forward unchanged.
  Csr<double> propagation;

  static ItemGraph from_neighbors(std::vector<IdSet> nbrs) {
    ItemGraph g;
    g.num_items = nbrs.size();
    g.neighbors = std::move(nbrs);
    std::vector<std::vector<std::pair<std::uint32_t, double>>> rows(g.num_items);
    for (std::size_t i = 0; i < g.num_items; ++i) {
      const auto& mi = g.neighbors[i];
      if (mi.empty()) {
        rows[i].emplace_back(static_cast<std::uint32_t>(i), 1.0);
        continue;
      }
      const double di = std::sqrt(static_cast<double>(mi.size()));
      for (Id j : mi) rows[i].emplace_back(j, 1.0 / (di * std::sqrt(static_cast<double>(g.neighbors[j].size()))));
    }
    g.propagation = Csr<double>::from_rows(g.num_items, rows);
    return g;
  }

  static ItemGraph from_cooccurrence(const CooccurrenceMatrix& c) {
    std::vector<IdSet> nbrs(c.rows());
    for (std::size_t i = 0; i < c.rows(); ++i) {
      auto cols = c.row_cols(i);
      auto vals = c.row_values(i);
      for (std::size_t k = 0; k < cols.size(); ++k)
        if (cols[k] != i && vals[k] > 0) nbrs[i].push_back(cols[k]);
    }
    return from_neighbors(std::move(nbrs));
  }

  // Builds from an undirected edge list; self-loops and duplicates are dropped.
  static ItemGraph from_edges(std::size_t n, const std::vector<std::pair<Id, Id>>& edges) {
    std::vector<IdSet> nbrs(n);
    for (auto [a, b] : edges) {
      if (a >= n || b >= n) throw std::out_of_range("ItemGraph::from_edges: node out of range");
      if (a == b) continue;
      nbrs[a].push_back(b);
      nbrs[b].push_back(a);
    }
    for (auto& m : nbrs) {
      std::sort(m.begin(), m.end());
      m.erase(std::unique(m.begin(), m.end()), m.end());
    }
    return from_neighbors(std::move(nbrs));
  }

  bool adjacent(std::size_t i, std::size_t j) const {
    return std::binary_search(neighbors[i].begin(), neighbors[i].end(), static_cast<Id>(j));
  }

  std::size_t num_edges() const {
    std::size_t s = 0;
    for (const auto& m : neighbors) s += m.size();
    return s / 2;
  }
};

// Returns [r0, r1, ..., rL] where r(l) = P r(l-1).
inline std::vector<Matrix> propagate(const ItemGraph& g, const Matrix& r0, std::size_t layers) {
  if (r0.rows != g.num_items) throw std::invalid_argument("propagate: r0 row count does not match the graph");
  std::vector<Matrix> out;
  out.reserve(layers + 1);
  out.push_back(r0);
  for (std::size_t l = 0; l < layers; ++l) out.push_back(spmm(g.propagation, out.back()));
  return out;
}

struct FinalizedEmbeddings {
  Matrix r_star;           // layer average
  Matrix r_hat;            // unit-norm rows
  std::vector<Id> zero_rows;  // rows whose layer average vanished; left at zero
};

inline FinalizedEmbeddings finalize(const std::vector<Matrix>& layers) {
  if (layers.empty()) throw std::invalid_argument("finalize: no layers");
  FinalizedEmbeddings f;
  f.r_star = Matrix(layers.front().rows, layers.front().cols);
  for (const auto& l : layers) f.r_star += l;
  const double inv = 1.0 / static_cast<double>(layers.size());
  for (double& v : f.r_star.data) v *= inv;
  f.r_hat = Matrix(f.r_star.rows, f.r_star.cols);
  for (std::size_t i = 0; i < f.r_star.rows; ++i) {
    const double n = norm2(f.r_star.row(i));
    if (n == 0.0) {
      f.zero_rows.push_back(static_cast<Id>(i));
      continue;
    }
    for (std::size_t j = 0; j < f.r_star.cols; ++j) f.r_hat(i, j) = f.r_star(i, j) / n;
  }
  return f;
}

inline void warn_zero_rows(const FinalizedEmbeddings& f, std::ostream& os = std::cerr) {
  if (f.zero_rows.empty()) return;
  os << "warning: zero-norm item embeddings for items";
  for (Id i : f.zero_rows) os << ' ' << i;
  os << '\n';
}

// Correlation-to-distance map: d = 1 / exp(s).
inline double distance(double score) { return std::exp(-score); }

// Differentiable r_hat = normalize(mean_l P^l r0) on the tape.
inline ad::Var item_representations(ad::Tape& t, const ItemGraph& g, const Param& r0, std::size_t layers) {
  ad::Var cur = t.param(r0);
  ad::Var sum = cur;
  for (std::size_t l = 0; l < layers; ++l) {
    cur = ad::spmm(t, g.propagation, cur);
    sum = ad::add(t, sum, cur);
  }
  ad::Var mean = ad::scale(t, sum, 1.0 / static_cast<double>(layers + 1));
  return ad::row_normalize(t, mean);
}

// Trainable base embeddings plus the derived read-only index.
class ItemEmbeddingIndex {
 public:
  ItemEmbeddingIndex() = default;
  ItemEmbeddingIndex(ItemGraph graph, Param r0, std::size_t layers)
      : graph_(std::move(graph)), r0_(std::move(r0)), layers_(layers) {
    if (r0_.value.rows != graph_.num_items) throw std::invalid_argument("ItemEmbeddingIndex: r0 shape mismatch");
    refresh();
  }

  // Recomputes r_star / r_hat from the current r0.
  void refresh() { final_ = finalize(propagate(graph_, r0_.value, layers_)); }

  const ItemGraph& graph() const { return graph_; }
  Param& r0() { return r0_; }
  const Param& r0() const { return r0_; }
  std::size_t layers() const { return layers_; }
  std::size_t num_items() const { return graph_.num_items; }
  std::size_t dim() const { return r0_.value.cols; }
  const Matrix& r_star() const { return final_.r_star; }
  const Matrix& r_hat() const { return final_.r_hat; }
  const FinalizedEmbeddings& finalized() const { return final_; }

  double correlation(std::size_t i, std::size_t j) const { return dot(final_.r_hat.row(i), final_.r_hat.row(j)); }

  // The k items closest to `item` by distance, ascending; ties by ascending id.
  std::vector<Id> knn_cluster(std::size_t item, std::size_t k) const {
    const std::size_t n = num_items();
    if (item >= n) throw LookupError("unknown item " + std::to_string(item));
    if (k < 1 || k >= n) throw std::invalid_argument("knn_cluster: k must satisfy 1 <= k < num_items");
    std::vector<std::pair<double, Id>> cand;
    cand.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j)
      if (j != item) cand.emplace_back(distance(correlation(item, j)), static_cast<Id>(j));
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    std::vector<Id> out(k);
    for (std::size_t q = 0; q < k; ++q) out[q] = cand[q].second;
    return out;
  }

 private:
  ItemGraph graph_;
  Param r0_;
  std::size_t layers_ = 1;
  FinalizedEmbeddings final_;
};

// (anchor, positive, negative): positive shares an edge with anchor, negative does not.
struct CorrelationTriple {
  Id anchor = 0, positive = 0, negative = 0;
  friend bool operator==(const CorrelationTriple&, const CorrelationTriple&) = default;
};

// Anchors are uniform over items with at least one neighbour and one non-neighbour.
inline std::vector<CorrelationTriple> sample_triples(const ItemGraph& g, std::size_t batch, std::mt19937_64& rng) {
  std::vector<Id> anchors;
  for (std::size_t i = 0; i < g.num_items; ++i)
    if (!g.neighbors[i].empty() && g.neighbors[i].size() + 1 < g.num_items) anchors.push_back(static_cast<Id>(i));
  if (anchors.empty()) throw SamplingError("sample_triples: graph has no anchor with both an edge and a non-edge");
  std::uniform_int_distribution<std::size_t> pick_anchor(0, anchors.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_item(0, g.num_items - 1);
  std::vector<CorrelationTriple> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const Id i = anchors[pick_anchor(rng)];
    const auto& mi = g.neighbors[i];
    const Id j = mi[std::uniform_int_distribution<std::size_t>(0, mi.size() - 1)(rng)];
    Id neg;
    do neg = static_cast<Id>(pick_item(rng));
    while (neg == i || g.adjacent(i, neg));
    out.push_back({i, j, neg});
  }
  return out;
}

inline std::vector<CorrelationTriple> sample_triples(const ItemGraph& g, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_triples(g, batch, rng);
}

// Batch mean of -ln sigmoid(s_ij - s_ij'), which equals the distance form
// -ln sigmoid(ln(1/d_ij) - ln(1/d_ij')) under d = exp(-s).
inline ad::Var clustering_loss(ad::Tape& t, ad::Var r_hat, const std::vector<CorrelationTriple>& triples) {
  if (triples.empty()) throw std::invalid_argument("clustering_loss: empty batch");
  std::vector<std::size_t> anchors, pos, neg;
  for (const auto& tr : triples) {
    anchors.push_back(tr.anchor);
    pos.push_back(tr.positive);
    neg.push_back(tr.negative);
  }
  ad::Var s_pos = ad::row_dots(t, r_hat, r_hat, anchors, pos);
  ad::Var s_neg = ad::row_dots(t, r_hat, r_hat, anchors, neg);
  return ad::mean_all(t, ad::neg_log_sigmoid(t, ad::sub(t, s_pos, s_neg)));
}

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

// Evaluates the clustering loss for the current r0 and returns its gradient.
inline LossAndGrad clustering_loss(const ItemEmbeddingIndex& index, const std::vector<CorrelationTriple>& triples) {
  ad::Tape t;
  ad::Var r_hat = item_representations(t, index.graph(), index.r0(), index.layers());
  ad::Var loss = clustering_loss(t, r_hat, triples);
  t.backward(loss);
  return {t.scalar(loss), t.param_grad(index.r0())};
}

}  // namespace bridge
