#pragma once

// The trainable pair (item embedding index, generator) and the per-user
// queries built from it.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bridge/dataset.hpp"
#include "bridge/errors.hpp"
#include "bridge/generator.hpp"
#include "bridge/itemgraph.hpp"
#include "bridge/retrieval.hpp"

namespace bridge {

struct ModelConfig {
  std::size_t embedding_dim = 32;  // d
  std::size_t layers = 2;          // L
  std::size_t d_model = 32;
  std::size_t blocks = 1;          // B
  std::size_t heads = 2;           // H
  std::size_t max_len = 48;        // T
  double temperature = 1.0;        // beta
  bool init_tokens_from_graph = false;

  void validate() const {
    auto in_1_4 = [](std::size_t v) { return v >= 1 && v <= 4; };
    if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
    if (!in_1_4(layers)) throw ConfigError("layers must lie in [1, 4]");
    if (!in_1_4(blocks)) throw ConfigError("blocks must lie in [1, 4]");
    if (!in_1_4(heads)) throw ConfigError("heads must lie in [1, 4]");
    if (d_model < 1 || d_model % heads != 0) throw ConfigError("d_model must be a positive multiple of heads");
    if (max_len < 3) throw ConfigError("max_len must be >= 3");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (init_tokens_from_graph && d_model != embedding_dim)
      throw ConfigError("init_tokens_from_graph requires d_model == embedding_dim");
  }

  GeneratorConfig generator(std::size_t num_items) const {
    GeneratorConfig g;
    g.num_items = num_items;
    g.d_model = d_model;
    g.blocks = blocks;
    g.heads = heads;
    g.max_len = max_len;
    g.temperature = temperature;
    return g;
  }
};

class BridgeModel {
 public:
  BridgeModel() = default;

  // r0 ~ U(-1/sqrt(d), 1/sqrt(d)); the graph is built from the given user-item matrix.
  BridgeModel(const ModelConfig& cfg, const BinaryMatrix& z, std::mt19937_64& rng)
      : BridgeModel(cfg, ItemGraph::from_cooccurrence(build_cooccurrence(z)), rng) {}

  BridgeModel(const ModelConfig& cfg, ItemGraph graph, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t n = graph.num_items;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.embedding_dim));
    Param r0("graph.r0", uniform_matrix(n, cfg_.embedding_dim, bound, rng));
    index_ = ItemEmbeddingIndex(std::move(graph), std::move(r0), cfg_.layers);
    generator_ = GeneratorModel(cfg_.generator(n), rng);
    if (cfg_.init_tokens_from_graph) generator_.init_token_embeddings(index_.r_hat());
  }

  const ModelConfig& config() const { return cfg_; }
  ItemEmbeddingIndex& index() { return index_; }
  const ItemEmbeddingIndex& index() const { return index_; }
  GeneratorModel& generator() { return generator_; }
  const GeneratorModel& generator() const { return generator_; }
  std::size_t num_items() const { return index_.num_items(); }

  // r0 first, then the generator in its stable order.
  std::vector<Param*> params() {
    std::vector<Param*> out{&index_.r0()};
    for (Param* p : generator_.params()) out.push_back(p);
    return out;
  }
  std::vector<const Param*> params() const {
    auto mut = const_cast<BridgeModel*>(this)->params();
    return {mut.begin(), mut.end()};
  }

  void refresh() { index_.refresh(); }

 private:
  ModelConfig cfg_;
  ItemEmbeddingIndex index_;
  GeneratorModel generator_;
};

// Which item set stands in for the user at ranking time.
enum class QueryMode { generated, history };

inline std::string to_string(QueryMode m) { return m == QueryMode::generated ? "generated" : "history"; }

// Pseudo bundle per user (empty for users without history).
inline std::vector<IdSet> generate_all(const BridgeModel& model, const std::vector<IdSet>& histories) {
  std::vector<IdSet> out(histories.size());
  for (std::size_t u = 0; u < histories.size(); ++u) {
    if (histories[u].empty()) continue;
    auto items = generate(model.generator(), histories[u]).items;
    std::sort(items.begin(), items.end());
    out[u] = std::move(items);
  }
  return out;
}

inline std::vector<IdSet> query_sets(const BridgeModel& model, const std::vector<IdSet>& histories, QueryMode mode) {
  return mode == QueryMode::generated ? generate_all(model, histories) : histories;
}

}  // namespace bridge
