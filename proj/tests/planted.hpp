#pragma once

// Shared fixtures: the planted synthetic dataset with its training config,
// and a tiny model small enough for finite differences.

#include "bridge/dataset.hpp"
#include "bridge/training.hpp"

namespace planted {

inline bridge::InteractionDataset dataset() { return bridge::generate_synthetic(bridge::SyntheticConfig{}); }

inline bridge::TrainConfig config(std::uint64_t seed) {
  bridge::TrainConfig cfg;
  cfg.seed = seed;
  cfg.epochs = 100;
  cfg.batch_size = 4;
  cfg.patience = 10;
  cfg.early_stop_k = 5;
  return cfg;
}

// 20 items, d = 8, d_model = 8, one block, one head.
inline bridge::InteractionDataset tiny_dataset() {
  bridge::SyntheticConfig s;
  s.num_users = 16;
  s.num_items = 20;
  s.num_bundles = 8;
  s.num_categories = 2;
  s.interactions_per_user = {2, 4};
  s.items_per_bundle = {2, 4};
  s.seed = 3;
  return bridge::generate_synthetic(s);
}

inline bridge::TrainConfig tiny_config(std::uint64_t seed = 0) {
  bridge::TrainConfig cfg;
  cfg.seed = seed;
  cfg.model.embedding_dim = 8;
  cfg.model.d_model = 8;
  cfg.model.blocks = 1;
  cfg.model.heads = 1;
  cfg.model.max_len = 12;
  cfg.k_range = {2, 3};
  cfg.batch_size = 4;
  cfg.patience = 1000;
  return cfg;
}

}  // namespace planted
