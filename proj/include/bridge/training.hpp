#pragma once

// Joint optimisation of L_C + L_G + L_R + lambda * |theta|^2 with Adam,
// validation-based early stopping and finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bridge/adam.hpp"
#include "bridge/config.hpp"
#include "bridge/dataset.hpp"
#include "bridge/eval.hpp"
#include "bridge/generator.hpp"
#include "bridge/itemgraph.hpp"
#include "bridge/model.hpp"
#include "bridge/retrieval.hpp"

namespace bridge {

struct TrainConfig {
  ModelConfig model;
  double learning_rate = 1e-3;
  double lambda_reg = 1e-5;
  std::size_t epochs = 100;
  std::size_t batch_size = 16;         // users per optimisation step
  std::size_t triple_batch = 0;        // size of each P and Q batch; 0 = number of users
  double alpha = 0.5;
  KRange k_range{2, 5};
  std::size_t patience = 10;
  std::size_t early_stop_k = 5;
  std::string instructions = "knn";    // knn | random
  std::uint64_t seed = 0;

  template <class F>
  void visit(F&& f) {
    f("learning_rate", learning_rate);
    f("lambda_reg", lambda_reg);
    f("epochs", epochs);
    f("batch_size", batch_size);
    f("triple_batch", triple_batch);
    f("alpha", alpha);
    f("k_min", k_range.min);
    f("k_max", k_range.max);
    f("patience", patience);
    f("early_stop_k", early_stop_k);
    f("instructions", instructions);
    f("seed", seed);
    f("embedding_dim", model.embedding_dim);
    f("layers", model.layers);
    f("d_model", model.d_model);
    f("blocks", model.blocks);
    f("heads", model.heads);
    f("max_len", model.max_len);
    f("temperature", model.temperature);
    f("init_tokens_from_graph", model.init_tokens_from_graph);
  }

  KeyValues to_key_values() const {
    TrainConfig copy = *this;
    return collect_key_values([&](auto&& f) { copy.visit(f); });
  }
  void apply(const KeyValues& kvs) {
    apply_key_values(kvs, [&](auto&& f) { visit(f); });
  }
  bool has_key(std::string_view key) {
    bool found = false;
    visit([&](std::string_view name, auto&) { found = found || name == key; });
    return found;
  }

  void validate() const {
    model.validate();
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(lambda_reg >= 0.0)) throw ConfigError("lambda_reg must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (k_range.min < 2 || k_range.min > k_range.max) throw ConfigError("k_min/k_max must satisfy 2 <= k_min <= k_max");
    if (k_range.max + 1 > model.max_len) throw ConfigError("k_max + 1 must not exceed max_len");
    if (early_stop_k < 1) throw ConfigError("early_stop_k must be >= 1");
    if (instructions != "knn" && instructions != "random") throw ConfigError("instructions must be knn or random");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double clustering = 0.0, generation = 0.0, recommendation = 0.0, total = 0.0;
  double validation = 0.0;  // R@early_stop_k on the validation split
};

inline void write_loss_csv(const std::vector<EpochRecord>& curve, std::ostream& os) {
  os << "epoch,L_C,L_G,L_R,total\n";
  for (const auto& r : curve)
    os << r.epoch << ',' << kv::format(r.clustering) << ',' << kv::format(r.generation) << ','
       << kv::format(r.recommendation) << ',' << kv::format(r.total) << '\n';
}

struct TrainState {
  TrainConfig cfg;
  BridgeModel model;
  Adam adam;
  std::mt19937_64 rng;
  std::size_t epoch = 0;
  double best_validation = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t bad_epochs = 0;
  bool stopped = false;
  std::vector<Matrix> best_params;  // parameter values at best_epoch; empty before the first validation
  std::vector<EpochRecord> curve;
};

// Model built from the training view with cfg.seed; nothing is trained yet.
inline TrainState init_state(const DatasetSplit& split, const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.cfg = cfg;
  s.rng.seed(cfg.seed);
  s.model = BridgeModel(cfg.model, split.train.Z, s.rng);
  s.adam = Adam(AdamConfig{cfg.learning_rate});
  return s;
}

// Parameters at the best validation epoch (the current ones if none recorded).
inline BridgeModel best_model(const TrainState& s) {
  BridgeModel m = s.model;
  if (!s.best_params.empty()) {
    auto params = m.params();
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = s.best_params[k];
    m.refresh();
  }
  return m;
}

// Sum of squared entries over all parameters.
inline double squared_norm(std::span<const Param* const> params) {
  double s = 0.0;
  for (const Param* p : params) s += squared_sum(p->value);
  return s;
}

// L_C + L_G + L_R + lambda * |theta|^2.
inline double combined_loss(double l_c, double l_g, double l_r, std::span<const Param* const> params, double lambda) {
  for (auto [name, v] : {std::pair{"L_C", l_c}, std::pair{"L_G", l_g}, std::pair{"L_R", l_r}})
    if (!std::isfinite(v)) throw TrainingError(std::string("non-finite ") + name + " (" + kv::format(v) + ")");
  const double reg = lambda * squared_norm(params);
  if (!std::isfinite(reg)) throw TrainingError("non-finite regularizer");
  return l_c + l_g + l_r + reg;
}

namespace detail {

inline std::optional<InstructiveBundle> instruction_for(const TrainState& s, const IdSet& history, Id user,
                                                        std::mt19937_64& rng) {
  const auto& m = s.model;
  if (s.cfg.instructions == "random")
    return build_random_instruction(m.num_items(), history, s.cfg.k_range, m.config().max_len, rng, user);
  return build_instruction(m.index(), history, s.cfg.k_range, m.config().max_len, rng, user);
}

}  // namespace detail

// Graph-side losses for one step: L_C on `ctriples`, L_R (cosine path) on
// `btriples` scored against each user's pseudo bundle. The catalog must
// outlive the tape.
struct GraphLosses {
  ad::Var clustering, recommendation;
};

inline GraphLosses graph_losses(ad::Tape& t, const BridgeModel& m, const BundleCatalog& catalog,
                                const std::vector<CorrelationTriple>& ctriples, const std::vector<BundleTriple>& btriples,
                                const std::vector<IdSet>& pseudo, const std::vector<IdSet>& histories, double alpha) {
  ad::Var r_hat = item_representations(t, m.index().graph(), m.index().r0(), m.index().layers());
  ad::Var lc = clustering_loss(t, r_hat, ctriples);
  std::vector<IdSet> qs;
  std::vector<bool> fallback;
  for (const auto& tr : btriples) {
    const bool empty = pseudo[tr.user].empty();
    qs.push_back(empty ? histories[tr.user] : pseudo[tr.user]);
    fallback.push_back(empty);
  }
  RecommendationBatch local(btriples, qs, catalog, m.num_items());
  for (std::size_t k = 0; k < fallback.size(); ++k)
    if (fallback[k]) local.zero_jaccard(k);
  const auto& batch = t.hold(std::move(local));
  ad::Var lr = recommendation_loss(t, r_hat, catalog, batch, alpha);
  return {lc, lr};
}

// Runs epochs until `s.epoch == until_epoch` or early stopping triggers.
inline void train(TrainState& s, const DatasetSplit& split, std::size_t until_epoch, std::ostream* log = nullptr) {
  if (s.stopped || s.epoch >= until_epoch) return;
  const auto& cfg = s.cfg;
  BridgeModel& m = s.model;
  const auto histories = all_histories(split.train);
  const std::size_t users = split.train.num_users;
  const std::size_t steps = (users + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t n_triples = cfg.triple_batch ? cfg.triple_batch : users;
  auto params = m.params();
  std::vector<Param*> gen_params;
  for (Param* p : m.generator().params()) gen_params.push_back(p);
  Param* r0 = &m.index().r0();

  m.refresh();
  BundleCatalog catalog(split.train.Y, m.index().r_hat());
  std::vector<IdSet> pseudo = generate_all(m, histories);

  while (s.epoch < until_epoch && !s.stopped) {
    std::vector<Id> order(users);
    for (std::size_t u = 0; u < users; ++u) order[u] = static_cast<Id>(u);
    std::shuffle(order.begin(), order.end(), s.rng);
    EpochRecord rec;
    rec.epoch = s.epoch + 1;
    for (std::size_t step = 0; step < steps; ++step) {
      for (Param* p : params) p->zero_grad();

      // L_G: mean over users of this step with a feasible instruction.
      std::vector<std::pair<Id, InstructiveBundle>> insts;
      for (std::size_t q = step * cfg.batch_size; q < std::min(users, (step + 1) * cfg.batch_size); ++q) {
        const Id u = order[q];
        if (auto inst = detail::instruction_for(s, histories[u], u, s.rng)) insts.emplace_back(u, std::move(*inst));
      }
      double l_g = 0.0;
      for (const auto& [u, inst] : insts) {
        ad::Tape t;
        ad::Var loss = generation_loss(t, m.generator(), histories[u], inst, &s.rng);
        t.backward(loss, 1.0 / static_cast<double>(insts.size()));
        t.add_grads_to(gen_params);
        l_g += t.scalar(loss) / static_cast<double>(insts.size());
      }

      // L_C and L_R share one pass through the graph.
      const auto ctriples = sample_triples(m.index().graph(), n_triples, s.rng);
      const auto btriples = sample_bundle_triples(split.train.X, n_triples, s.rng);
      ad::Tape t;
      auto [lc, lr] = graph_losses(t, m, catalog, ctriples, btriples, pseudo, histories, cfg.alpha);
      t.backward(ad::add(t, lc, lr));
      Param* r0_only[] = {r0};
      t.add_grads_to(r0_only);

      std::vector<const Param*> cparams(params.begin(), params.end());
      const double total = combined_loss(t.scalar(lc), l_g, t.scalar(lr), cparams, cfg.lambda_reg);
      for (Param* p : params) {
        if (!p->grad.same_shape(p->value)) p->grad = Matrix(p->value.rows, p->value.cols);
        for (std::size_t i = 0; i < p->value.size(); ++i) p->grad.data[i] += 2.0 * cfg.lambda_reg * p->value.data[i];
      }
      s.adam.step(params);
      m.refresh();

      const double w = 1.0 / static_cast<double>(steps);
      rec.clustering += w * t.scalar(lc);
      rec.generation += w * l_g;
      rec.recommendation += w * t.scalar(lr);
      rec.total += w * total;
    }
    ++s.epoch;

    catalog.refresh(m.index().r_hat());
    pseudo = generate_all(m, histories);
    const auto val = evaluate_queries(catalog, m.index().r_hat(), split.train.X, histories, pseudo, split.val,
                                      cfg.alpha, {cfg.early_stop_k});
    rec.validation = val.metrics.front().recall;
    s.curve.push_back(rec);
    if (rec.validation > s.best_validation) {
      s.best_validation = rec.validation;
      s.best_epoch = s.epoch;
      s.bad_epochs = 0;
      s.best_params.clear();
      for (const Param* p : params) s.best_params.push_back(p->value);
    } else if (++s.bad_epochs >= cfg.patience) {
      s.stopped = true;
    }
    if (log)
      *log << "epoch " << rec.epoch << " L_C=" << rec.clustering << " L_G=" << rec.generation
           << " L_R=" << rec.recommendation << " total=" << rec.total << " val_R@" << cfg.early_stop_k << "="
           << rec.validation << (s.stopped ? " (early stop)" : "") << '\n';
  }
}

inline TrainState train(const DatasetSplit& split, const TrainConfig& cfg, std::ostream* log = nullptr) {
  TrainState s = init_state(split, cfg);
  train(s, split, cfg.epochs, log);
  return s;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckEntry {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_error = 0.0;
};

// |a - n| / max(|a|, |n|, floor); the floor keeps entries that are zero in
// both forms from dividing noise by noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central differences on every entry of `params` for the scalar built by `loss(tape)`.
inline GradCheckReport gradient_check(std::span<Param* const> params, const std::function<ad::Var(ad::Tape&)>& loss,
                                      double eps = 1e-4) {
  ad::Tape t;
  ad::Var out = loss(t);
  t.backward(out);
  GradCheckReport rep;
  for (Param* p : params) {
    const Matrix g = t.param_grad(*p);
    GradCheckEntry e{p->name, p->value.size(), 0.0};
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data[i];
      auto eval = [&](double v) {
        p->value.data[i] = v;
        ad::Tape f(false);
        return f.scalar(loss(f));
      };
      const double fd = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps);
      p->value.data[i] = orig;
      e.max_rel_error = std::max(e.max_rel_error, relative_error(g.data[i], fd));
    }
    rep.max_rel_error = std::max(rep.max_rel_error, e.max_rel_error);
    rep.params.push_back(e);
  }
  return rep;
}

struct GradientSuite {
  GradCheckReport clustering, generation, recommendation, combined;
};

// Checks each loss on one fixed batch drawn from the model's state. The
// instruction comes from the first user with a feasible history.
inline GradientSuite gradient_check(BridgeModel& m, const DatasetSplit& split, const TrainConfig& cfg,
                                    std::size_t batch = 8, std::uint64_t seed = 1, double eps = 1e-4) {
  std::mt19937_64 rng(seed);
  m.refresh();
  const auto histories = all_histories(split.train);
  const BundleCatalog catalog(split.train.Y, m.index().r_hat());
  const auto pseudo = generate_all(m, histories);
  const auto ctriples = sample_triples(m.index().graph(), batch, rng);
  const auto btriples = sample_bundle_triples(split.train.X, batch, rng);
  std::optional<InstructiveBundle> inst;
  Id user = 0;
  for (; user < histories.size() && !inst; ++user)
    inst = build_instruction(m.index(), histories[user], cfg.k_range, m.config().max_len, rng, user);
  if (!inst) throw SamplingError("gradient_check: no user with a feasible instruction");
  const IdSet history = histories[user - 1];

  std::vector<Param*> r0{&m.index().r0()};
  std::vector<Param*> gen;
  for (Param* p : m.generator().params()) gen.push_back(p);
  auto graph = [&](ad::Tape& t) {
    return graph_losses(t, m, catalog, ctriples, btriples, pseudo, histories, cfg.alpha);
  };
  auto regularizer = [&](ad::Tape& t, const std::vector<Param*>& ps) {
    ad::Var s = t.constant(Matrix(1, 1));
    for (Param* p : ps) s = ad::add(t, s, ad::sum_squares(t, t.param(*p)));
    return ad::scale(t, s, cfg.lambda_reg);
  };

  GradientSuite out;
  out.clustering = gradient_check(r0, [&](ad::Tape& t) { return graph(t).clustering; }, eps);
  out.recommendation = gradient_check(r0, [&](ad::Tape& t) { return graph(t).recommendation; }, eps);
  out.generation = gradient_check(gen, [&](ad::Tape& t) { return generation_loss(t, m.generator(), history, *inst); }, eps);
  auto all = m.params();
  out.combined = gradient_check(
      all,
      [&](ad::Tape& t) {
        auto g = graph(t);
        ad::Var total = ad::add(t, ad::add(t, g.clustering, g.recommendation),
                                generation_loss(t, m.generator(), history, *inst));
        return ad::add(t, total, regularizer(t, all));
      },
      eps);
  return out;
}

}  // namespace bridge
