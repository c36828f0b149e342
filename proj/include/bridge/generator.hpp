#pragma once

// Instruction construction and the encoder-decoder that emits a pseudo
// bundle conditioned on a user's history.
//
// Token layout: item ids occupy [0, |V|), followed by [pad], [sob], [eob].
// The encoder sees the history as a set (no positional encoding); the
// decoder uses learned positions over its prefix and a causal mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridge/autodiff.hpp"
#include "bridge/dataset.hpp"
#include "bridge/errors.hpp"
#include "bridge/itemgraph.hpp"
#include "bridge/tensor.hpp"

namespace bridge {

using Token = std::size_t;

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::size_t num_items) : num_items_(num_items) {}

  std::size_t size() const { return num_items_ + 3; }
  std::size_t num_items() const { return num_items_; }
  Token pad() const { return num_items_; }
  Token sob() const { return num_items_ + 1; }
  Token eob() const { return num_items_ + 2; }
  bool is_item(Token t) const { return t < num_items_; }

  Token encode(Id item) const {
    if (item >= num_items_) throw LookupError("unknown item " + std::to_string(item));
    return item;
  }
  Id decode(Token t) const {
    if (!is_item(t)) throw std::invalid_argument("reserved token " + std::to_string(t) + " is not an item");
    return static_cast<Id>(t);
  }

 private:
  std::size_t num_items_ = 0;
};

struct GeneratorConfig {
  std::size_t num_items = 0;
  std::size_t d_model = 32;
  std::size_t blocks = 1;
  std::size_t heads = 2;
  std::size_t max_len = 48;  // T: encoder history cap and decode step cap
  double temperature = 1.0;  // beta
  std::size_t ffn_mult = 4;

  void validate() const {
    if (num_items < 2) throw ConfigError("generator needs at least two items");
    if (d_model < 1 || heads < 1 || d_model % heads != 0) throw ConfigError("d_model must be a positive multiple of heads");
    if (blocks < 1) throw ConfigError("blocks must be >= 1");
    if (max_len < 2) throw ConfigError("max_len must be >= 2");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  }
};

struct LayerNormParams {
  Param gain, bias;
};

struct AttentionParams {
  Param wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FeedForwardParams {
  Param w1, b1, w2, b2;
};

struct EncoderBlock {
  LayerNormParams norm1;
  AttentionParams self_attn;
  LayerNormParams norm2;
  FeedForwardParams ffn;
};

struct DecoderBlock {
  LayerNormParams norm1;
  AttentionParams self_attn;
  LayerNormParams norm2;
  AttentionParams cross_attn;
  LayerNormParams norm3;
  FeedForwardParams ffn;
};

// Pre-norm Transformer encoder-decoder with a categorical output head.
class GeneratorModel {
 public:
  GeneratorModel() = default;

  // Weights and embeddings ~ U(-1/sqrt(d_model), 1/sqrt(d_model)); biases 0; norm gains 1.
  GeneratorModel(const GeneratorConfig& cfg, std::mt19937_64& rng) : cfg_(cfg), vocab_(cfg.num_items) {
    cfg_.validate();
    const std::size_t d = cfg_.d_model, h = d * cfg_.ffn_mult, v = vocab_.size();
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto weight = [&](const std::string& name, std::size_t r, std::size_t c) {
      return Param(name, uniform_matrix(r, c, bound, rng));
    };
    auto zeros = [](const std::string& name, std::size_t c) { return Param(name, Matrix(1, c)); };
    auto norm = [&](const std::string& name) {
      return LayerNormParams{Param(name + ".gain", Matrix(1, d, 1.0)), zeros(name + ".bias", d)};
    };
    auto attention = [&](const std::string& name) {
      return AttentionParams{weight(name + ".wq", d, d), zeros(name + ".bq", d), weight(name + ".wk", d, d),
                             zeros(name + ".bk", d),     weight(name + ".wv", d, d), zeros(name + ".bv", d),
                             weight(name + ".wo", d, d), zeros(name + ".bo", d)};
    };
    auto ffn = [&](const std::string& name) {
      return FeedForwardParams{weight(name + ".w1", d, h), zeros(name + ".b1", h), weight(name + ".w2", h, d),
                               zeros(name + ".b2", d)};
    };
    token_emb_ = weight("gen.token_emb", v, d);
    pos_emb_ = weight("gen.pos_emb", cfg_.max_len, d);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const std::string e = "gen.enc" + std::to_string(b), q = "gen.dec" + std::to_string(b);
      encoder_.push_back({norm(e + ".norm1"), attention(e + ".self"), norm(e + ".norm2"), ffn(e + ".ffn")});
      decoder_.push_back({norm(q + ".norm1"), attention(q + ".self"), norm(q + ".norm2"), attention(q + ".cross"),
                          norm(q + ".norm3"), ffn(q + ".ffn")});
    }
    enc_norm_ = norm("gen.enc_norm");
    dec_norm_ = norm("gen.dec_norm");
    w_out_ = weight("gen.w_out", d, v);
    b_out_ = zeros("gen.b_out", v);
  }

  const GeneratorConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  void set_temperature(double beta) {
    if (!(beta > 0.0)) throw ConfigError("temperature must be positive");
    cfg_.temperature = beta;
  }

  // Stable order used for checkpoints and optimisers.
  std::vector<Param*> params() {
    std::vector<Param*> out{&token_emb_, &pos_emb_};
    auto add_norm = [&](LayerNormParams& n) { out.insert(out.end(), {&n.gain, &n.bias}); };
    auto add_attn = [&](AttentionParams& a) {
      out.insert(out.end(), {&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo});
    };
    auto add_ffn = [&](FeedForwardParams& f) { out.insert(out.end(), {&f.w1, &f.b1, &f.w2, &f.b2}); };
    for (auto& b : encoder_) {
      add_norm(b.norm1);
      add_attn(b.self_attn);
      add_norm(b.norm2);
      add_ffn(b.ffn);
    }
    for (auto& b : decoder_) {
      add_norm(b.norm1);
      add_attn(b.self_attn);
      add_norm(b.norm2);
      add_attn(b.cross_attn);
      add_norm(b.norm3);
      add_ffn(b.ffn);
    }
    add_norm(enc_norm_);
    add_norm(dec_norm_);
    out.insert(out.end(), {&w_out_, &b_out_});
    return out;
  }

  std::vector<const Param*> params() const {
    auto mut = const_cast<GeneratorModel*>(this)->params();
    return {mut.begin(), mut.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Param* p : params()) n += p->value.size();
    return n;
  }

  // Copies item rows of `item_vectors` into the token table (dimensions must match).
  void init_token_embeddings(const Matrix& item_vectors) {
    if (item_vectors.rows != cfg_.num_items || item_vectors.cols != cfg_.d_model)
      throw ConfigError("item vectors must be num_items x d_model to seed token embeddings");
    std::copy(item_vectors.data.begin(), item_vectors.data.end(), token_emb_.value.data.begin());
  }

  // Encoder over history tokens; one memory row per token.
  ad::Var encode(ad::Tape& t, const std::vector<Token>& tokens) const {
    ad::Var x = ad::gather_rows(t, t.param(token_emb_), {tokens.begin(), tokens.end()});
    for (const auto& b : encoder_) {
      x = ad::add(t, x, attention(t, layer_norm(t, x, b.norm1), std::nullopt, b.self_attn, false));
      x = ad::add(t, x, feed_forward(t, layer_norm(t, x, b.norm2), b.ffn));
    }
    return layer_norm(t, x, enc_norm_);
  }

  // Decoder logits for every prefix position (or just the last one).
  ad::Var decode(ad::Tape& t, ad::Var memory, const std::vector<Token>& prefix, bool last_only) const {
    std::vector<std::size_t> positions(prefix.size());
    for (std::size_t i = 0; i < prefix.size(); ++i) positions[i] = i;
    ad::Var y = ad::add(t, ad::gather_rows(t, t.param(token_emb_), {prefix.begin(), prefix.end()}),
                        ad::gather_rows(t, t.param(pos_emb_), positions));
    for (const auto& b : decoder_) {
      y = ad::add(t, y, attention(t, layer_norm(t, y, b.norm1), std::nullopt, b.self_attn, true));
      y = ad::add(t, y, attention(t, layer_norm(t, y, b.norm2), memory, b.cross_attn, false));
      y = ad::add(t, y, feed_forward(t, layer_norm(t, y, b.norm3), b.ffn));
    }
    y = layer_norm(t, y, dec_norm_);
    if (last_only) y = ad::gather_rows(t, y, {prefix.size() - 1});
    return linear(t, y, w_out_, b_out_);
  }

  // Per-block key/value rows of the tokens decoded so far, plus the
  // projected memory for cross-attention.
  struct DecodeCache {
    std::vector<Matrix> self_k, self_v, cross_k, cross_v;
    std::size_t length = 0;
  };

  DecodeCache start_decoding(const Matrix& memory) const {
    DecodeCache c;
    ad::Tape t(false);
    ad::Var mem = t.constant(memory);
    for (const auto& b : decoder_) {
      c.self_k.emplace_back();
      c.self_v.emplace_back();
      c.cross_k.push_back(t.value(linear(t, mem, b.cross_attn.wk, b.cross_attn.bk)));
      c.cross_v.push_back(t.value(linear(t, mem, b.cross_attn.wv, b.cross_attn.bv)));
    }
    return c;
  }

  // Feeds `tok` at the next position and returns the logits that follow it.
  // Matches decode(..., last_only = true) on the full prefix.
  std::vector<double> next_logits(DecodeCache& c, Token tok) const {
    if (c.length >= cfg_.max_len) throw std::invalid_argument("decode cache is full");
    if (tok >= vocab_.size()) throw std::invalid_argument("token out of range");
    ad::Tape t(false);
    ad::Var y = ad::add(t, ad::gather_rows(t, t.param(token_emb_), {tok}), ad::gather_rows(t, t.param(pos_emb_), {c.length}));
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      const auto& b = decoder_[i];
      ad::Var h = layer_norm(t, y, b.norm1);
      append_row(c.self_k[i], t.value(linear(t, h, b.self_attn.wk, b.self_attn.bk)));
      append_row(c.self_v[i], t.value(linear(t, h, b.self_attn.wv, b.self_attn.bv)));
      y = ad::add(t, y, mix_heads(t, linear(t, h, b.self_attn.wq, b.self_attn.bq), t.constant(c.self_k[i]),
                                  t.constant(c.self_v[i]), b.self_attn, false));
      h = layer_norm(t, y, b.norm2);
      y = ad::add(t, y, mix_heads(t, linear(t, h, b.cross_attn.wq, b.cross_attn.bq), t.constant(c.cross_k[i]),
                                  t.constant(c.cross_v[i]), b.cross_attn, false));
      y = ad::add(t, y, feed_forward(t, layer_norm(t, y, b.norm3), b.ffn));
    }
    ++c.length;
    const Matrix& out = t.value(linear(t, layer_norm(t, y, dec_norm_), w_out_, b_out_));
    return out.data;
  }

 private:
  ad::Var linear(ad::Tape& t, ad::Var x, const Param& w, const Param& b) const {
    return ad::add_row(t, ad::matmul(t, x, t.param(w)), t.param(b));
  }

  ad::Var layer_norm(ad::Tape& t, ad::Var x, const LayerNormParams& n) const {
    return ad::layer_norm(t, x, t.param(n.gain), t.param(n.bias));
  }

  ad::Var feed_forward(ad::Tape& t, ad::Var x, const FeedForwardParams& f) const {
    return linear(t, ad::relu(t, linear(t, x, f.w1, f.b1)), f.w2, f.b2);
  }

  // Multi-head attention; keys/values come from `kv` when given, else from `x`.
  ad::Var attention(ad::Tape& t, ad::Var x, std::optional<ad::Var> kv, const AttentionParams& a, bool causal) const {
    const ad::Var src = kv.value_or(x);
    return mix_heads(t, linear(t, x, a.wq, a.bq), linear(t, src, a.wk, a.bk), linear(t, src, a.wv, a.bv), a, causal);
  }

  ad::Var mix_heads(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, const AttentionParams& a, bool causal) const {
    const std::size_t dh = cfg_.d_model / cfg_.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> heads;
    heads.reserve(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      ad::Var qh = ad::slice_cols(t, q, h * dh, dh);
      ad::Var kh = ad::slice_cols(t, k, h * dh, dh);
      ad::Var vh = ad::slice_cols(t, v, h * dh, dh);
      ad::Var w = ad::softmax_rows(t, ad::scale(t, ad::matmul_nt(t, qh, kh), scale), causal);
      heads.push_back(ad::matmul(t, w, vh));
    }
    ad::Var merged = heads.size() == 1 ? heads.front() : ad::concat_cols(t, heads);
    return linear(t, merged, a.wo, a.bo);
  }

  static void append_row(Matrix& m, const Matrix& row) {
    if (m.empty()) m = Matrix(0, row.cols);
    m.data.insert(m.data.end(), row.data.begin(), row.data.end());
    ++m.rows;
  }

  GeneratorConfig cfg_;
  Vocabulary vocab_;
  Param token_emb_, pos_emb_;
  std::vector<EncoderBlock> encoder_;
  std::vector<DecoderBlock> decoder_;
  LayerNormParams enc_norm_, dec_norm_;
  Param w_out_, b_out_;
};

// ---------------------------------------------------------------------------
// Instructions

struct InstructiveBundle {
  std::vector<Id> items;  // anchor first, then its nearest neighbours
  Id anchor = 0;
  Id source_user = 0;
};

struct KRange {
  std::size_t min = 2, max = 5;
};

// Legal instruction sizes for a history of n items: [max(2, min), min(max, n - 1)],
// further capped so that [sob] + k items fits in `max_len`.
inline std::pair<std::size_t, std::size_t> instruction_size_bounds(std::size_t n, KRange range, std::size_t max_len) {
  const std::size_t hi = std::min({range.max, n - 1, max_len - 1});
  const std::size_t lo = std::min(std::max<std::size_t>(2, range.min), hi);
  return {lo, hi};
}

// Returns nullopt when the history is too short (n < 3) for 1 < k < n.
inline std::optional<InstructiveBundle> build_instruction(const ItemEmbeddingIndex& index, const IdSet& history,
                                                          KRange range, std::size_t max_len, std::mt19937_64& rng,
                                                          Id user = 0) {
  const std::size_t n = history.size();
  if (n < 3 || max_len < 3) return std::nullopt;
  InstructiveBundle inst;
  inst.source_user = user;
  inst.anchor = history[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)];
  auto [lo, hi] = instruction_size_bounds(n, range, max_len);
  const std::size_t k = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  inst.items.push_back(inst.anchor);
  for (Id j : index.knn_cluster(inst.anchor, k - 1)) inst.items.push_back(j);
  return inst;
}

// Ablation variant: k items drawn uniformly from the whole catalogue, ignoring correlation.
inline std::optional<InstructiveBundle> build_random_instruction(std::size_t num_items, const IdSet& history,
                                                                 KRange range, std::size_t max_len,
                                                                 std::mt19937_64& rng, Id user = 0) {
  const std::size_t n = history.size();
  if (n < 3 || max_len < 3) return std::nullopt;
  auto [lo, hi] = instruction_size_bounds(n, range, std::min(max_len, num_items + 1));
  const std::size_t k = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  InstructiveBundle inst;
  inst.source_user = user;
  std::uniform_int_distribution<std::size_t> any(0, num_items - 1);
  while (inst.items.size() < k) {
    const Id c = static_cast<Id>(any(rng));
    if (std::find(inst.items.begin(), inst.items.end(), c) == inst.items.end()) inst.items.push_back(c);
  }
  inst.anchor = inst.items.front();
  return inst;
}

// ---------------------------------------------------------------------------
// Encoding, decoding, training step and greedy generation

// Histories longer than T keep a seeded uniform sample when `rng` is given,
// otherwise the first T ids.
inline std::vector<Token> history_tokens(const GeneratorModel& m, const IdSet& history, std::mt19937_64* rng = nullptr) {
  if (history.empty()) throw std::invalid_argument("history must be non-empty");
  const std::size_t cap = m.config().max_len;
  std::vector<Id> kept = history;
  if (kept.size() > cap) {
    if (rng) {
      std::vector<Id> sample;
      std::sample(history.begin(), history.end(), std::back_inserter(sample), cap, *rng);
      kept = std::move(sample);
    } else {
      kept.resize(cap);
    }
  }
  std::vector<Token> out;
  out.reserve(kept.size());
  for (Id i : kept) out.push_back(m.vocab().encode(i));
  return out;
}

inline Matrix encode_history(const GeneratorModel& m, const IdSet& history) {
  ad::Tape t(false);
  return t.value(m.encode(t, history_tokens(m, history)));
}

inline std::vector<double> softmax_with_temperature(std::span<const double> logits, double beta) {
  std::vector<double> p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z / beta);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] = std::exp(logits[i] / beta - mx));
  for (double& v : p) v /= sum;
  return p;
}

// Distribution over the vocabulary for the token following `prefix`.
inline std::vector<double> decode_step(const GeneratorModel& m, const Matrix& memory, const std::vector<Token>& prefix) {
  if (prefix.empty() || prefix.front() != m.vocab().sob()) throw std::invalid_argument("prefix must start with [sob]");
  if (prefix.size() > m.config().max_len) throw std::invalid_argument("prefix longer than max_len");
  for (Token tok : prefix)
    if (tok >= m.vocab().size()) throw std::invalid_argument("prefix token out of range");
  ad::Tape t(false);
  ad::Var mem = t.constant(memory);
  ad::Var logits = m.decode(t, mem, prefix, true);
  return softmax_with_temperature(t.value(logits).row(0), m.config().temperature);
}

// Teacher-forced cross-entropy averaged over the k item steps plus the final [eob] step.
inline ad::Var generation_loss(ad::Tape& t, const GeneratorModel& m, const IdSet& history,
                               const InstructiveBundle& inst, std::mt19937_64* rng = nullptr) {
  const auto& vocab = m.vocab();
  if (inst.items.empty() || inst.items.size() + 1 > m.config().max_len)
    throw std::invalid_argument("instruction length must lie in [1, max_len - 1]");
  std::vector<Token> input{vocab.sob()};
  std::vector<std::size_t> targets;
  for (Id i : inst.items) {
    input.push_back(vocab.encode(i));
    targets.push_back(vocab.encode(i));
  }
  targets.push_back(vocab.eob());
  ad::Var memory = m.encode(t, history_tokens(m, history, rng));
  ad::Var logits = m.decode(t, memory, input, false);
  return ad::cross_entropy(t, logits, std::move(targets), m.config().temperature);
}

// Accumulates the gradient of L_G into the model's Param::grad and returns L_G.
inline double train_step_generation(GeneratorModel& m, const IdSet& history, const InstructiveBundle& inst,
                                    std::mt19937_64* rng = nullptr) {
  ad::Tape t;
  ad::Var loss = generation_loss(t, m, history, inst, rng);
  t.backward(loss);
  auto params = m.params();
  t.add_grads_to(params);
  return t.scalar(loss);
}

struct PseudoBundle {
  std::vector<Id> items;
  bool terminated = false;  // [eob] emitted before the step cap
};

// Greedy decoding; emitted items, [pad] and [sob] are masked. Ties go to the
// lowest token id. Runs at most T steps.
inline PseudoBundle generate(const GeneratorModel& m, const IdSet& history) {
  const auto& vocab = m.vocab();
  auto cache = m.start_decoding(encode_history(m, history));
  std::vector<bool> used(vocab.size(), false);
  used[vocab.pad()] = used[vocab.sob()] = true;
  PseudoBundle out;
  Token last = vocab.sob();
  for (std::size_t step = 0; step < m.config().max_len; ++step) {
    const std::vector<double> p = softmax_with_temperature(m.next_logits(cache, last), m.config().temperature);
    Token best = vocab.size();
    for (Token tok = 0; tok < p.size(); ++tok)
      if (!used[tok] && (best == vocab.size() || p[tok] > p[best])) best = tok;
    if (best == vocab.eob()) {
      out.terminated = true;
      break;
    }
    out.items.push_back(vocab.decode(best));
    used[best] = true;
    last = best;
  }
  return out;
}

}  // namespace bridge
