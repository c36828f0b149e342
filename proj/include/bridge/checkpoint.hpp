#pragma once

// Binary checkpoint of a TrainState.
//
// Layout (all integers and floats little-endian):
//   "BRIDGECK"  u32 version
//   u64 n, n bytes of UTF-8 key=value config
//   u64 epoch, u64 adam steps, u64 best epoch, u64 bad epochs, u8 stopped, f64 best validation
//   u64 n, n bytes of the textual mt19937_64 state
//   u64 items, then per item: u64 degree, degree x u32 neighbour ids
//   u64 records, then per record: u64 epoch, 5 x f64
//   u64 tensors, then per tensor: u64 n, name, u64 rows, u64 cols, rows*cols x f64

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bridge/errors.hpp"
#include "bridge/training.hpp"

namespace bridge {

inline constexpr char kCheckpointMagic[8] = {'B', 'R', 'I', 'D', 'G', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) {
    u64(s.size());
    buf_.append(s);
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  void tensor(const std::string& name, const Matrix& m) {
    bytes(name);
    u64(m.rows);
    u64(m.cols);
    for (double v : m.data) f64(v);
  }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CheckpointError("truncated checkpoint");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix tensor_body() {
    const std::uint64_t rows = u64(), cols = u64();
    if (cols != 0 && rows > (data_.size() - pos_) / 8 / cols) throw CheckpointError("truncated checkpoint");
    Matrix m(rows, cols);
    for (double& v : m.data) v = f64();
    return m;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const TrainState& s) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.bytes(format_key_values(s.cfg.to_key_values()));
  w.u64(s.epoch);
  w.u64(s.adam.steps());
  w.u64(s.best_epoch);
  w.u64(s.bad_epochs);
  w.u8(s.stopped ? 1 : 0);
  w.f64(s.best_validation);
  std::ostringstream rng;
  rng << s.rng;
  w.bytes(rng.str());

  const auto& g = s.model.index().graph();
  w.u64(g.num_items);
  for (const auto& nb : g.neighbors) {
    w.u64(nb.size());
    for (Id j : nb) w.u32(j);
  }

  w.u64(s.curve.size());
  for (const auto& r : s.curve) {
    w.u64(r.epoch);
    for (double v : {r.clustering, r.generation, r.recommendation, r.total, r.validation}) w.f64(v);
  }

  const auto params = s.model.params();
  const auto& m1 = s.adam.first_moments();
  const auto& m2 = s.adam.second_moments();
  w.u64(params.size() * (1 + (m1.empty() ? 0 : 2) + (s.best_params.empty() ? 0 : 1)));
  for (const Param* p : params) w.tensor(p->name, p->value);
  for (std::size_t k = 0; k < m1.size(); ++k) {
    w.tensor("adam.m/" + params[k]->name, m1[k]);
    w.tensor("adam.v/" + params[k]->name, m2[k]);
  }
  for (std::size_t k = 0; k < s.best_params.size(); ++k) w.tensor("best/" + params[k]->name, s.best_params[k]);
  return w.str();
}

inline TrainState deserialize_checkpoint(std::string data) {
  detail::ByteReader r(std::move(data));
  if (r.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
    throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  TrainConfig cfg;
  cfg.apply(parse_key_values(r.bytes(), "<checkpoint config>"));
  cfg.validate();

  TrainState s;
  s.cfg = cfg;
  s.epoch = r.u64();
  const std::uint64_t adam_steps = r.u64();
  s.best_epoch = r.u64();
  s.bad_epochs = r.u64();
  s.stopped = r.u8() != 0;
  s.best_validation = r.f64();
  std::istringstream rng(r.bytes());
  rng >> s.rng;
  if (!rng) throw CheckpointError("corrupt RNG state");

  const std::uint64_t items = r.u64();
  std::vector<IdSet> nbrs;
  for (std::uint64_t i = 0; i < items; ++i) {
    const std::uint64_t deg = r.u64();
    r.need(deg * 4);
    IdSet nb(deg);
    for (auto& j : nb) {
      j = r.u32();
      if (j >= items) throw CheckpointError("corrupt graph section");
    }
    nbrs.push_back(std::move(nb));
  }

  const std::uint64_t records = r.u64();
  for (std::uint64_t k = 0; k < records; ++k) {
    EpochRecord rec;
    rec.epoch = r.u64();
    rec.clustering = r.f64();
    rec.generation = r.f64();
    rec.recommendation = r.f64();
    rec.total = r.f64();
    rec.validation = r.f64();
    s.curve.push_back(rec);
  }

  std::map<std::string, Matrix> tensors;
  const std::uint64_t count = r.u64();
  for (std::uint64_t k = 0; k < count; ++k) {
    std::string name = r.bytes();
    tensors[name] = r.tensor_body();
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");

  std::mt19937_64 scratch(0);
  s.model = BridgeModel(cfg.model, ItemGraph::from_neighbors(std::move(nbrs)), scratch);
  auto params = s.model.params();
  auto take = [&](const std::string& name, const Matrix& like) -> Matrix {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (!it->second.same_shape(like)) throw CheckpointError("tensor '" + name + "' has the wrong shape");
    return std::move(it->second);
  };
  for (Param* p : params) p->value = take(p->name, p->value);
  s.adam = Adam(AdamConfig{cfg.learning_rate});
  if (tensors.count("adam.m/" + params.front()->name)) {
    for (Param* p : params) {
      s.adam.first_moments().push_back(take("adam.m/" + p->name, p->value));
      s.adam.second_moments().push_back(take("adam.v/" + p->name, p->value));
    }
  }
  s.adam.set_steps(adam_steps);
  if (tensors.count("best/" + params.front()->name))
    for (Param* p : params) s.best_params.push_back(take("best/" + p->name, p->value));
  s.model.refresh();
  return s;
}

inline void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(s);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace bridge
