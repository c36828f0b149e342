#pragma once

// Minimal tape-based reverse-mode differentiation over dense matrices.
//
// Every op evaluates eagerly and, when the tape is recording, pushes a
// closure that maps the output adjoint to input adjoints. Parameters enter
// the tape by reference through Tape::param(); after backward() their
// adjoints are read back with param_grad() or add_grads_to().

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bridge/sparse.hpp"
#include "bridge/tensor.hpp"

namespace bridge::ad {

struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix m) { return push(std::move(m), nullptr); }

  // The parameter must outlive the tape; its value is referenced, not copied.
  Var param(const Param& p) {
    nodes_.push_back(Node{Matrix{}, &p.value, Matrix{}, Backward{}});
    Var v{nodes_.size() - 1};
    if (record_) leaves_.emplace_back(&p, v.id);
    return v;
  }

  Var push(Matrix value, Backward back) {
    nodes_.push_back(Node{std::move(value), nullptr, Matrix{}, record_ ? std::move(back) : Backward{}});
    return Var{nodes_.size() - 1};
  }

  const Matrix& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.value;
  }
  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.size() != 1) throw std::logic_error("Tape::scalar: not a 1x1 value");
    return m.data[0];
  }

  // Adjoint buffer for v, zero-initialised on first access.
  Matrix& grad(Var v) {
    Node& n = nodes_[v.id];
    const Matrix& val = n.ref ? *n.ref : n.value;
    if (!n.grad.same_shape(val)) n.grad = Matrix(val.rows, val.cols);
    return n.grad;
  }

  void backward(Var out, double seed = 1.0) {
    if (!record_) throw std::logic_error("Tape::backward on a non-recording tape");
    if (value(out).size() != 1) throw std::logic_error("Tape::backward: output must be scalar");
    grad(out).data[0] += seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.back || n.grad.empty()) continue;
      n.back(*this, n.grad);
    }
  }

  // Total adjoint of every leaf that referenced `p` (zero if none).
  Matrix param_grad(const Param& p) {
    Matrix g(p.value.rows, p.value.cols);
    for (auto [leaf, id] : leaves_)
      if (leaf == &p && !nodes_[id].grad.empty()) g += nodes_[id].grad;
    return g;
  }

  // Adds leaf adjoints into the matching entries of `params`, matched by identity.
  void add_grads_to(std::span<Param* const> params) {
    std::unordered_map<const Param*, Param*> lookup;
    for (Param* p : params) lookup.emplace(p, p);
    for (auto [leaf, id] : leaves_) {
      if (nodes_[id].grad.empty()) continue;
      auto it = lookup.find(leaf);
      if (it == lookup.end()) continue;
      Param& p = *it->second;
      if (!p.grad.same_shape(p.value)) p.grad = Matrix(p.value.rows, p.value.cols);
      p.grad += nodes_[id].grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Keeps `obj` alive for the tape's lifetime (e.g. a Csr captured by spmm).
  template <class T>
  const T& hold(T obj) {
    auto p = std::make_shared<T>(std::move(obj));
    held_.push_back(p);
    return *p;
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref;
    Matrix grad;
    Backward back;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<const Param*, std::size_t>> leaves_;
  std::vector<std::shared_ptr<const void>> held_;
  bool record_;
};

inline Var matmul(Tape& t, Var a, Var b) {
  Matrix out = bridge::matmul(t.value(a), t.value(b));
  return t.push(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.grad(a) += matmul_nt(g, t.value(b));
    t.grad(b) += matmul_tn(t.value(a), g);
  });
}

// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  Matrix out = bridge::matmul_nt(t.value(a), t.value(b));
  return t.push(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.grad(a) += bridge::matmul(g, t.value(b));
    t.grad(b) += matmul_tn(g, t.value(a));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  Matrix out = t.value(a);
  out += t.value(b);
  return t.push(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.grad(a) += g;
    t.grad(b) += g;
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  Matrix out = t.value(a);
  const Matrix& bv = t.value(b);
  if (!out.same_shape(bv)) throw std::invalid_argument("ad::sub: shape mismatch");
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
  return t.push(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.grad(a) += g;
    Matrix& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
  });
}

// Adds a 1xC row vector to every row of a.
inline Var add_row(Tape& t, Var a, Var row) {
  Matrix out = t.value(a);
  const Matrix& r = t.value(row);
  if (r.rows != 1 || r.cols != out.cols) throw std::invalid_argument("ad::add_row: shape mismatch");
  for (std::size_t i = 0; i < out.rows; ++i)
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += r.data[j];
  return t.push(std::move(out), [a, row](Tape& t, const Matrix& g) {
    t.grad(a) += g;
    Matrix& gr = t.grad(row);
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < g.cols; ++j) gr.data[j] += g(i, j);
  });
}

inline Var scale(Tape& t, Var a, double s) {
  Matrix out = t.value(a);
  for (double& v : out.data) v *= s;
  return t.push(std::move(out), [a, s](Tape& t, const Matrix& g) {
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += s * g.data[i];
  });
}

inline Var relu(Tape& t, Var a) {
  Matrix out = t.value(a);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return t.push(std::move(out), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x.data[i] > 0.0) ga.data[i] += g.data[i];
  });
}

// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked out.
inline Var softmax_rows(Tape& t, Var a, bool causal = false) {
  const Matrix& x = t.value(a);
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const std::size_t limit = causal ? std::min(x.cols, i + 1) : x.cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      out(i, j) = std::exp(x(i, j) - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < limit; ++j) out(i, j) /= z;
  }
  Var self{t.size()};
  return t.push(std::move(out), [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) s += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols; ++j) ga(i, j) += y(i, j) * (g(i, j) - s);
    }
  });
}

inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gain);
  const Matrix& bv = t.value(bias);
  const std::size_t n = xv.cols;
  Matrix xhat(xv.rows, n);
  std::vector<double> inv_std(xv.rows);
  Matrix out(xv.rows, n);
  for (std::size_t i = 0; i < xv.rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (xv(i, j) - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * gv.data[j] + bv.data[j];
    }
  }
  return t.push(std::move(out), [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                                    Tape& t, const Matrix& g) {
    const Matrix& gv = t.value(gain);
    Matrix& gx = t.grad(x);
    Matrix& gg = t.grad(gain);
    Matrix& gb = t.grad(bias);
    const std::size_t n = g.cols;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < g.rows; ++i) {
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = g(i, j) * gv.data[j];
        gg.data[j] += g(i, j) * xhat(i, j);
        gb.data[j] += g(i, j);
        sum_d += d;
        sum_dx += d * xhat(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double d = g(i, j) * gv.data[j];
        gx(i, j) += inv_std[i] * (d - inv_n * sum_d - xhat(i, j) * inv_n * sum_dx);
      }
    }
  });
}

inline Var gather_rows(Tape& t, Var table, std::vector<std::size_t> ids) {
  const Matrix& tv = t.value(table);
  Matrix out(ids.size(), tv.cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= tv.rows) throw std::out_of_range("ad::gather_rows: id out of range");
    std::copy(tv.row(ids[r]).begin(), tv.row(ids[r]).end(), out.row(r).begin());
  }
  return t.push(std::move(out), [table, ids = std::move(ids)](Tape& t, const Matrix& g) {
    Matrix& gt = t.grad(table);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (std::size_t j = 0; j < g.cols; ++j) gt(ids[r], j) += g(r, j);
  });
}

inline Var slice_cols(Tape& t, Var a, std::size_t begin, std::size_t width) {
  const Matrix& x = t.value(a);
  if (begin + width > x.cols) throw std::out_of_range("ad::slice_cols");
  Matrix out(x.rows, width);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = x(i, begin + j);
  return t.push(std::move(out), [a, begin](Tape& t, const Matrix& g) {
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < g.cols; ++j) ga(i, begin + j) += g(i, j);
  });
}

inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("ad::concat_cols: no inputs");
  const std::size_t rows = t.value(parts.front()).rows;
  std::size_t cols = 0;
  for (Var p : parts) cols += t.value(p).cols;
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (Var p : parts) {
    const Matrix& x = t.value(p);
    if (x.rows != rows) throw std::invalid_argument("ad::concat_cols: row mismatch");
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < x.cols; ++j) out(i, offset + j) = x(i, j);
    offset += x.cols;
  }
  return t.push(std::move(out), [parts](Tape& t, const Matrix& g) {
    std::size_t offset = 0;
    for (Var p : parts) {
      Matrix& gp = t.grad(p);
      for (std::size_t i = 0; i < gp.rows; ++i)
        for (std::size_t j = 0; j < gp.cols; ++j) gp(i, j) += g(i, offset + j);
      offset += gp.cols;
    }
  });
}

// Mean over rows of -ln softmax(logits / temperature)[target].
inline Var cross_entropy(Tape& t, Var logits, std::vector<std::size_t> targets, double temperature = 1.0) {
  const Matrix& z = t.value(logits);
  if (targets.size() != z.rows) throw std::invalid_argument("ad::cross_entropy: target count mismatch");
  const double inv_t = 1.0 / temperature;
  Matrix probs(z.rows, z.cols);
  double loss = 0.0;
  for (std::size_t i = 0; i < z.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < z.cols; ++j) mx = std::max(mx, z(i, j) * inv_t);
    double sum = 0.0;
    for (std::size_t j = 0; j < z.cols; ++j) {
      probs(i, j) = std::exp(z(i, j) * inv_t - mx);
      sum += probs(i, j);
    }
    for (std::size_t j = 0; j < z.cols; ++j) probs(i, j) /= sum;
    loss -= z(i, targets[i]) * inv_t - mx - std::log(sum);
  }
  const double n = static_cast<double>(z.rows);
  Matrix out(1, 1, loss / n);
  return t.push(std::move(out), [logits, targets = std::move(targets), probs = std::move(probs), inv_t, n](
                                    Tape& t, const Matrix& g) {
    Matrix& gz = t.grad(logits);
    const double s = g.data[0] * inv_t / n;
    for (std::size_t i = 0; i < probs.rows; ++i) {
      for (std::size_t j = 0; j < probs.cols; ++j) gz(i, j) += s * probs(i, j);
      gz(i, targets[i]) -= s;
    }
  });
}

// A is a fixed sparse operator; only x receives gradient.
inline Var spmm(Tape& t, const Csr<double>& a, Var x) {
  Matrix out = bridge::spmm(a, t.value(x));
  return t.push(std::move(out), [&a, x](Tape& t, const Matrix& g) { spmm_transpose_accumulate(a, g, t.grad(x)); });
}

// Divides each row by its Euclidean norm; zero rows stay zero.
inline Var row_normalize(Tape& t, Var a) {
  const Matrix& x = t.value(a);
  Matrix out(x.rows, x.cols);
  std::vector<double> norms(x.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    norms[i] = norm2(x.row(i));
    if (norms[i] == 0.0) continue;
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = x(i, j) / norms[i];
  }
  Var self{t.size()};
  return t.push(std::move(out), [a, self, norms = std::move(norms)](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < y.rows; ++i) {
      if (norms[i] == 0.0) continue;
      const double yg = dot(y.row(i), g.row(i));
      for (std::size_t j = 0; j < y.cols; ++j) ga(i, j) += (g(i, j) - y(i, j) * yg) / norms[i];
    }
  });
}

// Column vector whose k-th entry is a[ia[k]] . b[ib[k]].
inline Var row_dots(Tape& t, Var a, Var b, std::vector<std::size_t> ia, std::vector<std::size_t> ib) {
  if (ia.size() != ib.size()) throw std::invalid_argument("ad::row_dots: index count mismatch");
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  Matrix out(ia.size(), 1);
  for (std::size_t k = 0; k < ia.size(); ++k) out.data[k] = dot(av.row(ia[k]), bv.row(ib[k]));
  return t.push(std::move(out), [a, b, ia = std::move(ia), ib = std::move(ib)](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    Matrix& ga = t.grad(a);
    Matrix& gb = t.grad(b);
    for (std::size_t k = 0; k < ia.size(); ++k) {
      const double gk = g.data[k];
      for (std::size_t j = 0; j < av.cols; ++j) {
        ga(ia[k], j) += gk * bv(ib[k], j);
        gb(ib[k], j) += gk * av(ia[k], j);
      }
    }
  });
}

// Column vector whose k-th entry is cos(a[ia[k]], b[ib[k]]); zero rows give 0.
inline Var row_cosines(Tape& t, Var a, Var b, std::vector<std::size_t> ia, std::vector<std::size_t> ib) {
  if (ia.size() != ib.size()) throw std::invalid_argument("ad::row_cosines: index count mismatch");
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  Matrix out(ia.size(), 1);
  for (std::size_t k = 0; k < ia.size(); ++k) {
    const double na = norm2(av.row(ia[k])), nb = norm2(bv.row(ib[k]));
    out.data[k] = (na == 0.0 || nb == 0.0) ? 0.0 : dot(av.row(ia[k]), bv.row(ib[k])) / (na * nb);
  }
  Var self{t.size()};
  return t.push(std::move(out), [a, b, self, ia = std::move(ia), ib = std::move(ib)](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    const Matrix& c = t.value(self);
    Matrix& ga = t.grad(a);
    Matrix& gb = t.grad(b);
    for (std::size_t k = 0; k < ia.size(); ++k) {
      const double na = norm2(av.row(ia[k])), nb = norm2(bv.row(ib[k]));
      if (na == 0.0 || nb == 0.0) continue;
      const double gk = g.data[k], ck = c.data[k];
      for (std::size_t j = 0; j < av.cols; ++j) {
        const double x = av(ia[k], j), y = bv(ib[k], j);
        ga(ia[k], j) += gk * (y / (na * nb) - ck * x / (na * na));
        gb(ib[k], j) += gk * (x / (na * nb) - ck * y / (nb * nb));
      }
    }
  });
}

inline Var neg_log_sigmoid(Tape& t, Var a) {
  Matrix out = t.value(a);
  for (double& v : out.data) v = bridge::neg_log_sigmoid(v);
  return t.push(std::move(out), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] -= g.data[i] * sigmoid(-x.data[i]);
  });
}

inline Var sum_all(Tape& t, Var a) {
  double s = 0.0;
  for (double v : t.value(a).data) s += v;
  return t.push(Matrix(1, 1, s), [a](Tape& t, const Matrix& g) {
    Matrix& ga = t.grad(a);
    for (double& v : ga.data) v += g.data[0];
  });
}

inline Var sum_squares(Tape& t, Var a) {
  return t.push(Matrix(1, 1, squared_sum(t.value(a))), [a](Tape& t, const Matrix& g) {
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga.data[i] += 2.0 * g.data[0] * x.data[i];
  });
}

inline Var mean_all(Tape& t, Var a) {
  const double n = static_cast<double>(t.value(a).size());
  return scale(t, sum_all(t, a), 1.0 / n);
}

}  // namespace bridge::ad
