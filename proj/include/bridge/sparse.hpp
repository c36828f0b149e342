#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include "bridge/tensor.hpp"

namespace bridge {

// Compressed sparse row storage with per-entry values. Column indices are
// sorted and unique within each row.
template <typename Value>
class Csr {
 public:
  Csr() : row_ptr_(1, 0) {}
  Csr(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), row_ptr_(rows + 1, 0) {}

  // Builds from (row, col, value) triplets; duplicate coordinates are summed.
  static Csr from_triplets(std::size_t rows, std::size_t cols,
                           std::vector<std::tuple<std::uint32_t, std::uint32_t, Value>> trip) {
    Csr m(rows, cols);
    std::sort(trip.begin(), trip.end(), [](const auto& a, const auto& b) {
      return std::get<0>(a) != std::get<0>(b) ? std::get<0>(a) < std::get<0>(b) : std::get<1>(a) < std::get<1>(b);
    });
    bool have_prev = false;
    std::uint32_t prev_r = 0, prev_c = 0;
    for (const auto& [r, c, v] : trip) {
      if (r >= rows || c >= cols) throw std::out_of_range("Csr::from_triplets: index out of range");
      if (have_prev && r == prev_r && c == prev_c) {
        m.values_.back() += v;
        continue;
      }
      m.col_idx_.push_back(c);
      m.values_.push_back(v);
      ++m.row_ptr_[r + 1];
      have_prev = true;
      prev_r = r;
      prev_c = c;
    }
    for (std::size_t r = 0; r < rows; ++r) m.row_ptr_[r + 1] += m.row_ptr_[r];
    return m;
  }

  // Builds directly from per-row sorted (col, value) lists.
  static Csr from_rows(std::size_t cols, const std::vector<std::vector<std::pair<std::uint32_t, Value>>>& rows) {
    Csr m(rows.size(), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (const auto& [c, v] : rows[r]) {
        if (c >= cols) throw std::out_of_range("Csr::from_rows: column out of range");
        m.col_idx_.push_back(c);
        m.values_.push_back(v);
      }
      m.row_ptr_[r + 1] = m.col_idx_.size();
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return col_idx_.size(); }

  std::span<const std::uint32_t> row_cols(std::size_t r) const {
    return {col_idx_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
  }
  std::span<const Value> row_values(std::size_t r) const {
    return {values_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
  }
  std::size_t row_nnz(std::size_t r) const { return row_ptr_[r + 1] - row_ptr_[r]; }

  Value at(std::size_t r, std::size_t c) const {
    auto cs = row_cols(r);
    auto it = std::lower_bound(cs.begin(), cs.end(), static_cast<std::uint32_t>(c));
    if (it == cs.end() || *it != c) return Value{};
    return values_[row_ptr_[r] + static_cast<std::size_t>(it - cs.begin())];
  }

  friend bool operator==(const Csr&, const Csr&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> col_idx_;
  std::vector<Value> values_;
};

// Binary sparse matrix: only the pattern is stored.
class BinaryMatrix {
 public:
  BinaryMatrix() : row_ptr_(1, 0) {}

  // Entries may be unsorted or duplicated; the result is the set of coordinates.
  static BinaryMatrix from_pairs(std::size_t rows, std::size_t cols,
                                 std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs) {
    std::sort(pairs.begin(), pairs.end());
    pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
    BinaryMatrix m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.row_ptr_.assign(rows + 1, 0);
    m.col_idx_.reserve(pairs.size());
    for (const auto& [r, c] : pairs) {
      if (r >= rows || c >= cols) throw std::out_of_range("BinaryMatrix: index out of range");
      ++m.row_ptr_[r + 1];
      m.col_idx_.push_back(c);
    }
    for (std::size_t r = 0; r < rows; ++r) m.row_ptr_[r + 1] += m.row_ptr_[r];
    return m;
  }

  static BinaryMatrix from_row_sets(std::size_t cols, const std::vector<std::vector<std::uint32_t>>& rows) {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (auto c : rows[r]) pairs.emplace_back(static_cast<std::uint32_t>(r), c);
    return from_pairs(rows.size(), cols, std::move(pairs));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return col_idx_.size(); }

  std::span<const std::uint32_t> row(std::size_t r) const {
    return {col_idx_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
  }
  std::size_t row_nnz(std::size_t r) const { return row_ptr_[r + 1] - row_ptr_[r]; }

  bool contains(std::size_t r, std::size_t c) const {
    auto cs = row(r);
    return std::binary_search(cs.begin(), cs.end(), static_cast<std::uint32_t>(c));
  }

  BinaryMatrix transpose() const {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    pairs.reserve(nnz());
    for (std::size_t r = 0; r < rows_; ++r)
      for (auto c : row(r)) pairs.emplace_back(c, static_cast<std::uint32_t>(r));
    return from_pairs(cols_, rows_, std::move(pairs));
  }

  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs() const {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
    out.reserve(nnz());
    for (std::size_t r = 0; r < rows_; ++r)
      for (auto c : row(r)) out.emplace_back(static_cast<std::uint32_t>(r), c);
    return out;
  }

  friend bool operator==(const BinaryMatrix&, const BinaryMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_ptr_;
  std::vector<std::uint32_t> col_idx_;
};

// out = A * x for a weighted CSR A and dense x.
inline Matrix spmm(const Csr<double>& a, const Matrix& x) {
  if (a.cols() != x.rows) throw std::invalid_argument("spmm: shape mismatch");
  Matrix out(a.rows(), x.cols);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto cs = a.row_cols(r);
    auto vs = a.row_values(r);
    double* o = out.data.data() + r * out.cols;
    for (std::size_t k = 0; k < cs.size(); ++k) {
      const double* xr = x.data.data() + cs[k] * x.cols;
      for (std::size_t j = 0; j < x.cols; ++j) o[j] += vs[k] * xr[j];
    }
  }
  return out;
}

// Accumulates A^T * g into out (scatter form of the spmm adjoint).
inline void spmm_transpose_accumulate(const Csr<double>& a, const Matrix& g, Matrix& out) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto cs = a.row_cols(r);
    auto vs = a.row_values(r);
    const double* gr = g.data.data() + r * g.cols;
    for (std::size_t k = 0; k < cs.size(); ++k) {
      double* o = out.data.data() + cs[k] * out.cols;
      for (std::size_t j = 0; j < g.cols; ++j) o[j] += vs[k] * gr[j];
    }
  }
}

// Row-mean operator over the given item sets: row r averages the rows listed in sets[r].
inline Csr<double> mean_operator(std::size_t cols, const std::vector<std::vector<std::uint32_t>>& sets) {
  std::vector<std::vector<std::pair<std::uint32_t, double>>> rows(sets.size());
  for (std::size_t r = 0; r < sets.size(); ++r) {
    std::vector<std::uint32_t> s = sets[r];
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    const double w = s.empty() ? 0.0 : 1.0 / static_cast<double>(s.size());
    for (auto c : s) rows[r].emplace_back(c, w);
  }
  return Csr<double>::from_rows(cols, rows);
}

}  // namespace bridge
