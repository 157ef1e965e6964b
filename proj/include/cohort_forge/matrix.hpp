#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "cohort_forge/csv.hpp"
#include "cohort_forge/error.hpp"

namespace cohort_forge {

struct Triplet {
  std::size_t row = 0;
  std::size_t col = 0;
  double value = 0.0;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

// Feature matrix in coordinate form with named columns. Triplets are kept
// sorted by (row, col); explicit zeros are allowed.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  SparseMatrix(std::size_t rows, std::vector<std::string> columns, std::vector<Triplet> triplets)
      : rows_(rows), columns_(std::move(columns)), triplets_(std::move(triplets)) {
    std::sort(triplets_.begin(), triplets_.end(), [](const Triplet& a, const Triplet& b) {
      return std::tie(a.row, a.col) < std::tie(b.row, b.col);
    });
    for (std::size_t i = 0; i < triplets_.size(); ++i) {
      const auto& t = triplets_[i];
      if (t.row >= rows_ || t.col >= columns_.size())
        throw Error("triplet out of range");
      if (i && t.row == triplets_[i - 1].row && t.col == triplets_[i - 1].col)
        throw Error("duplicate triplet");
    }
    for (std::size_t c = 0; c < columns_.size(); ++c)
      if (!index_.emplace(columns_[c], c).second) throw Error("duplicate column " + columns_[c]);
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return columns_.size(); }
  std::size_t nnz() const { return triplets_.size(); }
  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<Triplet>& triplets() const { return triplets_; }

  std::optional<std::size_t> column(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Value at (row, col); absent entries read as nullopt.
  std::optional<double> at(std::size_t row, std::size_t col) const {
    auto it = std::lower_bound(triplets_.begin(), triplets_.end(), Triplet{row, col, 0.0},
                               [](const Triplet& a, const Triplet& b) {
                                 return std::tie(a.row, a.col) < std::tie(b.row, b.col);
                               });
    if (it == triplets_.end() || it->row != row || it->col != col) return std::nullopt;
    return it->value;
  }

  friend bool operator==(const SparseMatrix& a, const SparseMatrix& b) {
    return a.rows_ == b.rows_ && a.columns_ == b.columns_ && a.triplets_ == b.triplets_;
  }

 private:
  std::size_t rows_ = 0;
  std::vector<std::string> columns_;
  std::vector<Triplet> triplets_;
  std::map<std::string, std::size_t> index_;
};

inline void write_matrix(const SparseMatrix& m, std::ostream& out) {
  out << m.rows() << ',' << m.cols() << ',' << m.nnz() << '\n';
  for (const auto& t : m.triplets())
    out << t.row << ',' << t.col << ',' << csv::format_double(t.value) << '\n';
}

inline void write_matrix(const SparseMatrix& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  write_matrix(m, out);
}

inline SparseMatrix read_matrix(std::istream& in, std::vector<std::string> columns) {
  csv::Reader reader(in);
  std::vector<std::string> row;
  if (!reader.next(row) || row.size() != 3) throw ParseError("bad matrix header", 1);
  auto r = csv::parse_int(row[0]);
  auto c = csv::parse_int(row[1]);
  auto n = csv::parse_int(row[2]);
  if (!r || !c || !n || *r < 0 || *c < 0 || *n < 0) throw ParseError("bad matrix header", 1);
  if (static_cast<std::size_t>(*c) != columns.size())
    throw ValidationError("matrix column count does not match its dictionary");
  std::vector<Triplet> trips;
  trips.reserve(static_cast<std::size_t>(*n));
  while (reader.next(row)) {
    if (row.size() != 3) throw ParseError("bad triplet", reader.line());
    auto i = csv::parse_int(row[0]);
    auto j = csv::parse_int(row[1]);
    auto v = csv::parse_double(row[2]);
    if (!i || !j || !v || *i < 0 || *j < 0) throw ParseError("bad triplet", reader.line());
    trips.push_back({static_cast<std::size_t>(*i), static_cast<std::size_t>(*j), *v});
  }
  if (trips.size() != static_cast<std::size_t>(*n)) throw ValidationError("matrix nnz mismatch");
  return SparseMatrix(static_cast<std::size_t>(*r), std::move(columns), std::move(trips));
}

// Row-major dense matrix.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  // out = X v
  void multiply(const std::vector<double>& v, std::vector<double>& out) const {
    out.assign(rows_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i) {
      double s = 0.0;
      const double* r = &data_[i * cols_];
      for (std::size_t j = 0; j < cols_; ++j) s += r[j] * v[j];
      out[i] = s;
    }
  }
  // out = X^T v
  void multiply_transpose(const std::vector<double>& v, std::vector<double>& out) const {
    out.assign(cols_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i) {
      const double* r = &data_[i * cols_];
      for (std::size_t j = 0; j < cols_; ++j) out[j] += r[j] * v[i];
    }
  }
  // out_j = sum_i d_i x_ij^2
  void weighted_column_squares(const std::vector<double>& d, std::vector<double>& out) const {
    out.assign(cols_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i) {
      const double* r = &data_[i * cols_];
      for (std::size_t j = 0; j < cols_; ++j) out[j] += d[i] * r[j] * r[j];
    }
  }
  DenseMatrix select_rows(const std::vector<std::size_t>& idx) const {
    DenseMatrix m(idx.size(), cols_);
    for (std::size_t k = 0; k < idx.size(); ++k)
      std::copy_n(&data_[idx[k] * cols_], cols_, &m.data_[k * cols_]);
    return m;
  }
  // First non-finite column, if any.
  std::optional<std::size_t> nonfinite_column() const {
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!std::isfinite(data_[i])) return i % cols_;
    return std::nullopt;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Compressed sparse rows, built from a SparseMatrix for fitting.
class CsrMatrix {
 public:
  CsrMatrix() = default;
  explicit CsrMatrix(const SparseMatrix& m) : rows_(m.rows()), cols_(m.cols()), indptr_(m.rows() + 1, 0) {
    indices_.reserve(m.nnz());
    values_.reserve(m.nnz());
    for (const auto& t : m.triplets()) {
      ++indptr_[t.row + 1];
      indices_.push_back(t.col);
      values_.push_back(t.value);
    }
    for (std::size_t i = 0; i < rows_; ++i) indptr_[i + 1] += indptr_[i];
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  void multiply(const std::vector<double>& v, std::vector<double>& out) const {
    out.assign(rows_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i) {
      double s = 0.0;
      for (std::size_t k = indptr_[i]; k < indptr_[i + 1]; ++k) s += values_[k] * v[indices_[k]];
      out[i] = s;
    }
  }
  void multiply_transpose(const std::vector<double>& v, std::vector<double>& out) const {
    out.assign(cols_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t k = indptr_[i]; k < indptr_[i + 1]; ++k) out[indices_[k]] += values_[k] * v[i];
  }
  void weighted_column_squares(const std::vector<double>& d, std::vector<double>& out) const {
    out.assign(cols_, 0.0);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t k = indptr_[i]; k < indptr_[i + 1]; ++k)
        out[indices_[k]] += d[i] * values_[k] * values_[k];
  }
  CsrMatrix select_rows(const std::vector<std::size_t>& idx) const {
    CsrMatrix m;
    m.rows_ = idx.size();
    m.cols_ = cols_;
    m.indptr_.assign(idx.size() + 1, 0);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t i = idx[r];
      for (std::size_t k = indptr_[i]; k < indptr_[i + 1]; ++k) {
        m.indices_.push_back(indices_[k]);
        m.values_.push_back(values_[k]);
      }
      m.indptr_[r + 1] = m.indices_.size();
    }
    return m;
  }
  std::optional<std::size_t> nonfinite_column() const {
    for (std::size_t k = 0; k < values_.size(); ++k)
      if (!std::isfinite(values_[k])) return indices_[k];
    return std::nullopt;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> indptr_;
  std::vector<std::size_t> indices_;
  std::vector<double> values_;
};

}  // namespace cohort_forge
