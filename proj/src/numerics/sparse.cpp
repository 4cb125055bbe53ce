#include "cvthead/numerics/sparse.hpp"

#include <algorithm>

#include "cvthead/errors.hpp"

namespace cvthead::numerics {

SparseMatrix::SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> triplets)
    : rows_(rows), cols_(cols) {
  std::stable_sort(triplets.begin(), triplets.end(), [](const Triplet& a, const Triplet& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  row_ptr_.assign(rows + 1, 0);
  for (const Triplet& t : triplets) {
    if (t.row >= rows || t.col >= cols) {
      throw ShapeError("sparse entry (" + std::to_string(t.row) + "," + std::to_string(t.col) +
                       ") outside " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    col_index_.push_back(t.col);
    values_.push_back(t.value);
    ++row_ptr_[t.row + 1];
  }
  for (std::size_t r = 0; r < rows; ++r) row_ptr_[r + 1] += row_ptr_[r];

  // Merge duplicate (row, col) entries.
  std::vector<std::uint32_t> ptr(rows + 1, 0);
  std::vector<std::uint32_t> cols_out;
  std::vector<float> vals_out;
  cols_out.reserve(col_index_.size());
  vals_out.reserve(values_.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::uint32_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      if (cols_out.size() > ptr[r] && cols_out.back() == col_index_[k]) {
        vals_out.back() += values_[k];
      } else {
        cols_out.push_back(col_index_[k]);
        vals_out.push_back(values_[k]);
      }
    }
    ptr[r + 1] = static_cast<std::uint32_t>(cols_out.size());
  }
  row_ptr_ = std::move(ptr);
  col_index_ = std::move(cols_out);
  values_ = std::move(vals_out);
}

std::vector<Triplet> SparseMatrix::triplets() const {
  std::vector<Triplet> out;
  out.reserve(nnz());
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::uint32_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      out.push_back({static_cast<std::uint32_t>(r), col_index_[k], values_[k]});
    }
  }
  return out;
}

std::vector<double> SparseMatrix::row_sums() const {
  std::vector<double> sums(rows_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::uint32_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) sums[r] += values_[k];
  }
  return sums;
}

std::vector<double> SparseMatrix::dense() const {
  std::vector<double> out(rows_ * cols_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::uint32_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) out[r * cols_ + col_index_[k]] += values_[k];
  }
  return out;
}

template <typename T>
void SparseMatrix::multiply(const T* in, std::size_t width, T* out) const {
  for (std::size_t r = 0; r < rows_; ++r) {
    T* dst = out + r * width;
    std::fill(dst, dst + width, T(0));
    for (std::uint32_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      const T v = static_cast<T>(values_[k]);
      const T* src = in + static_cast<std::size_t>(col_index_[k]) * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += v * src[c];
    }
  }
}

template <typename T>
void SparseMatrix::multiply_transposed_add(const T* in, std::size_t width, T* out) const {
  for (std::size_t r = 0; r < rows_; ++r) {
    const T* src = in + r * width;
    for (std::uint32_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      const T v = static_cast<T>(values_[k]);
      T* dst = out + static_cast<std::size_t>(col_index_[k]) * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += v * src[c];
    }
  }
}

template void SparseMatrix::multiply(const float*, std::size_t, float*) const;
template void SparseMatrix::multiply(const double*, std::size_t, double*) const;
template void SparseMatrix::multiply_transposed_add(const float*, std::size_t, float*) const;
template void SparseMatrix::multiply_transposed_add(const double*, std::size_t, double*) const;

std::vector<double> densify_chain(const std::vector<SparseMatrix>& chain) {
  if (chain.empty()) return {};
  std::vector<double> acc = chain.front().dense();
  std::size_t acc_rows = chain.front().rows();
  const std::size_t acc_cols = chain.front().cols();
  for (std::size_t s = 1; s < chain.size(); ++s) {
    const SparseMatrix& m = chain[s];
    if (m.cols() != acc_rows) throw ShapeError("upsample chain dims do not compose");
    std::vector<double> dense_m = m.dense();
    std::vector<double> next(m.rows() * acc_cols, 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t k = 0; k < m.cols(); ++k) {
        const double a = dense_m[i * m.cols() + k];
        if (a == 0.0) continue;
        for (std::size_t j = 0; j < acc_cols; ++j) next[i * acc_cols + j] += a * acc[k * acc_cols + j];
      }
    }
    acc = std::move(next);
    acc_rows = m.rows();
  }
  return acc;
}

}  // namespace cvthead::numerics
