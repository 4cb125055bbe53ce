#pragma once

#include <cstdint>
#include <vector>

namespace cvthead::numerics {

struct Triplet {
  std::uint32_t row;
  std::uint32_t col;
  float value;
};

// Constant CSR matrix (model data such as joint regressors and upsampling
// operators); never a gradient target.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> triplets);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nnz() const noexcept { return values_.size(); }

  const std::vector<std::uint32_t>& row_ptr() const noexcept { return row_ptr_; }
  const std::vector<std::uint32_t>& col_index() const noexcept { return col_index_; }
  const std::vector<float>& values() const noexcept { return values_; }

  // Triplets in row-major order (the canonical serialised form).
  std::vector<Triplet> triplets() const;
  std::vector<double> row_sums() const;
  std::vector<double> dense() const;  // rows x cols, row-major

  // out[rows x width] = this * in[cols x width]
  template <typename T>
  void multiply(const T* in, std::size_t width, T* out) const;
  // out[cols x width] += this^T * in[rows x width]
  template <typename T>
  void multiply_transposed_add(const T* in, std::size_t width, T* out) const;

  bool operator==(const SparseMatrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint32_t> row_ptr_{0};
  std::vector<std::uint32_t> col_index_;
  std::vector<float> values_;
};

// Product A_k * ... * A_1 of a chain, densified (test oracle helper).
std::vector<double> densify_chain(const std::vector<SparseMatrix>& chain);

}  // namespace cvthead::numerics
