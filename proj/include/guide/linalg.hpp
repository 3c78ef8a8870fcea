#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <vector>

#include "guide/errors.hpp"

namespace guide {

// Every buffer starts on a cache line. Vectorized reductions split their
// input by address alignment, so a fixed alignment keeps results bitwise
// reproducible from one allocation to the next.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

// Dense row-major matrix. Vectors (biases, norm scales) are stored as 1 x n.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data);

  static BasicMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(T value);

  template <typename U>
  BasicMatrix<U> cast() const {
    BasicMatrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const BasicMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T, AlignedAllocator<T>> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

enum class Axis { Rows, Cols };

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a);
// Half-open ranges [begin, end).
template <typename T>
BasicMatrix<T> slice_rows(const BasicMatrix<T>& a, std::size_t begin, std::size_t end);
template <typename T>
BasicMatrix<T> slice_cols(const BasicMatrix<T>& a, std::size_t begin, std::size_t end);
// Indices must be strictly increasing and in bounds.
template <typename T>
BasicMatrix<T> gather(const BasicMatrix<T>& a, Axis axis, std::span<const std::size_t> indices);
template <typename T>
BasicMatrix<T> vstack(const BasicMatrix<T>& top, const BasicMatrix<T>& bottom);

template <typename T>
double frobenius_norm(const BasicMatrix<T>& a);
template <typename T>
double max_abs_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b);
template <typename T>
bool all_finite(const BasicMatrix<T>& a);

struct SvdResult {
  Matrix u;                             // rows x k
  std::vector<double> singular_values;  // descending, length k
  Matrix v;                             // cols x k
};

struct SymEigResult {
  std::vector<double> eigenvalues;  // descending
  Matrix eigenvectors;              // column i pairs with eigenvalues[i]
};

// Thin SVD by one-sided Jacobi rotations. The first nonzero entry of every
// column of V is made non-negative so the factorization is reproducible.
SvdResult svd(const Matrix& a);

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Eigenvector columns
// follow the same sign convention as svd().
SymEigResult sym_eig(const Matrix& a);

}  // namespace guide
