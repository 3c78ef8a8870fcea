#pragma once

#include <random>

#include "guide/linalg.hpp"

namespace testutil {

inline guide::Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  guide::Matrix m(r, c);
  for (auto& v : m.values()) v = n(rng);
  return m;
}

inline guide::MatrixF random_matrix_f(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  return random_matrix(r, c, seed, scale).cast<float>();
}

// Plain triple loop; the reference the Eigen-backed kernels are checked against.
template <typename T>
guide::BasicMatrix<T> naive_matmul(const guide::BasicMatrix<T>& a, const guide::BasicMatrix<T>& b) {
  guide::BasicMatrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += static_cast<double>(a(i, k)) * static_cast<double>(b(k, j));
      out(i, j) = static_cast<T>(s);
    }
  return out;
}

inline guide::Matrix gram_t(const guide::Matrix& a) {  // a^T a
  return naive_matmul(guide::transpose(a), a);
}

inline double max_offdiag_identity_error(const guide::Matrix& q) {  // ||q^T q - I||_max
  const auto g = gram_t(q);
  double e = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j) e = std::max(e, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return e;
}

}  // namespace testutil
