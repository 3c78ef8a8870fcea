#include "guide/linalg.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace guide {

namespace {

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<const RowMajor<T>> view(const BasicMatrix<T>& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

template <typename T>
Eigen::Map<RowMajor<T>> view(BasicMatrix<T>& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

constexpr int kMaxSweeps = 80;

void require_finite(const Matrix& a, const char* op) {
  if (!all_finite(a)) throw InvalidInput(std::string(op) + ": input contains NaN or Inf");
}

// First entry with magnitude above the noise floor decides the column sign.
bool needs_flip(const Matrix& m, std::size_t col) {
  double scale = 0.0;
  for (std::size_t r = 0; r < m.rows(); ++r) scale = std::max(scale, std::abs(m(r, col)));
  const double floor = scale * 1e-12;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (std::abs(m(r, col)) > floor) return m(r, col) < 0.0;
  }
  return false;
}

// Fills column `col` of `u` with a unit vector orthogonal to columns [0, col).
void complete_orthonormal_column(Matrix& u, std::size_t col) {
  const std::size_t n = u.rows();
  std::vector<double> best;
  double best_norm = -1.0;
  for (std::size_t e = 0; e < n && best_norm < 0.5; ++e) {
    std::vector<double> cand(n, 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < col; ++j) {
        double dot = 0.0;
        for (std::size_t r = 0; r < n; ++r) dot += u(r, j) * cand[r];
        for (std::size_t r = 0; r < n; ++r) cand[r] -= dot * u(r, j);
      }
    }
    double norm = 0.0;
    for (double x : cand) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > best_norm) {
      best_norm = norm;
      best = std::move(cand);
    }
  }
  for (std::size_t r = 0; r < n; ++r) u(r, col) = best[r] / best_norm;
}

// One-sided Jacobi for rows >= cols. Works on the transpose so every column
// of the input is a contiguous row.
SvdResult svd_tall(const Matrix& a) {
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  Matrix w = transpose(a);  // cols x rows
  Matrix vt = Matrix::identity(cols);
  // Columns this far below the total norm are numerical zeros; rotating them
  // only shuffles rounding noise and can keep the sweep from settling.
  double total = 0.0;
  for (double x : a.values()) total += x * x;
  const double negligible = 1e-30 * total;

  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        auto wp = w.row(p);
        auto wq = w.row(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          alpha += wp[r] * wp[r];
          beta += wq[r] * wq[r];
          gamma += wp[r] * wq[r];
        }
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        if (alpha <= negligible || beta <= negligible) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t r = 0; r < rows; ++r) {
          const double x = wp[r], y = wq[r];
          wp[r] = c * x - s * y;
          wq[r] = s * x + c * y;
        }
        auto vp = vt.row(p);
        auto vq = vt.row(q);
        for (std::size_t r = 0; r < cols; ++r) {
          const double x = vp[r], y = vq[r];
          vp[r] = c * x - s * y;
          vq[r] = s * x + c * y;
        }
      }
    }
  }
  if (!converged) throw NumericalFailure("svd: Jacobi sweeps did not converge");

  std::vector<double> sigma(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (double x : w.row(j)) s += x * x;
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return sigma[i] > sigma[j]; });

  SvdResult out{Matrix(rows, cols), std::vector<double>(cols), Matrix(cols, cols)};
  const double sigma_max = cols > 0 ? sigma[order[0]] : 0.0;
  const double zero_tol = sigma_max * 1e-13 * static_cast<double>(std::max(rows, cols));
  for (std::size_t k = 0; k < cols; ++k) {
    const std::size_t j = order[k];
    for (std::size_t r = 0; r < cols; ++r) out.v(r, k) = vt(j, r);
    if (sigma[j] > zero_tol && sigma[j] > 0.0) {
      out.singular_values[k] = sigma[j];
      for (std::size_t r = 0; r < rows; ++r) out.u(r, k) = w(j, r) / sigma[j];
    } else {
      out.singular_values[k] = 0.0;
      complete_orthonormal_column(out.u, k);
    }
  }
  for (std::size_t k = 0; k < cols; ++k) {
    if (!needs_flip(out.v, k)) continue;
    for (std::size_t r = 0; r < cols; ++r) out.v(r, k) = -out.v(r, k);
    for (std::size_t r = 0; r < rows; ++r) out.u(r, k) = -out.u(r, k);
  }
  return out;
}

}  // namespace

template <typename T>
BasicMatrix<T>::BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
  if (data_.size() != rows * cols) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                     shape_str(rows, cols));
  }
}

template <typename T>
BasicMatrix<T> BasicMatrix<T>::identity(std::size_t n) {
  BasicMatrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = T{1};
  return out;
}

template <typename T>
void BasicMatrix<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " * " +
                     shape_str(b.rows(), b.cols()));
  }
  BasicMatrix<T> out(a.rows(), b.cols());
  if (out.size() == 0) return out;
  if (a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  }
  return out;
}

template <typename T>
BasicMatrix<T> slice_rows(const BasicMatrix<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of " + std::to_string(a.rows()));
  }
  std::vector<T> data(a.data() + begin * a.cols(), a.data() + end * a.cols());
  return BasicMatrix<T>(end - begin, a.cols(), std::move(data));
}

template <typename T>
BasicMatrix<T> slice_cols(const BasicMatrix<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of " + std::to_string(a.cols()));
  }
  BasicMatrix<T> out(a.rows(), end - begin);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::copy(a.data() + r * a.cols() + begin, a.data() + r * a.cols() + end, out.row(r).begin());
  }
  return out;
}

template <typename T>
BasicMatrix<T> gather(const BasicMatrix<T>& a, Axis axis, std::span<const std::size_t> indices) {
  const std::size_t extent = axis == Axis::Rows ? a.rows() : a.cols();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= extent) {
      throw ShapeError("gather: index " + std::to_string(indices[i]) + " out of bounds for extent " +
                       std::to_string(extent));
    }
    if (i > 0 && indices[i] <= indices[i - 1]) {
      throw ShapeError("gather: indices must be strictly increasing");
    }
  }
  if (axis == Axis::Rows) {
    BasicMatrix<T> out(indices.size(), a.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy(a.row(indices[i]).begin(), a.row(indices[i]).end(), out.row(i).begin());
    }
    return out;
  }
  BasicMatrix<T> out(a.rows(), indices.size());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t i = 0; i < indices.size(); ++i) out(r, i) = a(r, indices[i]);
  }
  return out;
}

template <typename T>
BasicMatrix<T> vstack(const BasicMatrix<T>& top, const BasicMatrix<T>& bottom) {
  if (top.cols() != bottom.cols()) {
    throw ShapeError("vstack: column counts " + std::to_string(top.cols()) + " and " +
                     std::to_string(bottom.cols()) + " differ");
  }
  std::vector<T> data(top.values().begin(), top.values().end());
  data.insert(data.end(), bottom.values().begin(), bottom.values().end());
  return BasicMatrix<T>(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

template <typename T>
double frobenius_norm(const BasicMatrix<T>& a) {
  double s = 0.0;
  for (T x : a.values()) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <typename T>
double max_abs_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_abs_diff: " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <typename T>
bool all_finite(const BasicMatrix<T>& a) {
  return std::all_of(a.values().begin(), a.values().end(), [](T x) { return std::isfinite(x); });
}

SvdResult svd(const Matrix& a) {
  if (a.rows() == 0 || a.cols() == 0) throw InvalidInput("svd: empty matrix");
  require_finite(a, "svd");
  if (a.rows() >= a.cols()) return svd_tall(a);

  // Wide input: factor the transpose and swap the roles of U and V. The sign
  // convention is then re-applied to the new V.
  SvdResult t = svd_tall(transpose(a));
  SvdResult out{std::move(t.v), std::move(t.singular_values), std::move(t.u)};
  for (std::size_t k = 0; k < out.singular_values.size(); ++k) {
    if (!needs_flip(out.v, k)) continue;
    for (std::size_t r = 0; r < out.v.rows(); ++r) out.v(r, k) = -out.v(r, k);
    for (std::size_t r = 0; r < out.u.rows(); ++r) out.u(r, k) = -out.u(r, k);
  }
  return out;
}

SymEigResult sym_eig(const Matrix& a) {
  if (a.rows() != a.cols()) {
    throw InvalidInput("sym_eig: matrix is " + shape_str(a.rows(), a.cols()) + ", not square");
  }
  require_finite(a, "sym_eig");
  const std::size_t n = a.rows();
  double scale = 0.0;
  double asym = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      scale = std::max(scale, std::abs(a(i, j)));
      asym = std::max(asym, std::abs(a(i, j) - a(j, i)));
    }
  }
  if (asym > 1e-10 * scale) throw InvalidInput("sym_eig: matrix is not symmetric");

  Matrix s = a;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) s(i, j) = s(j, i) = 0.5 * (a(i, j) + a(j, i));
  }
  Matrix v = Matrix::identity(n);

  auto off_norm = [&]() {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) off += s(i, j) * s(i, j);
    }
    return std::sqrt(2.0 * off);
  };
  const double total = frobenius_norm(s);

  bool converged = off_norm() <= 1e-15 * total;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = s(p, q);
        if (apq == 0.0) continue;
        const double theta = (s(q, q) - s(p, p)) / (2.0 * apq);
        const double t =
            std::copysign(1.0, theta) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double skp = s(k, p), skq = s(k, q);
          s(k, p) = c * skp - sn * skq;
          s(k, q) = sn * skp + c * skq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double spk = s(p, k), sqk = s(q, k);
          s(p, k) = c * spk - sn * sqk;
          s(q, k) = sn * spk + c * sqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
    converged = off_norm() <= 1e-15 * total;
  }
  if (!converged && off_norm() > 1e-12 * total) {
    throw NumericalFailure("sym_eig: Jacobi sweeps did not converge");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return s(i, i) > s(j, j); });
  SymEigResult out{std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.eigenvalues[k] = s(order[k], order[k]);
    for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, k) = v(r, order[k]);
    if (needs_flip(out.eigenvectors, k)) {
      for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, k) = -out.eigenvectors(r, k);
    }
  }
  return out;
}

#define GUIDE_INSTANTIATE(T)                                                                     \
  template class BasicMatrix<T>;                                                                 \
  template BasicMatrix<T> matmul(const BasicMatrix<T>&, const BasicMatrix<T>&);                  \
  template BasicMatrix<T> transpose(const BasicMatrix<T>&);                                      \
  template BasicMatrix<T> slice_rows(const BasicMatrix<T>&, std::size_t, std::size_t);           \
  template BasicMatrix<T> slice_cols(const BasicMatrix<T>&, std::size_t, std::size_t);           \
  template BasicMatrix<T> gather(const BasicMatrix<T>&, Axis, std::span<const std::size_t>);     \
  template BasicMatrix<T> vstack(const BasicMatrix<T>&, const BasicMatrix<T>&);                  \
  template double frobenius_norm(const BasicMatrix<T>&);                                         \
  template double max_abs_diff(const BasicMatrix<T>&, const BasicMatrix<T>&);                    \
  template bool all_finite(const BasicMatrix<T>&);

GUIDE_INSTANTIATE(float)
GUIDE_INSTANTIATE(double)

#undef GUIDE_INSTANTIATE

}  // namespace guide
