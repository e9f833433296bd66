#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lorakv/rng.hpp"

namespace lorakv {

using idx = std::int64_t;

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline std::string shape_str(idx rows, idx cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

// Borrowed 2-D range over row-major storage. `stride` is the element count
// between consecutive rows, so column slices of a wider matrix stay viewable
// without copying.
template <class T>
struct Span2D {
  const T* data = nullptr;
  idx rows = 0;
  idx cols = 0;
  idx stride = 0;

  const T& operator()(idx i, idx j) const { return data[i * stride + j]; }
  const T* row(idx i) const { return data + i * stride; }

  Span2D row_range(idx begin, idx end) const {
    if (begin < 0 || end < begin || end > rows)
      fail("row_range [" + std::to_string(begin) + "," + std::to_string(end) +
           ") out of bounds for " + shape_str(rows, cols));
    return Span2D{data + begin * stride, end - begin, cols, stride};
  }

  Span2D col_range(idx begin, idx end) const {
    if (begin < 0 || end < begin || end > cols)
      fail("col_range [" + std::to_string(begin) + "," + std::to_string(end) +
           ") out of bounds for " + shape_str(rows, cols));
    return Span2D{data + begin, rows, end - begin, stride};
  }

  bool empty() const { return rows == 0 || cols == 0; }
};

// Dense row-major matrix with value semantics. Immutable by convention once
// an operation has produced it.
template <class T>
struct Matrix {
  idx rows = 0;
  idx cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(idx r, idx c) : rows(r), cols(c), data(static_cast<std::size_t>(r * c), T(0)) {
    if (r < 0 || c < 0) fail("negative matrix shape " + shape_str(r, c));
  }

  T& operator()(idx i, idx j) { return data[static_cast<std::size_t>(i * cols + j)]; }
  const T& operator()(idx i, idx j) const {
    return data[static_cast<std::size_t>(i * cols + j)];
  }

  Span2D<const T> view() const { return Span2D<const T>{data.data(), rows, cols, cols}; }

  static Matrix identity(idx n) {
    Matrix m(n, n);
    for (idx i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  static Matrix gaussian(idx r, idx c, Rng rng, double scale) {
    Matrix m(r, c);
    for (auto& v : m.data) v = static_cast<T>(rng.gaussian() * scale);
    return m;
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

template <class T>
inline void ensure_finite(const Matrix<T>& m, const char* op) {
  for (const T& v : m.data)
    if (!std::isfinite(static_cast<double>(v)))
      fail(std::string(op) + " produced a non-finite entry");
}

// out(i,j) += sum_p a(i,p) * b(p,j); caller owns zero-initialization.
template <class T>
inline void matmul_accumulate(Span2D<const T> a, Span2D<const T> b, Matrix<T>& out) {
  for (idx i = 0; i < a.rows; ++i) {
    T* out_row = out.data.data() + i * out.cols;
    const T* a_row = a.row(i);
    for (idx p = 0; p < a.cols; ++p) {
      const T aip = a_row[p];
      const T* b_row = b.row(p);
      for (idx j = 0; j < b.cols; ++j) out_row[j] += aip * b_row[j];
    }
  }
}

template <class T>
inline Matrix<T> matmul(Span2D<const T> a, Span2D<const T> b) {
  if (a.cols != b.rows)
    fail("matmul dimension mismatch: " + shape_str(a.rows, a.cols) + " x " +
         shape_str(b.rows, b.cols));
  Matrix<T> out(a.rows, b.cols);
  matmul_accumulate(a, b, out);
  ensure_finite(out, "matmul");
  return out;
}

template <class T>
inline Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  return matmul(Span2D<const T>{a.data.data(), a.rows, a.cols, a.cols},
                Span2D<const T>{b.data.data(), b.rows, b.cols, b.cols});
}

inline std::uint64_t matmul_macs(idx m, idx k, idx n) {
  return static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(k) *
         static_cast<std::uint64_t>(n);
}

// Row-wise softmax with max subtraction. Accepts -inf entries (masked
// scores); a fully masked row is rejected.
template <class T>
inline Matrix<T> row_softmax(const Matrix<T>& s) {
  Matrix<T> out(s.rows, s.cols);
  for (idx i = 0; i < s.rows; ++i) {
    T row_max = -std::numeric_limits<T>::infinity();
    for (idx j = 0; j < s.cols; ++j) row_max = std::max(row_max, s(i, j));
    if (!(row_max > -std::numeric_limits<T>::infinity()))
      fail("row_softmax: row " + std::to_string(i) + " has no finite entry");
    T denom = T(0);
    for (idx j = 0; j < s.cols; ++j) {
      const T e = std::exp(s(i, j) - row_max);
      out(i, j) = e;
      denom += e;
    }
    for (idx j = 0; j < s.cols; ++j) out(i, j) /= denom;
  }
  ensure_finite(out, "row_softmax");
  return out;
}

template <class T>
inline double cosine_similarity(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b))
    fail("cosine_similarity shape mismatch: " + shape_str(a.rows, a.cols) +
         " vs " + shape_str(b.rows, b.cols));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double x = static_cast<double>(a.data[i]);
    const double y = static_cast<double>(b.data[i]);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) fail("cosine_similarity: zero-norm input");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::min(1.0, std::max(-1.0, c));
}

template <class T>
inline double l1_norm_mean(const Matrix<T>& a) {
  if (a.data.empty()) return 0.0;
  double sum = 0.0;
  for (const T& v : a.data) sum += std::abs(static_cast<double>(v));
  return sum / static_cast<double>(a.data.size());
}

template <class T>
inline Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b))
    fail("add shape mismatch: " + shape_str(a.rows, a.cols) + " vs " +
         shape_str(b.rows, b.cols));
  Matrix<T> out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

template <class T>
inline Matrix<T> scale(const Matrix<T>& a, T factor) {
  Matrix<T> out = a;
  for (auto& v : out.data) v *= factor;
  return out;
}

// max |a-b| normalized by max |b|; the standard matrix-level relative error.
template <class T>
inline double max_rel_error(const Matrix<T>& a, const Matrix<T>& b) {
  if (!a.same_shape(b))
    fail("max_rel_error shape mismatch: " + shape_str(a.rows, a.cols) +
         " vs " + shape_str(b.rows, b.cols));
  double max_diff = 0.0, max_mag = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(static_cast<double>(a.data[i]) -
                                           static_cast<double>(b.data[i])));
    max_mag = std::max(max_mag, std::abs(static_cast<double>(b.data[i])));
  }
  if (max_diff == 0.0) return 0.0;
  return max_diff / std::max(max_mag, 1e-300);
}

template <class T>
inline double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) -
                             static_cast<double>(b.data[i])));
  return m;
}

}  // namespace lorakv
