// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense linear-algebra primitives shared by every other module. All kernels
// run plain scalar loops in a fixed left-to-right order: repeated evaluation
// of any operation on the same inputs is bit-identical, which the executors
// and the checkpointing equality tests rely on. Eigen supplies storage and
// per-coefficient expressions only; reductions and products never go through
// its vectorized paths.

#ifndef DISTATTN_NUMERICS_HPP
#define DISTATTN_NUMERICS_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>

#include "distattn/errors.hpp"

namespace distattn {

using Index = Eigen::Index;

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matd = Mat<double>;
using Vecd = Vec<double>;

namespace detail {
inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}
}  // namespace detail

/// Textbook product a*b (or a*b^T). Inner sums run left to right.
template <class Scalar>
Mat<Scalar> matmul(const Mat<Scalar>& a, const Mat<Scalar>& b,
                   bool transpose_b = false) {
  const Index inner = transpose_b ? b.cols() : b.rows();
  const Index out_cols = transpose_b ? b.rows() : b.cols();
  detail::require(a.cols() == inner, "matmul: inner dimensions disagree");
  Mat<Scalar> out(a.rows(), out_cols);
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < out_cols; ++j) {
      Scalar acc = Scalar(0);
      if (transpose_b) {
        for (Index x = 0; x < inner; ++x) acc += a(i, x) * b(j, x);
      } else {
        for (Index x = 0; x < inner; ++x) acc += a(i, x) * b(x, j);
      }
      out(i, j) = acc;
    }
  }
  return out;
}

template <class Scalar>
Mat<Scalar> transpose(const Mat<Scalar>& m) {
  Mat<Scalar> out(m.cols(), m.rows());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

template <class Scalar>
Vec<Scalar> rowmax(const Mat<Scalar>& m) {
  detail::require(m.rows() > 0 && m.cols() > 0, "rowmax: empty matrix");
  Vec<Scalar> out(m.rows());
  for (Index i = 0; i < m.rows(); ++i) {
    Scalar best = m(i, 0);
    for (Index j = 1; j < m.cols(); ++j)
      if (m(i, j) > best) best = m(i, j);
    out(i) = best;
  }
  return out;
}

template <class Scalar>
Vec<Scalar> rowsum(const Mat<Scalar>& m) {
  detail::require(m.rows() > 0 && m.cols() > 0, "rowsum: empty matrix");
  Vec<Scalar> out(m.rows());
  for (Index i = 0; i < m.rows(); ++i) {
    Scalar acc = Scalar(0);
    for (Index j = 0; j < m.cols(); ++j) acc += m(i, j);
    out(i) = acc;
  }
  return out;
}

template <class Scalar>
Mat<Scalar> exp_elem(const Mat<Scalar>& m) {
  Mat<Scalar> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out(i, j) = std::exp(m(i, j));
  return out;
}

/// out(i, j) = m(i, j) - v(i)
template <class Scalar>
Mat<Scalar> sub_rowwise(const Mat<Scalar>& m, const Vec<Scalar>& v) {
  detail::require(m.rows() == v.size(), "sub_rowwise: row count mismatch");
  Mat<Scalar> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) - v(i);
  return out;
}

template <class Scalar>
Mat<Scalar> scale(const Mat<Scalar>& m, Scalar c) {
  Mat<Scalar> out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out(i, j) = m(i, j) * c;
  return out;
}

template <class Scalar>
bool bits_equal(const Mat<Scalar>& a, const Mat<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      if (std::memcmp(&a(i, j), &b(i, j), sizeof(Scalar)) != 0) return false;
  return true;
}

template <class Scalar>
bool bits_equal(const Vec<Scalar>& a, const Vec<Scalar>& b) {
  if (a.size() != b.size()) return false;
  for (Index i = 0; i < a.size(); ++i)
    if (std::memcmp(&a(i), &b(i), sizeof(Scalar)) != 0) return false;
  return true;
}

/// splitmix64 generator. Pure integer arithmetic plus an exact scale into
/// [0,1), so the same seed produces the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0,1) with 53 random bits.
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_unit();
  }

  /// Row-major fill, one draw per entry.
  Matd matrix(Index rows, Index cols, double lo = -1.0, double hi = 1.0) {
    Matd out(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) out(i, j) = uniform(lo, hi);
    return out;
  }

  /// Child generator seeded from this stream; advances this stream by one.
  Rng fork() { return Rng(next_u64()); }

 private:
  std::uint64_t state_;
};

}  // namespace distattn

#endif  // DISTATTN_NUMERICS_HPP
