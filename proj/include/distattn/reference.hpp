// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Materialized reference gradient for causal attention. Builds the full
// probability matrix and applies the textbook softmax backward; shares
// nothing with the blockwise path, so the two routes check each other.

#ifndef DISTATTN_REFERENCE_HPP
#define DISTATTN_REFERENCE_HPP

#include "distattn/flashcore.hpp"
#include "distattn/numerics.hpp"

namespace distattn {

struct DenseGrads {
  Matd dq, dk, dv;
};

/// Gradients of loss <d_out, O> with O = softmax(scale*q k^T + mask) v.
inline DenseGrads dense_attention_backward(const Matd& q, const Matd& k,
                                           const Matd& v, const Matd& d_out,
                                           bool causal, double scale) {
  detail::require(q.cols() == k.cols() && k.cols() == v.cols(),
                  "dense_attention_backward: hidden dims disagree");
  detail::require(k.rows() == v.rows(),
                  "dense_attention_backward: k/v row mismatch");
  detail::require(d_out.rows() == q.rows() && d_out.cols() == v.cols(),
                  "dense_attention_backward: d_out shape mismatch");
  const Index n = q.rows();
  const Index nk = k.rows();
  const double neg_inf = -std::numeric_limits<double>::infinity();

  // p = softmax of masked scaled scores, materialized row by row
  Matd p(n, nk);
  for (Index i = 0; i < n; ++i) {
    double m = neg_inf;
    for (Index j = 0; j < nk; ++j) {
      if (causal && j > i) {
        p(i, j) = neg_inf;
        continue;
      }
      double dot = 0.0;
      for (Index x = 0; x < q.cols(); ++x) dot += q(i, x) * k(j, x);
      p(i, j) = dot * scale;
      m = std::max(m, p(i, j));
    }
    double l = 0.0;
    for (Index j = 0; j < nk; ++j) {
      p(i, j) = std::exp(p(i, j) - m);
      l += p(i, j);
    }
    for (Index j = 0; j < nk; ++j) p(i, j) /= l;
  }

  // dp = d_out v^T; ds = p .* (dp - rowsum(dp .* p))
  Matd ds(n, nk);
  for (Index i = 0; i < n; ++i) {
    double dsum = 0.0;
    for (Index j = 0; j < nk; ++j) {
      double dp = 0.0;
      for (Index x = 0; x < v.cols(); ++x) dp += d_out(i, x) * v(j, x);
      ds(i, j) = dp;
      dsum += dp * p(i, j);
    }
    for (Index j = 0; j < nk; ++j) ds(i, j) = p(i, j) * (ds(i, j) - dsum);
  }

  DenseGrads g;
  g.dv = matmul(transpose(p), d_out);
  g.dq = distattn::scale(matmul(ds, k), scale);
  g.dk = distattn::scale(matmul(transpose(ds), q), scale);
  return g;
}

}  // namespace distattn

#endif  // DISTATTN_REFERENCE_HPP
