// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Blockwise memory-efficient exact causal attention. A query chunk carries a
// running accumulator (unnormalized output o, row max m, row sum l); each
// key/value chunk is absorbed by one block_attn_update call, two partial
// accumulators merge with rescale, and finalize turns the accumulator into
// the normalized output plus the per-row logsumexp. The accumulator keeps o
// UNNORMALIZED until finalize, which is what makes rescale a plain weighted
// sum.

#ifndef DISTATTN_FLASHCORE_HPP
#define DISTATTN_FLASHCORE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "distattn/errors.hpp"
#include "distattn/numerics.hpp"

namespace distattn {

/// Visibility of a kv chunk from a query chunk.
///  - Diagonal: intra-chunk causal, query row i sees key rows <= i
///  - Full:     every key visible (a strictly earlier chunk)
///  - Empty:    nothing visible (the update is a no-op)
enum class MaskMode { Diagonal, Full, Empty };

inline const char* to_string(MaskMode m) {
  switch (m) {
    case MaskMode::Diagonal: return "diagonal";
    case MaskMode::Full: return "full";
    case MaskMode::Empty: return "empty";
  }
  return "?";
}

/// Sub-block sizes of the streaming kernels. The kernels never materialize a
/// score matrix larger than rows x cols.
struct BlockConfig {
  Index rows = 16;  // query rows per score block
  Index cols = 16;  // key columns per score block

  void check() const {
    if (rows <= 0 || cols <= 0)
      throw ConfigError("block sizes must be positive");
  }
};

namespace detail {
/// Test hook: reports the dimensions of every score block a kernel
/// allocates. Thread-local so concurrent workers never observe a hook
/// installed by a single-threaded test.
inline thread_local std::function<void(Index, Index)> score_alloc_hook;

inline Matd alloc_score_block(Index rows, Index cols) {
  if (score_alloc_hook) score_alloc_hook(rows, cols);
  return Matd(rows, cols);
}
}  // namespace detail

template <class Scalar>
struct AttnAccumulatorT {
  Mat<Scalar> o;  // chunk_rows x d, unnormalized running output
  Vec<Scalar> m;  // chunk_rows, running row max of scaled scores
  Vec<Scalar> l;  // chunk_rows, running row sum of shifted exponentials

  static AttnAccumulatorT fresh(Index rows, Index d) {
    AttnAccumulatorT acc;
    acc.o = Mat<Scalar>::Zero(rows, d);
    acc.m = Vec<Scalar>::Constant(rows, -std::numeric_limits<Scalar>::infinity());
    acc.l = Vec<Scalar>::Zero(rows);
    return acc;
  }

  Index rows() const { return o.rows(); }
  Index dim() const { return o.cols(); }
};

template <class Scalar>
struct AttnOutputT {
  Mat<Scalar> o;    // normalized output
  Vec<Scalar> lse;  // per-row m + log l
};

using AttnAccumulator = AttnAccumulatorT<double>;
using AttnOutput = AttnOutputT<double>;

/// Materialized softmax reference: O = softmax(scale * q k^T + mask) v and
/// the row logsumexp of the masked scaled scores. This is the fixture
/// generator for everything blockwise; it shares no code with the streaming
/// path beyond the numerics primitives.
template <class Scalar>
AttnOutputT<Scalar> dense_oracle(const Mat<Scalar>& q, const Mat<Scalar>& k,
                                 const Mat<Scalar>& v, bool causal,
                                 Scalar scale) {
  detail::require(q.cols() == k.cols() && k.cols() == v.cols(),
                  "dense_oracle: hidden dims disagree");
  detail::require(k.rows() == v.rows(), "dense_oracle: k/v row mismatch");
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  Mat<Scalar> s = matmul<Scalar>(q, k, /*transpose_b=*/true);
  for (Index i = 0; i < s.rows(); ++i)
    for (Index j = 0; j < s.cols(); ++j)
      s(i, j) = (causal && j > i) ? neg_inf : s(i, j) * scale;

  AttnOutputT<Scalar> out;
  out.o = Mat<Scalar>::Zero(q.rows(), v.cols());
  out.lse = Vec<Scalar>(q.rows());
  for (Index i = 0; i < s.rows(); ++i) {
    Scalar m = s(i, 0);
    for (Index j = 1; j < s.cols(); ++j) m = std::max(m, s(i, j));
    if (m == neg_inf)
      throw DegenerateRowError("dense_oracle: row attends to no key");
    Scalar l = Scalar(0);
    for (Index j = 0; j < s.cols(); ++j) l += std::exp(s(i, j) - m);
    for (Index x = 0; x < v.cols(); ++x) {
      Scalar acc = Scalar(0);
      for (Index j = 0; j < s.cols(); ++j)
        acc += std::exp(s(i, j) - m) * v(j, x);
      out.o(i, x) = acc / l;
    }
    out.lse(i) = m + std::log(l);
  }
  return out;
}

/// One online-softmax update: absorb a kv chunk into the accumulator.
/// Internally streams over score blocks of at most blocks.rows x blocks.cols;
/// no score matrix covering the whole chunk pair ever exists. Masked
/// positions contribute exactly zero; an Empty mask returns the accumulator
/// bit-identical.
template <class Scalar>
AttnAccumulatorT<Scalar> block_attn_update(const Mat<Scalar>& q,
                                           const Mat<Scalar>& k,
                                           const Mat<Scalar>& v,
                                           AttnAccumulatorT<Scalar> acc,
                                           MaskMode mask, Scalar scale,
                                           BlockConfig blocks = {}) {
  blocks.check();
  detail::require(q.cols() == k.cols() && k.cols() == v.cols(),
                  "block_attn_update: hidden dims disagree");
  detail::require(k.rows() == v.rows(), "block_attn_update: k/v row mismatch");
  detail::require(acc.rows() == q.rows() && acc.dim() == q.cols(),
                  "block_attn_update: accumulator shape mismatch");
  if (mask == MaskMode::Empty) return acc;
  if (mask == MaskMode::Diagonal)
    detail::require(q.rows() == k.rows(),
                    "block_attn_update: diagonal mask needs a square chunk");

  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  const Index d = q.cols();
  for (Index i0 = 0; i0 < q.rows(); i0 += blocks.rows) {
    const Index br = std::min(blocks.rows, q.rows() - i0);
    for (Index j0 = 0; j0 < k.rows(); j0 += blocks.cols) {
      const Index bc = std::min(blocks.cols, k.rows() - j0);
      // Whole block above the diagonal: nothing visible.
      if (mask == MaskMode::Diagonal && j0 > i0 + br - 1) continue;

      Mat<Scalar> s = detail::alloc_score_block(br, bc);
      for (Index r = 0; r < br; ++r) {
        for (Index c = 0; c < bc; ++c) {
          if (mask == MaskMode::Diagonal && j0 + c > i0 + r) {
            s(r, c) = neg_inf;
            continue;
          }
          Scalar dot = Scalar(0);
          for (Index x = 0; x < d; ++x) dot += q(i0 + r, x) * k(j0 + c, x);
          s(r, c) = dot * scale;
        }
      }

      for (Index r = 0; r < br; ++r) {
        Scalar block_max = s(r, 0);
        for (Index c = 1; c < bc; ++c) block_max = std::max(block_max, s(r, c));
        const Index row = i0 + r;
        const Scalar m_new = std::max(acc.m(row), block_max);
        if (m_new == neg_inf) continue;  // still nothing visible on this row
        const Scalar alpha =
            (acc.m(row) == neg_inf) ? Scalar(0) : std::exp(acc.m(row) - m_new);
        Scalar p_sum = Scalar(0);
        for (Index c = 0; c < bc; ++c) p_sum += std::exp(s(r, c) - m_new);
        acc.l(row) = alpha * acc.l(row) + p_sum;
        for (Index x = 0; x < d; ++x) {
          Scalar contrib = Scalar(0);
          for (Index c = 0; c < bc; ++c)
            contrib += std::exp(s(r, c) - m_new) * v(j0 + c, x);
          acc.o(row, x) = alpha * acc.o(row, x) + contrib;
        }
        acc.m(row) = m_new;
      }
    }
  }
  return acc;
}

/// Merge two partial accumulations over disjoint key sets: reweight both to
/// the common row max and add. A fresh accumulator (m = -inf) is the
/// identity.
template <class Scalar>
AttnAccumulatorT<Scalar> rescale(const AttnAccumulatorT<Scalar>& a,
                                 const AttnAccumulatorT<Scalar>& b) {
  detail::require(a.rows() == b.rows() && a.dim() == b.dim(),
                  "rescale: accumulator shapes disagree");
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  AttnAccumulatorT<Scalar> out;
  out.o = Mat<Scalar>(a.rows(), a.dim());
  out.m = Vec<Scalar>(a.rows());
  out.l = Vec<Scalar>(a.rows());
  for (Index r = 0; r < a.rows(); ++r) {
    const Scalar m_new = std::max(a.m(r), b.m(r));
    const Scalar wa =
        (a.m(r) == neg_inf) ? Scalar(0) : std::exp(a.m(r) - m_new);
    const Scalar wb =
        (b.m(r) == neg_inf) ? Scalar(0) : std::exp(b.m(r) - m_new);
    out.m(r) = m_new;
    out.l(r) = wa * a.l(r) + wb * b.l(r);
    for (Index x = 0; x < a.dim(); ++x)
      out.o(r, x) = wa * a.o(r, x) + wb * b.o(r, x);
  }
  return out;
}

/// Normalize the accumulator into the final output and logsumexp.
template <class Scalar>
AttnOutputT<Scalar> finalize(const AttnAccumulatorT<Scalar>& acc) {
  AttnOutputT<Scalar> out;
  out.o = Mat<Scalar>(acc.rows(), acc.dim());
  out.lse = Vec<Scalar>(acc.rows());
  for (Index r = 0; r < acc.rows(); ++r) {
    if (!(acc.l(r) > Scalar(0)))
      throw DegenerateRowError("finalize: row " + std::to_string(r) +
                               " attended to no key");
    for (Index x = 0; x < acc.dim(); ++x) out.o(r, x) = acc.o(r, x) / acc.l(r);
    out.lse(r) = acc.m(r) + std::log(acc.l(r));
  }
  return out;
}

template <class Scalar>
struct ChunkGradsT {
  Mat<Scalar> dq, dk, dv;
};
using ChunkGrads = ChunkGradsT<double>;

/// D = rowsum(d_out .* out), one entry per query row. The backward kernel
/// needs it to rebuild ds without the softmax denominator.
template <class Scalar>
Vec<Scalar> backward_aux(const Mat<Scalar>& d_out, const Mat<Scalar>& out) {
  detail::require(d_out.rows() == out.rows() && d_out.cols() == out.cols(),
                  "backward_aux: shape mismatch");
  Vec<Scalar> d(out.rows());
  for (Index i = 0; i < out.rows(); ++i) {
    Scalar acc = Scalar(0);
    for (Index x = 0; x < out.cols(); ++x) acc += d_out(i, x) * out(i, x);
    d(i) = acc;
  }
  return d;
}

/// Gradient contributions of one (query chunk, kv chunk) pair. The attention
/// probabilities are rebuilt blockwise from the saved logsumexp, so lse must
/// be the logsumexp over ALL keys this query chunk attends to globally, not
/// just this kv chunk. Contributions over kv chunks sum to the full gradient:
///   dv += p^T dO,  ds = p .* (dO v^T - D),  dq += scale * ds k,
///   dk += scale * ds^T q,  with D = rowsum(dO .* O).
template <class Scalar>
ChunkGradsT<Scalar> block_attn_backward(
    const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v,
    const Mat<Scalar>& out, const Vec<Scalar>& lse, const Mat<Scalar>& d_out,
    MaskMode mask, Scalar scale, BlockConfig blocks = {}) {
  blocks.check();
  detail::require(q.cols() == k.cols() && k.cols() == v.cols(),
                  "block_attn_backward: hidden dims disagree");
  detail::require(k.rows() == v.rows(), "block_attn_backward: k/v row mismatch");
  detail::require(out.rows() == q.rows() && out.cols() == q.cols(),
                  "block_attn_backward: output shape mismatch");
  detail::require(d_out.rows() == q.rows() && d_out.cols() == q.cols(),
                  "block_attn_backward: upstream grad shape mismatch");
  detail::require(lse.size() == q.rows(),
                  "block_attn_backward: logsumexp length mismatch");
  if (mask == MaskMode::Diagonal)
    detail::require(q.rows() == k.rows(),
                    "block_attn_backward: diagonal mask needs a square chunk");

  ChunkGradsT<Scalar> g;
  g.dq = Mat<Scalar>::Zero(q.rows(), q.cols());
  g.dk = Mat<Scalar>::Zero(k.rows(), k.cols());
  g.dv = Mat<Scalar>::Zero(v.rows(), v.cols());
  if (mask == MaskMode::Empty) return g;

  const Vec<Scalar> big_d = backward_aux(d_out, out);

  const Index d = q.cols();
  for (Index j0 = 0; j0 < k.rows(); j0 += blocks.cols) {
    const Index bc = std::min(blocks.cols, k.rows() - j0);
    for (Index i0 = 0; i0 < q.rows(); i0 += blocks.rows) {
      const Index br = std::min(blocks.rows, q.rows() - i0);
      // Whole block above the diagonal contributes nothing.
      if (mask == MaskMode::Diagonal && j0 > i0 + br - 1) continue;

      // p = exp(scale * q k^T - lse); zero where masked.
      Mat<Scalar> p = detail::alloc_score_block(br, bc);
      for (Index r = 0; r < br; ++r) {
        for (Index c = 0; c < bc; ++c) {
          if (mask == MaskMode::Diagonal && j0 + c > i0 + r) {
            p(r, c) = Scalar(0);
            continue;
          }
          Scalar dot = Scalar(0);
          for (Index x = 0; x < d; ++x) dot += q(i0 + r, x) * k(j0 + c, x);
          p(r, c) = std::exp(dot * scale - lse(i0 + r));
        }
      }

      // ds = p .* (dO v^T - D); reuses p's storage.
      for (Index r = 0; r < br; ++r) {
        for (Index c = 0; c < bc; ++c) {
          for (Index x = 0; x < d; ++x)
            g.dv(j0 + c, x) += p(r, c) * d_out(i0 + r, x);
          Scalar dp = Scalar(0);
          for (Index x = 0; x < d; ++x) dp += d_out(i0 + r, x) * v(j0 + c, x);
          p(r, c) = p(r, c) * (dp - big_d(i0 + r));
        }
      }
      for (Index r = 0; r < br; ++r)
        for (Index c = 0; c < bc; ++c)
          for (Index x = 0; x < d; ++x) {
            g.dq(i0 + r, x) += scale * p(r, c) * k(j0 + c, x);
            g.dk(j0 + c, x) += scale * p(r, c) * q(i0 + r, x);
          }
    }
  }
  return g;
}

}  // namespace distattn

#endif  // DISTATTN_FLASHCORE_HPP
