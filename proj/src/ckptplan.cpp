// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0

#include "distattn/ckptplan.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "distattn/errors.hpp"
#include "json.hpp"

namespace distattn {

namespace {
constexpr double kNormEps = 1e-6;
}

const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::Norm1: return "norm1";
    case OpKind::QkvProj: return "qkv_proj";
    case OpKind::Attention: return "attention";
    case OpKind::OutProj: return "out_proj";
    case OpKind::Norm2: return "norm2";
    case OpKind::MlpUp: return "mlp_up";
    case OpKind::MlpAct: return "mlp_act";
    case OpKind::MlpDown: return "mlp_down";
  }
  return "?";
}

const char* to_string(CheckpointStrategy s) {
  switch (s) {
    case CheckpointStrategy::None: return "none";
    case CheckpointStrategy::LayerBoundary: return "layer_boundary";
    case CheckpointStrategy::AttentionOutput: return "attention_output";
  }
  return "?";
}

LayerPipeline make_pipeline(int layers, Index tokens, Index d, Index d_ff,
                            std::uint64_t seed) {
  if (layers < 1) throw ConfigError("pipeline needs at least 1 layer");
  if (tokens < 1 || d < 1 || d_ff < 1)
    throw ConfigError("pipeline dims must be positive");
  LayerPipeline pipe;
  pipe.tokens = tokens;
  pipe.d = d;
  pipe.d_ff = d_ff;
  pipe.scale = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(seed);
  const double wd = 1.0 / std::sqrt(static_cast<double>(d));
  const double wff = 1.0 / std::sqrt(static_cast<double>(d_ff));
  pipe.layers.resize(layers);
  for (auto& lw : pipe.layers) {
    lw.wq = rng.matrix(d, d, -wd, wd);
    lw.wk = rng.matrix(d, d, -wd, wd);
    lw.wv = rng.matrix(d, d, -wd, wd);
    lw.wo = rng.matrix(d, d, -wd, wd);
    lw.w_up = rng.matrix(d, d_ff, -wd, wd);
    lw.w_down = rng.matrix(d_ff, d, -wff, wff);
  }
  return pipe;
}

CheckpointPlan plan(const LayerPipeline& pipe, CheckpointStrategy strategy) {
  if (pipe.layers.empty()) throw ConfigError("pipeline needs at least 1 layer");
  CheckpointPlan p;
  p.strategy = strategy;
  const int L = pipe.layer_count();
  switch (strategy) {
    case CheckpointStrategy::None:
      for (Index i = 0; i <= pipe.op_count(); ++i) p.saved_positions.push_back(i);
      break;
    case CheckpointStrategy::LayerBoundary:
      for (int l = 0; l < L; ++l) p.saved_positions.push_back(l * kOpsPerLayer);
      break;
    case CheckpointStrategy::AttentionOutput:
      p.saved_positions.push_back(0);
      for (int l = 0; l < L; ++l)
        p.saved_positions.push_back(l * kOpsPerLayer +
                                    static_cast<int>(OpKind::Attention) + 1);
      break;
  }
  return p;
}

namespace {

/// One link of the value chain. Most ops use `a` only; QkvProj fills
/// (a,b,c) = (q,k,v) and Attention carries its logsumexp in `stat`.
struct Value {
  Matd a, b, c;
  Vecd stat;
};

OpKind op_kind(Index op) {
  return static_cast<OpKind>(op % kOpsPerLayer);
}

Matd rms_norm_forward(const Matd& x) {
  Matd y(x.rows(), x.cols());
  const Index d = x.cols();
  for (Index i = 0; i < x.rows(); ++i) {
    double ms = 0.0;
    for (Index j = 0; j < d; ++j) ms += x(i, j) * x(i, j);
    ms /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(ms + kNormEps);
    for (Index j = 0; j < d; ++j) y(i, j) = x(i, j) * r;
  }
  return y;
}

Matd rms_norm_backward(const Matd& x, const Matd& g) {
  Matd dx(x.rows(), x.cols());
  const Index d = x.cols();
  for (Index i = 0; i < x.rows(); ++i) {
    double ms = 0.0;
    for (Index j = 0; j < d; ++j) ms += x(i, j) * x(i, j);
    ms /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(ms + kNormEps);
    double gx = 0.0;
    for (Index j = 0; j < d; ++j) gx += g(i, j) * x(i, j);
    const double k = gx * r * r * r / static_cast<double>(d);
    for (Index j = 0; j < d; ++j) dx(i, j) = g(i, j) * r - x(i, j) * k;
  }
  return dx;
}

double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

Value op_forward(const LayerPipeline& pipe, Index op, const Value& in) {
  const LayerWeights& lw = pipe.layers[op / kOpsPerLayer];
  Value out;
  switch (op_kind(op)) {
    case OpKind::Norm1:
    case OpKind::Norm2:
      out.a = rms_norm_forward(in.a);
      break;
    case OpKind::QkvProj:
      out.a = matmul(in.a, lw.wq);
      out.b = matmul(in.a, lw.wk);
      out.c = matmul(in.a, lw.wv);
      break;
    case OpKind::Attention: {
      AttnAccumulator acc =
          block_attn_update(in.a, in.b, in.c,
                            AttnAccumulator::fresh(in.a.rows(), in.a.cols()),
                            MaskMode::Diagonal, pipe.scale, pipe.blocks);
      AttnOutput o = finalize(acc);
      out.a = std::move(o.o);
      out.stat = std::move(o.lse);
      break;
    }
    case OpKind::OutProj:
      out.a = matmul(in.a, lw.wo);
      break;
    case OpKind::MlpUp:
      out.a = matmul(in.a, lw.w_up);
      break;
    case OpKind::MlpAct: {
      out.a = Matd(in.a.rows(), in.a.cols());
      for (Index i = 0; i < in.a.rows(); ++i)
        for (Index j = 0; j < in.a.cols(); ++j) {
          const double u = in.a(i, j);
          out.a(i, j) = u * sigmoid(u);
        }
      break;
    }
    case OpKind::MlpDown:
      out.a = matmul(in.a, lw.w_down);
      break;
  }
  return out;
}

/// Gradient w.r.t. the op's input; weight grads land in lg.
Value op_backward(const LayerPipeline& pipe, Index op, const Value& in,
                  const Value& out, const Value& g, LayerGrads& lg) {
  const LayerWeights& lw = pipe.layers[op / kOpsPerLayer];
  Value dx;
  switch (op_kind(op)) {
    case OpKind::Norm1:
    case OpKind::Norm2:
      dx.a = rms_norm_backward(in.a, g.a);
      break;
    case OpKind::QkvProj: {
      const Matd xt = transpose(in.a);
      lg.dwq = matmul(xt, g.a);
      lg.dwk = matmul(xt, g.b);
      lg.dwv = matmul(xt, g.c);
      dx.a = matmul(g.a, lw.wq, /*transpose_b=*/true);
      dx.a += matmul(g.b, lw.wk, /*transpose_b=*/true);
      dx.a += matmul(g.c, lw.wv, /*transpose_b=*/true);
      break;
    }
    case OpKind::Attention: {
      ChunkGrads cg =
          block_attn_backward(in.a, in.b, in.c, out.a, out.stat, g.a,
                              MaskMode::Diagonal, pipe.scale, pipe.blocks);
      dx.a = std::move(cg.dq);
      dx.b = std::move(cg.dk);
      dx.c = std::move(cg.dv);
      break;
    }
    case OpKind::OutProj:
      lg.dwo = matmul(transpose(in.a), g.a);
      dx.a = matmul(g.a, lw.wo, /*transpose_b=*/true);
      break;
    case OpKind::MlpUp:
      lg.dw_up = matmul(transpose(in.a), g.a);
      dx.a = matmul(g.a, lw.w_up, /*transpose_b=*/true);
      break;
    case OpKind::MlpAct: {
      dx.a = Matd(in.a.rows(), in.a.cols());
      for (Index i = 0; i < in.a.rows(); ++i)
        for (Index j = 0; j < in.a.cols(); ++j) {
          const double u = in.a(i, j);
          const double s = sigmoid(u);
          dx.a(i, j) = g.a(i, j) * (s * (1.0 + u * (1.0 - s)));
        }
      break;
    }
    case OpKind::MlpDown:
      lg.dw_down = matmul(transpose(in.a), g.a);
      dx.a = matmul(g.a, lw.w_down, /*transpose_b=*/true);
      break;
  }
  return dx;
}

}  // namespace

CkptRunResult run_with_checkpointing(const LayerPipeline& pipe,
                                     const CheckpointPlan& plan,
                                     const Matd& input, const Matd& d_out) {
  if (pipe.layers.empty()) throw ConfigError("pipeline needs at least 1 layer");
  if (input.rows() != pipe.tokens || input.cols() != pipe.d)
    throw ShapeError("pipeline input must be tokens x d");
  if (d_out.rows() != pipe.tokens || d_out.cols() != pipe.d)
    throw ShapeError("pipeline d_out must be tokens x d");
  if (plan.saved_positions.empty() || plan.saved_positions.front() != 0)
    throw ConfigError("plan must anchor at the pipeline input");

  const int n_ops = pipe.op_count();
  std::vector<char> saved(n_ops + 1, 0);
  for (Index pos : plan.saved_positions) {
    if (pos < 0 || pos > n_ops) throw ConfigError("saved position out of range");
    saved[pos] = 1;
  }

  // Forward, keeping only what the plan saves.
  std::vector<Value> store(n_ops + 1);
  Value cur;
  cur.a = input;
  store[0] = cur;
  for (Index op = 0; op < n_ops; ++op) {
    cur = op_forward(pipe, op, cur);
    if (saved[op + 1] || op + 1 == n_ops) store[op + 1] = cur;
  }
  CkptRunResult result;
  result.output = store[n_ops].a;
  result.grads.layers.resize(pipe.layer_count());

  // Backward over segments, last to first. Each segment recomputes from its
  // checkpoint; under AttentionOutput a boundary attention op is skipped
  // because its output (and logsumexp) were saved precisely for this.
  std::vector<Index> bounds = plan.saved_positions;
  std::sort(bounds.begin(), bounds.end());
  if (bounds.back() != n_ops) bounds.push_back(n_ops);

  Value g;
  g.a = d_out;
  for (std::size_t bi = bounds.size() - 1; bi > 0; --bi) {
    const Index seg_begin = bounds[bi - 1];  // value index of the checkpoint
    const Index seg_end = bounds[bi];        // value index of the next one
    std::vector<Value> vals(seg_end - seg_begin + 1);
    vals[0] = store[seg_begin];
    for (Index op = seg_begin; op < seg_end; ++op) {
      const bool boundary_attention = op + 1 == seg_end && saved[op + 1] &&
                                      op_kind(op) == OpKind::Attention;
      if (plan.strategy == CheckpointStrategy::AttentionOutput &&
          boundary_attention) {
        vals[op + 1 - seg_begin] = store[op + 1];
        continue;
      }
      if (plan.strategy == CheckpointStrategy::None) {
        vals[op + 1 - seg_begin] = store[op + 1];
        continue;
      }
      vals[op + 1 - seg_begin] =
          op_forward(pipe, op, vals[op - seg_begin]);
      ++result.trace.counts[static_cast<int>(op_kind(op))];
    }
    for (Index op = seg_end - 1; op >= seg_begin; --op) {
      LayerGrads& lg = result.grads.layers[op / kOpsPerLayer];
      g = op_backward(pipe, op, vals[op - seg_begin],
                      vals[op + 1 - seg_begin], g, lg);
      if (op == 0) break;
    }
  }
  result.grads.d_input = g.a;
  return result;
}

void CkptCostModel::check() const {
  if (f_attn < 0 || f_rest < 0 || backward < 0)
    throw ConfigError("checkpoint cost model entries must be non-negative");
  if (f_attn + f_rest <= 0)
    throw ConfigError("checkpoint cost model needs a positive forward cost");
}

double iteration_time_model(const CkptCostModel& costs, int layers,
                            CheckpointStrategy strategy) {
  costs.check();
  if (layers < 1) throw ConfigError("need at least 1 layer");
  const double l = static_cast<double>(layers);
  const double fwd = l * (costs.f_attn + costs.f_rest);
  const double bwd = l * costs.backward;
  switch (strategy) {
    case CheckpointStrategy::None: return fwd + bwd;
    case CheckpointStrategy::LayerBoundary:
      return fwd + l * (costs.f_attn + costs.f_rest) + bwd;
    case CheckpointStrategy::AttentionOutput:
      return fwd + l * costs.f_rest + bwd;
  }
  return 0.0;
}

double recompute_time(const RecomputeTrace& trace, const CkptCostModel& costs) {
  costs.check();
  double t = 0.0;
  for (int k = 0; k < kOpsPerLayer; ++k) {
    const double per_op = k == static_cast<int>(OpKind::Attention)
                              ? costs.f_attn
                              : costs.f_rest / kNonAttentionOpsPerLayer;
    t += per_op * static_cast<double>(trace.counts[k]);
  }
  return t;
}

std::int64_t saved_activation_scalars(const CheckpointPlan& plan,
                                      const LayerPipeline& pipe) {
  const std::int64_t per_layer =
      static_cast<std::int64_t>(pipe.tokens) * pipe.d;
  switch (plan.strategy) {
    case CheckpointStrategy::None:
      // every intermediate value; qkv triples count three tensors
      return static_cast<std::int64_t>(pipe.layer_count()) *
             (6 * per_layer +
              2 * static_cast<std::int64_t>(pipe.tokens) * pipe.d_ff +
              2 * per_layer);
    case CheckpointStrategy::LayerBoundary:
    case CheckpointStrategy::AttentionOutput:
      return static_cast<std::int64_t>(pipe.layer_count()) * per_layer;
  }
  return 0;
}

std::int64_t saved_statistic_scalars(const CheckpointPlan& plan,
                                     const LayerPipeline& pipe) {
  if (plan.strategy != CheckpointStrategy::AttentionOutput) return 0;
  return static_cast<std::int64_t>(pipe.layer_count()) * pipe.tokens;
}

std::string ckpt_report_json(const LayerPipeline& pipe,
                             const CheckpointPlan& plan,
                             const RecomputeTrace& trace) {
  nlohmann::json j;
  j["strategy"] = to_string(plan.strategy);
  j["positions"] = plan.saved_positions;
  nlohmann::json counts;
  for (int k = 0; k < kOpsPerLayer; ++k)
    counts[to_string(static_cast<OpKind>(k))] = trace.counts[k];
  j["recompute_counts"] = counts;
  j["attention_forward_recomputes"] = trace.attention_forward_recomputes();
  j["saved_activation_scalars"] = saved_activation_scalars(plan, pipe);
  j["saved_statistic_scalars"] = saved_statistic_scalars(plan, pipe);
  return j.dump(2);
}

}  // namespace distattn
