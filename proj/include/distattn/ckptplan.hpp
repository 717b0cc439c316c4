// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Rematerialization-aware gradient checkpointing on a toy transformer-layer
// pipeline. Two plans: checkpoints at layer inputs (the usual framework
// heuristic) or at attention outputs. The attention backward consumes the
// saved output and logsumexp, so under the attention-output plan the
// attention forward is never recomputed; gradients are bit-identical across
// plans because every plan replays the identical op order.

#ifndef DISTATTN_CKPTPLAN_HPP
#define DISTATTN_CKPTPLAN_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "distattn/flashcore.hpp"
#include "distattn/numerics.hpp"

namespace distattn {

/// One transformer layer is this fixed op chain; the toy norms, projections
/// and MLP exist to give recomputation real content.
enum class OpKind : int {
  Norm1 = 0,
  QkvProj,
  Attention,
  OutProj,
  Norm2,
  MlpUp,
  MlpAct,
  MlpDown
};
inline constexpr int kOpsPerLayer = 8;
inline constexpr int kNonAttentionOpsPerLayer = kOpsPerLayer - 1;

const char* to_string(OpKind k);

struct LayerWeights {
  Matd wq, wk, wv;   // d x d
  Matd wo;           // d x d
  Matd w_up;         // d x d_ff
  Matd w_down;       // d_ff x d
};

struct LayerPipeline {
  Index tokens = 0;  // local token count N
  Index d = 0;
  Index d_ff = 0;
  double scale = 1.0;  // attention score scale, 1/sqrt(d)
  BlockConfig blocks;
  std::vector<LayerWeights> layers;

  int layer_count() const { return static_cast<int>(layers.size()); }
  int op_count() const { return layer_count() * kOpsPerLayer; }
};

LayerPipeline make_pipeline(int layers, Index tokens, Index d, Index d_ff,
                            std::uint64_t seed);

enum class CheckpointStrategy { None, LayerBoundary, AttentionOutput };
const char* to_string(CheckpointStrategy s);

/// saved_positions index the flat value chain: value 0 is the pipeline
/// input, value i+1 the output of op i. LayerBoundary saves every layer's
/// input; AttentionOutput saves the pipeline input plus every attention
/// output (with its logsumexp); None saves everything.
struct CheckpointPlan {
  CheckpointStrategy strategy = CheckpointStrategy::None;
  std::vector<Index> saved_positions;
};

CheckpointPlan plan(const LayerPipeline& pipe, CheckpointStrategy strategy);

struct RecomputeTrace {
  std::array<std::int64_t, kOpsPerLayer> counts{};  // indexed by OpKind

  std::int64_t count(OpKind k) const { return counts[static_cast<int>(k)]; }
  std::int64_t attention_forward_recomputes() const {
    return count(OpKind::Attention);
  }
  std::int64_t total() const {
    std::int64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

struct LayerGrads {
  Matd dwq, dwk, dwv, dwo, dw_up, dw_down;
};

struct PipelineGrads {
  Matd d_input;
  std::vector<LayerGrads> layers;
};

struct CkptRunResult {
  Matd output;  // pipeline forward output
  PipelineGrads grads;
  RecomputeTrace trace;
};

/// Forward then backward with recomputation from the plan's checkpoints.
/// The gradients are bit-identical to a run without checkpointing.
CkptRunResult run_with_checkpointing(const LayerPipeline& pipe,
                                     const CheckpointPlan& plan,
                                     const Matd& input, const Matd& d_out);

/// Per-layer virtual costs: attention forward, the rest of the layer's
/// forward, and the layer's backward. Negative costs are rejected; a zero
/// attention share is legal (the two plans then cost the same).
struct CkptCostModel {
  double f_attn = 0.0;
  double f_rest = 0.0;
  double backward = 0.0;
  void check() const;
};

/// Modeled iteration time: forward + recompute + backward.
///   LayerBoundary:    L*(f_attn+f_rest) + L*(f_attn+f_rest) + L*backward
///   AttentionOutput:  L*(f_attn+f_rest) + L*f_rest          + L*backward
///   None:             L*(f_attn+f_rest)                     + L*backward
double iteration_time_model(const CkptCostModel& costs, int layers,
                            CheckpointStrategy strategy);

/// Virtual time spent recomputing, with each non-attention op priced at
/// f_rest / 7 so a full layer re-run costs f_attn + f_rest.
double recompute_time(const RecomputeTrace& trace, const CkptCostModel& costs);

/// Scalars of the one N x d checkpoint tensor each strategy retains per
/// layer (the layer input under LayerBoundary, the attention output under
/// AttentionOutput): identical for the two strategies. The pipeline input
/// anchors the first rematerialization-aware segment but is the caller's
/// tensor, alive under every strategy, so it is not counted.
std::int64_t saved_activation_scalars(const CheckpointPlan& plan,
                                      const LayerPipeline& pipe);

/// Logsumexp vectors persisted alongside attention-output checkpoints
/// (N scalars per layer); zero for the other plans.
std::int64_t saved_statistic_scalars(const CheckpointPlan& plan,
                                     const LayerPipeline& pipe);

std::string ckpt_report_json(const LayerPipeline& pipe,
                             const CheckpointPlan& plan,
                             const RecomputeTrace& trace);

}  // namespace distattn

#endif  // DISTATTN_CKPTPLAN_HPP
