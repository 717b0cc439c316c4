// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Executes schedules over P logical workers holding sequence shards, with
// point-to-point messaging, prefetch overlap, and a distributed backward
// pass. Two executors share one per-worker operation order: a deterministic
// single-threaded stepper and a concurrent channel executor. They produce
// bit-identical numerics; timing lives in a virtual-time discrete-event
// model, so traces are deterministic too.

#ifndef DISTATTN_RUNTIME_HPP
#define DISTATTN_RUNTIME_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "distattn/flashcore.hpp"
#include "distattn/numerics.hpp"
#include "distattn/schedule.hpp"

namespace distattn {

/// Virtual-time costs: one attention task, one chunk message, one rescale
/// merge. Wall-clock never enters the trace.
struct CostModel {
  double compute = 1.0;
  double comm = 1.0;
  double rescale = 0.0;
};

struct SequenceShard {
  int worker = 0;  // 1-indexed
  Matd q, k, v;    // (N/P) x d each
  Matd out;        // forward output, set by run_forward
  Vecd lse;        // forward logsumexp, set by run_forward
  Matd d_out;      // upstream gradient, caller-set before run_backward
  Matd dq, dk, dv; // set by run_backward

  bool has_forward_state() const { return out.size() > 0 && lse.size() > 0; }
};

/// Evenly split seeded q/k/v shards. total_tokens must divide by workers.
std::vector<SequenceShard> make_shards(int workers, Index total_tokens,
                                       Index d, Rng& rng);

enum class ExecutorMode { Stepper, Concurrent };

struct CommCounters {
  std::int64_t kv_scalars = 0;
  std::int64_t q_scalars = 0;
  std::int64_t partial_scalars = 0;
  std::int64_t grad_scalars = 0;
  std::int64_t kv_messages = 0;
  std::int64_t q_messages = 0;
  std::int64_t partial_messages = 0;
  std::int64_t grad_messages = 0;

  std::int64_t total_scalars() const {
    return kv_scalars + q_scalars + partial_scalars + grad_scalars;
  }
  bool operator==(const CommCounters&) const = default;
};

struct TraceEvent {
  double t0 = 0.0;
  double t1 = 0.0;
  std::string task;
};

struct TraceMessage {
  double t_issue = 0.0;
  double t_arrive = 0.0;
  PayloadKind kind = PayloadKind::KV;
  int from = 0;
  int to = 0;
};

struct ExecutionTrace {
  int workers = 0;
  std::vector<std::vector<TraceEvent>> events;  // indexed by worker-1
  std::vector<TraceMessage> messages;
  CommCounters counters;
  std::int64_t attention_kernel_calls = 0;
  /// High-water mark of remote chunk payloads (kv, q, or grad) held by any
  /// single worker at once: 1, or 2 when prefetching.
  int max_remote_chunks_held = 0;
  double makespan = 0.0;
};

struct RunOptions {
  ExecutorMode mode = ExecutorMode::Stepper;
  bool overlap = false;  // prefetch depth 1: fetch step t+1 at start of step t
  CostModel costs;
  BlockConfig blocks;
};

struct ForwardResult {
  std::vector<AttnOutput> outputs;  // indexed by worker-1
  ExecutionTrace trace;
};

/// Runs the schedule's forward pass. Writes out/lse into the shards and
/// returns per-shard outputs plus the trace. Results are identical bits for
/// both executor modes and for either overlap setting.
ForwardResult run_forward(std::vector<SequenceShard>& shards,
                          const Schedule& schedule,
                          const RunOptions& opts = {});

enum class BackwardMode { Vanilla };

/// Distributed backward over the ring order: worker p accumulates dq over
/// r <= p and returns dk/dv contributions to each kv owner, which folds
/// arrivals in ascending sender order. Requires forward state and d_out on
/// every shard. Writes dq/dk/dv into the shards.
ExecutionTrace run_backward(std::vector<SequenceShard>& shards,
                            BackwardMode bmode = BackwardMode::Vanilla,
                            const RunOptions& opts = {});

inline const CommCounters& comm_counters(const ExecutionTrace& t) {
  return t.counters;
}

std::string trace_to_json(const ExecutionTrace& t);
std::string trace_to_csv(const ExecutionTrace& t);

}  // namespace distattn

#endif  // DISTATTN_RUNTIME_HPP
