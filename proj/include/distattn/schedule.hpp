// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Ring and load-balanced causal-attention schedules as explicit per-timestep
// task tables, independent of execution. Workers are 1-indexed. A schedule
// is pure data: the runtime and the analytic tooling consume the same
// object.

#ifndef DISTATTN_SCHEDULE_HPP
#define DISTATTN_SCHEDULE_HPP

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "distattn/rational.hpp"

namespace distattn {

enum class TaskKind { LocalAttn, RemoteAttn, RescaleMerge, Idle };

struct Task {
  TaskKind kind = TaskKind::Idle;
  int worker = 0;       // slot owner: executor, merge performer, or idler
  int query_owner = 0;  // RemoteAttn
  int kv_owner = 0;     // RemoteAttn
  int helper = 0;       // RescaleMerge: who computed the partial

  static Task local(int w) { return {TaskKind::LocalAttn, w, w, w, 0}; }
  static Task remote(int executor, int qo, int kvo) {
    return {TaskKind::RemoteAttn, executor, qo, kvo, 0};
  }
  static Task merge(int owner, int helper) {
    return {TaskKind::RescaleMerge, owner, 0, 0, helper};
  }
  static Task idle(int w) { return {TaskKind::Idle, w, 0, 0, 0}; }

  bool is_attention() const {
    return kind == TaskKind::LocalAttn || kind == TaskKind::RemoteAttn;
  }
};

enum class PayloadKind { KV, Q, PartialResult, GradKV };

const char* to_string(TaskKind k);
const char* to_string(PayloadKind k);

struct ScheduleMessage {
  int step = 0;  // step whose work consumes the payload
  int from = 0;
  int to = 0;
  PayloadKind kind = PayloadKind::KV;
};

/// Per-timestep task table. steps[t] holds exactly one primary task
/// (attention or idle) per worker, ascending by worker id, followed by the
/// step's rescale merges. A merge runs on the query owner after the step's
/// attention computes finish; it occupies no worker slot of its own, which
/// is what keeps the odd-P balanced schedule at zero idle slots.
struct Schedule {
  int workers = 0;
  std::vector<std::vector<Task>> steps;
  std::vector<ScheduleMessage> messages;

  std::size_t step_count() const { return steps.size(); }

  std::span<const Task> primaries(std::size_t t) const {
    const auto& s = steps[t];
    return {s.data(), static_cast<std::size_t>(workers)};
  }
  std::span<const Task> merges(std::size_t t) const {
    const auto& s = steps[t];
    return {s.data() + workers, s.size() - workers};
  }

  std::size_t attention_task_count() const;
  std::size_t idle_slot_count() const;
  std::size_t merge_count() const;
};

/// Ring pass over earlier chunks: P timesteps, worker p computes at steps
/// 0..p-1 (its own chunk first, then kv of p-1, p-2, ..., 1) and idles
/// afterwards.
Schedule build_ring_schedule(int workers);

/// Load-balanced variant: ceil((P+1)/2) timesteps. After the local step,
/// worker p > t fetches kv chunk p-t; a worker p <= t acts as helper for the
/// wrap-around owner p+P-t, computing that owner's query against its own kv
/// chunk and sending the partial back for a rescale merge in the same step.
/// With even P the helpers would duplicate the distance-P/2 pairs at the
/// final step, so they idle there instead.
Schedule build_balanced_schedule(int workers);

/// Mechanized schedule invariants. Empty result means: exactly one primary
/// task per worker per step, every causal pair (p, r <= p) computed exactly
/// once, every helper partial merged exactly once by its query owner no
/// earlier than it exists, and every remote operand covered by a message
/// sent no later than its consuming step.
std::vector<std::string> validate(const Schedule& s);

/// Idle slots over total worker-step slots. Rescale merges count as work in
/// the sense that they never add idle slots.
Rational idle_fraction(const Schedule& s);

/// Total attention tasks over timesteps: speedup against one worker doing
/// every task serially at unit cost.
Rational expected_speedup(const Schedule& s);

/// Closed form (P^2-P)/(2P^2) for the ring schedule's idle fraction.
Rational ring_idle_fraction_formula(int workers);

/// Published closed form for the balanced schedule: 0 for odd P, 1/(2P) for
/// even P. Direct simulation of the even-P schedule gives 1/(P+2) instead;
/// both are exposed so the disagreement can be reported rather than hidden.
Rational balanced_idle_fraction_reference(int workers);

std::string schedule_to_json(const Schedule& s);
std::string schedule_to_csv(const Schedule& s);

}  // namespace distattn

#endif  // DISTATTN_SCHEDULE_HPP
