// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Closed-form communication-volume and overlap-makespan models for comparing
// strategies analytically. Volumes are exact rationals in units of N*d
// scalars (per-worker collective-equivalent volume); byte conversion is a
// presentation concern.

#ifndef DISTATTN_ANALYZER_HPP
#define DISTATTN_ANALYZER_HPP

#include <cstdint>

#include "distattn/rational.hpp"

namespace distattn {

enum class CommStrategy { SeqParallel, MegatronTP };

const char* to_string(CommStrategy s);

struct CommScenario {
  std::int64_t tokens = 0;  // N, reporting only: volumes are in N*d units
  std::int64_t d = 0;
  int workers = 1;
  bool causal = true;
  Rational kv_ratio{1};  // kv heads / query heads
  bool with_checkpoint_recompute = true;
  CommStrategy strategy = CommStrategy::SeqParallel;
};

/// Total communication volume in N*d units.
///   SeqParallel (sequence-parallel blockwise attention): forward kv (causal-halved) + backward kv and gradients,
///     3*kv_ratio when causal; checkpoint recompute adds nothing because the
///     rematerialization-aware plan never re-runs the attention forward.
///   MegatronTP: 10, or 14 with checkpoint recompute; unaffected by kv_ratio
///     (it does not communicate keys and values) and by causality.
Rational comm_volume_nd(const CommScenario& s);

/// Forward kv volume at finite worker count (per-worker average, N*d units):
/// (P-1)/P * (causal ? 1 : 2) * kv_ratio. Matches the runtime's counted
/// kv_scalars / (P*N*d) exactly and tends to the comm_volume_nd forward term
/// as P grows.
Rational seq_parallel_forward_kv_volume_nd(int workers, bool causal,
                                            const Rational& kv_ratio);

struct OverlapScenario {
  std::int64_t steps = 1;        // T
  double compute = 1.0;          // C, per step
  double fetch = 1.0;            // M, per step
  bool first_step_local = true;  // step 1 needs no fetch
};

/// Virtual makespan of T dependent steps.
///   non-overlapped: every fetch serializes before its compute.
///   overlapped:     the fetch for step t+1 is issued when step t's compute
///                   starts, so each later step costs max(C, M).
double overlap_makespan(const OverlapScenario& s, bool overlapped);

/// Extra time over the zero-communication baseline T*C, in percent.
double comm_overhead_pct(const OverlapScenario& s, bool overlapped);

}  // namespace distattn

#endif  // DISTATTN_ANALYZER_HPP
