// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0

#include "distattn/analyzer.hpp"

#include <algorithm>

#include "distattn/errors.hpp"

namespace distattn {

const char* to_string(CommStrategy s) {
  switch (s) {
    case CommStrategy::SeqParallel: return "seq_parallel";
    case CommStrategy::MegatronTP: return "megatron_tp";
  }
  return "?";
}

Rational comm_volume_nd(const CommScenario& s) {
  if (s.workers < 1) throw ConfigError("need at least 1 worker");
  if (s.kv_ratio <= Rational(0) || s.kv_ratio > Rational(1))
    throw ConfigError("kv_ratio must be in (0, 1]");
  switch (s.strategy) {
    case CommStrategy::SeqParallel: {
      const Rational fwd_factor = s.causal ? Rational(1) : Rational(2);
      const Rational fwd = fwd_factor * s.kv_ratio;           // kv chunks
      const Rational bwd = Rational(2) * fwd_factor * s.kv_ratio;  // kv + grads
      return fwd + bwd;
    }
    case CommStrategy::MegatronTP:
      // six all-gathers + four reduce-scatters; recomputing the forward under
      // layer-boundary checkpointing re-pays the forward collectives.
      return s.with_checkpoint_recompute ? Rational(14) : Rational(10);
  }
  return Rational(0);
}

Rational seq_parallel_forward_kv_volume_nd(int workers, bool causal,
                                            const Rational& kv_ratio) {
  if (workers < 1) throw ConfigError("need at least 1 worker");
  return Rational(workers - 1, workers) * (causal ? Rational(1) : Rational(2)) *
         kv_ratio;
}

double overlap_makespan(const OverlapScenario& s, bool overlapped) {
  if (s.steps < 1) throw ConfigError("need at least 1 step");
  if (s.compute < 0 || s.fetch < 0) throw ConfigError("costs must be >= 0");
  const double t = static_cast<double>(s.steps);
  // Both variants share the shape first + (T-1)*per_step so that the
  // overlapped makespan never exceeds the plain one even at the last ulp,
  // with exact equality when the fetch cost is zero.
  const double first =
      s.first_step_local ? s.compute : s.fetch + s.compute;
  const double per_step = overlapped ? std::max(s.compute, s.fetch)
                                     : s.fetch + s.compute;
  return first + (t - 1.0) * per_step;
}

double comm_overhead_pct(const OverlapScenario& s, bool overlapped) {
  if (s.compute <= 0) throw ConfigError("overhead needs positive compute cost");
  const double base = static_cast<double>(s.steps) * s.compute;
  return (overlap_makespan(s, overlapped) - base) / base * 100.0;
}

}  // namespace distattn
