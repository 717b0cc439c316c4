// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0

#include "distattn/runtime.hpp"

#include <algorithm>
#include <charconv>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>
#include <utility>
#include <variant>

#include "distattn/errors.hpp"
#include "json.hpp"

namespace distattn {

std::vector<SequenceShard> make_shards(int workers, Index total_tokens,
                                       Index d, Rng& rng) {
  if (workers < 1) throw ConfigError("need at least 1 worker");
  if (total_tokens < 1 || d < 1) throw ConfigError("tokens and d must be positive");
  if (total_tokens % workers != 0)
    throw ConfigError("token count " + std::to_string(total_tokens) +
                      " not divisible by " + std::to_string(workers) +
                      " workers");
  // Draw the full sequence first and slice rows, so a seed pins the same
  // sequence for every worker count.
  const Matd q = rng.matrix(total_tokens, d);
  const Matd k = rng.matrix(total_tokens, d);
  const Matd v = rng.matrix(total_tokens, d);
  const Index rows = total_tokens / workers;
  std::vector<SequenceShard> shards(workers);
  for (int p = 0; p < workers; ++p) {
    shards[p].worker = p + 1;
    shards[p].q = q.middleRows(p * rows, rows);
    shards[p].k = k.middleRows(p * rows, rows);
    shards[p].v = v.middleRows(p * rows, rows);
  }
  return shards;
}

namespace {

std::int64_t payload_scalars(PayloadKind kind, Index rows, Index d) {
  switch (kind) {
    case PayloadKind::KV: return 2 * rows * d;
    case PayloadKind::Q: return rows * d;
    // unnormalized output plus the two statistic vectors
    case PayloadKind::PartialResult: return rows * (d + 2);
    case PayloadKind::GradKV: return 2 * rows * d;
  }
  return 0;
}

void count_message(CommCounters& c, PayloadKind kind, Index rows, Index d) {
  const std::int64_t n = payload_scalars(kind, rows, d);
  switch (kind) {
    case PayloadKind::KV: c.kv_scalars += n; ++c.kv_messages; break;
    case PayloadKind::Q: c.q_scalars += n; ++c.q_messages; break;
    case PayloadKind::PartialResult:
      c.partial_scalars += n;
      ++c.partial_messages;
      break;
    case PayloadKind::GradKV: c.grad_scalars += n; ++c.grad_messages; break;
  }
}

void merge_counters(CommCounters& into, const CommCounters& from) {
  into.kv_scalars += from.kv_scalars;
  into.q_scalars += from.q_scalars;
  into.partial_scalars += from.partial_scalars;
  into.grad_scalars += from.grad_scalars;
  into.kv_messages += from.kv_messages;
  into.q_messages += from.q_messages;
  into.partial_messages += from.partial_messages;
  into.grad_messages += from.grad_messages;
}

struct ResidencyTracker {
  int held = 0;
  int max_held = 0;
  void acquire() {
    ++held;
    max_held = std::max(max_held, held);
  }
  void release() { --held; }
};

// ---------------------------------------------------------------------------
// Shared execution plan. Both executors walk the same per-worker action
// order, which is what guarantees bit-identical results.
// ---------------------------------------------------------------------------

struct StepAction {
  enum class Kind { None, Local, Direct, Help };
  Kind kind = Kind::None;
  int peer = 0;  // Direct: kv owner; Help: query owner
  bool needs_operand() const {
    return kind == Kind::Direct || kind == Kind::Help;
  }
};

struct MergeAction {
  int owner = 0;
  int helper = 0;
};

struct ForwardPlan {
  int workers = 0;
  Index rows = 0;
  Index dim = 0;
  double scale = 1.0;
  std::vector<std::vector<StepAction>> actions;  // [step][worker-1]
  std::vector<std::vector<MergeAction>> merges;  // [step]
};

void check_shards(const std::vector<SequenceShard>& shards, int workers) {
  if (static_cast<int>(shards.size()) != workers)
    throw ShapeError("shard count does not match worker count");
  const Index rows = shards[0].q.rows();
  const Index dim = shards[0].q.cols();
  for (int i = 0; i < workers; ++i) {
    const auto& s = shards[i];
    if (s.worker != i + 1)
      throw ConfigError("shards must be ordered by worker id");
    if (s.q.rows() != rows || s.k.rows() != rows || s.v.rows() != rows ||
        s.q.cols() != dim || s.k.cols() != dim || s.v.cols() != dim)
      throw ShapeError("all shards must share the same q/k/v shape");
  }
}

ForwardPlan make_forward_plan(const std::vector<SequenceShard>& shards,
                              const Schedule& schedule) {
  const auto violations = validate(schedule);
  if (!violations.empty())
    throw ScheduleError("invalid schedule: " + violations.front() + " (" +
                        std::to_string(violations.size()) + " violations)");
  check_shards(shards, schedule.workers);

  ForwardPlan plan;
  plan.workers = schedule.workers;
  plan.rows = shards[0].q.rows();
  plan.dim = shards[0].q.cols();
  plan.scale = 1.0 / std::sqrt(static_cast<double>(plan.dim));
  plan.actions.assign(schedule.step_count(),
                      std::vector<StepAction>(plan.workers));
  plan.merges.resize(schedule.step_count());
  for (std::size_t t = 0; t < schedule.step_count(); ++t) {
    for (const auto& task : schedule.steps[t]) {
      switch (task.kind) {
        case TaskKind::LocalAttn:
          plan.actions[t][task.worker - 1] = {StepAction::Kind::Local, 0};
          break;
        case TaskKind::RemoteAttn:
          if (task.worker == task.query_owner)
            plan.actions[t][task.worker - 1] = {StepAction::Kind::Direct,
                                                task.kv_owner};
          else
            plan.actions[t][task.worker - 1] = {StepAction::Kind::Help,
                                                task.query_owner};
          break;
        case TaskKind::RescaleMerge:
          plan.merges[t].push_back({task.worker, task.helper});
          break;
        case TaskKind::Idle:
          break;
      }
    }
  }
  return plan;
}

std::string action_label(const StepAction& a, int worker) {
  switch (a.kind) {
    case StepAction::Kind::Local: return "local_attn";
    case StepAction::Kind::Direct:
      return "remote_attn q=" + std::to_string(worker) +
             " kv=" + std::to_string(a.peer);
    case StepAction::Kind::Help:
      return "helper_attn q=" + std::to_string(a.peer) +
             " kv=" + std::to_string(worker);
    case StepAction::Kind::None: break;
  }
  return "idle";
}

// ---------------------------------------------------------------------------
// Virtual-time model. Timing is a pure function of (plan, costs, overlap):
// kv/q transfers are sender-passive with latency `comm`, partial results
// leave when the helper's compute ends, and with overlap the fetch for a
// worker's next task is issued at the start of its current compute.
// ---------------------------------------------------------------------------

struct Timing {
  std::vector<std::vector<TraceEvent>> events;
  std::vector<TraceMessage> messages;
  double makespan = 0.0;
};

Timing simulate_forward_timing(const ForwardPlan& plan, const CostModel& cm,
                               bool overlap) {
  const int P = plan.workers;
  Timing out;
  out.events.resize(P);
  std::vector<double> ready(P, 0.0);
  std::vector<double> last_start(P, 0.0);
  std::vector<bool> has_compute(P, false);
  std::map<std::pair<int, int>, double> partial_arrive;

  for (std::size_t t = 0; t < plan.actions.size(); ++t) {
    for (int w = 1; w <= P; ++w) {
      const StepAction& a = plan.actions[t][w - 1];
      if (a.kind == StepAction::Kind::None) continue;
      double start = ready[w - 1];
      if (a.needs_operand()) {
        const double issue =
            (overlap && has_compute[w - 1]) ? last_start[w - 1] : ready[w - 1];
        const double arrive = issue + cm.comm;
        const bool is_kv = a.kind == StepAction::Kind::Direct;
        out.messages.push_back({issue, arrive,
                                is_kv ? PayloadKind::KV : PayloadKind::Q,
                                a.peer, w});
        start = std::max(ready[w - 1], arrive);
      }
      const double end = start + cm.compute;
      out.events[w - 1].push_back({start, end, action_label(a, w)});
      ready[w - 1] = end;
      last_start[w - 1] = start;
      has_compute[w - 1] = true;
      if (a.kind == StepAction::Kind::Help) {
        const double arrive = end + cm.comm;
        out.messages.push_back(
            {end, arrive, PayloadKind::PartialResult, w, a.peer});
        partial_arrive[{a.peer, w}] = arrive;
      }
    }
    for (const auto& m : plan.merges[t]) {
      const double arrive = partial_arrive.at({m.owner, m.helper});
      const double start = std::max(ready[m.owner - 1], arrive);
      const double end = start + cm.rescale;
      out.events[m.owner - 1].push_back(
          {start, end, "rescale_merge helper=" + std::to_string(m.helper)});
      ready[m.owner - 1] = end;
    }
  }
  out.makespan = *std::max_element(ready.begin(), ready.end());
  return out;
}

// ---------------------------------------------------------------------------
// Stepper executor (forward)
// ---------------------------------------------------------------------------

struct WorkerTally {
  CommCounters counters;
  std::int64_t kernel_calls = 0;
  ResidencyTracker residency;
};

void run_forward_stepper(std::vector<SequenceShard>& shards,
                         const ForwardPlan& plan, const RunOptions& opts,
                         std::vector<AttnAccumulator>& accs,
                         std::vector<WorkerTally>& tally) {
  const int P = plan.workers;
  std::map<std::pair<int, int>, std::deque<AttnAccumulator>> partials;
  std::vector<bool> next_op_held(P, false);

  for (std::size_t t = 0; t < plan.actions.size(); ++t) {
    for (int w = 1; w <= P; ++w) {
      const StepAction& a = plan.actions[t][w - 1];
      auto& me = tally[w - 1];
      if (a.needs_operand() && !next_op_held[w - 1]) me.residency.acquire();
      next_op_held[w - 1] = false;
      if (opts.overlap && t + 1 < plan.actions.size() &&
          plan.actions[t + 1][w - 1].needs_operand()) {
        me.residency.acquire();  // prefetch issued at compute start
        next_op_held[w - 1] = true;
      }
      switch (a.kind) {
        case StepAction::Kind::None:
          break;
        case StepAction::Kind::Local: {
          const auto& s = shards[w - 1];
          accs[w - 1] = block_attn_update(s.q, s.k, s.v, std::move(accs[w - 1]),
                                          MaskMode::Diagonal, plan.scale,
                                          opts.blocks);
          ++me.kernel_calls;
          break;
        }
        case StepAction::Kind::Direct: {
          const auto& kv = shards[a.peer - 1];
          count_message(me.counters, PayloadKind::KV, plan.rows, plan.dim);
          accs[w - 1] = block_attn_update(shards[w - 1].q, kv.k, kv.v,
                                          std::move(accs[w - 1]),
                                          MaskMode::Full, plan.scale,
                                          opts.blocks);
          ++me.kernel_calls;
          me.residency.release();
          break;
        }
        case StepAction::Kind::Help: {
          const auto& owner = shards[a.peer - 1];
          const auto& mine = shards[w - 1];
          count_message(me.counters, PayloadKind::Q, plan.rows, plan.dim);
          AttnAccumulator part = block_attn_update(
              owner.q, mine.k, mine.v,
              AttnAccumulator::fresh(plan.rows, plan.dim), MaskMode::Full,
              plan.scale, opts.blocks);
          ++me.kernel_calls;
          partials[{a.peer, w}].push_back(std::move(part));
          me.residency.release();
          break;
        }
      }
    }
    for (const auto& m : plan.merges[t]) {
      auto& queue = partials.at({m.owner, m.helper});
      count_message(tally[m.owner - 1].counters, PayloadKind::PartialResult,
                    plan.rows, plan.dim);
      accs[m.owner - 1] = rescale(accs[m.owner - 1], queue.front());
      queue.pop_front();
    }
  }
}

// ---------------------------------------------------------------------------
// Concurrent executor (forward): one thread per worker, blocking
// point-to-point channels, per-worker order fixed by the plan.
// ---------------------------------------------------------------------------

struct KvPayload {
  Matd k, v;
};
struct QPayload {
  Matd q;
};
struct PartialPayload {
  AttnAccumulator acc;
};
struct GradPayload {
  Matd dk, dv;
};
using Payload = std::variant<KvPayload, QPayload, PartialPayload, GradPayload>;

class Mailbox {
 public:
  void push(Payload p) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      q_.push_back(std::move(p));
    }
    cv_.notify_one();
  }
  Payload pop() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return !q_.empty(); });
    Payload p = std::move(q_.front());
    q_.pop_front();
    return p;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Payload> q_;
};

class MailGrid {
 public:
  explicit MailGrid(int workers) : workers_(workers) {
    boxes_.reserve(static_cast<std::size_t>(workers) * workers);
    for (int i = 0; i < workers * workers; ++i)
      boxes_.push_back(std::make_unique<Mailbox>());
  }
  Mailbox& box(int from, int to) {
    return *boxes_[static_cast<std::size_t>(from - 1) * workers_ + (to - 1)];
  }

 private:
  int workers_;
  std::vector<std::unique_ptr<Mailbox>> boxes_;
};

void run_forward_concurrent(std::vector<SequenceShard>& shards,
                            const ForwardPlan& plan, const RunOptions& opts,
                            std::vector<AttnAccumulator>& accs,
                            std::vector<WorkerTally>& tally) {
  const int P = plan.workers;
  MailGrid mail(P);
  std::vector<std::exception_ptr> errors(P);

  auto worker_fn = [&](int w) {
    try {
      auto& me = tally[w - 1];
      const auto& mine = shards[w - 1];
      // kv/q chunks are immutable shard data: publish them all up front,
      // ordered by consuming step so each channel stays FIFO-consistent.
      for (std::size_t t = 0; t < plan.actions.size(); ++t) {
        for (int w2 = 1; w2 <= P; ++w2) {
          const StepAction& a = plan.actions[t][w2 - 1];
          if (a.kind == StepAction::Kind::Direct && a.peer == w)
            mail.box(w, w2).push(KvPayload{mine.k, mine.v});
          else if (a.kind == StepAction::Kind::Help && a.peer == w)
            mail.box(w, w2).push(QPayload{mine.q});
        }
      }

      std::optional<Payload> held;  // prefetched operand for my next step
      for (std::size_t t = 0; t < plan.actions.size(); ++t) {
        const StepAction& a = plan.actions[t][w - 1];
        std::optional<Payload> operand;
        if (a.needs_operand()) {
          if (held) {
            operand = std::move(held);
            held.reset();
          } else {
            operand = mail.box(a.peer, w).pop();
            me.residency.acquire();
          }
        }
        if (opts.overlap && t + 1 < plan.actions.size() &&
            plan.actions[t + 1][w - 1].needs_operand()) {
          held = mail.box(plan.actions[t + 1][w - 1].peer, w).pop();
          me.residency.acquire();
        }
        switch (a.kind) {
          case StepAction::Kind::None:
            break;
          case StepAction::Kind::Local:
            accs[w - 1] = block_attn_update(mine.q, mine.k, mine.v,
                                            std::move(accs[w - 1]),
                                            MaskMode::Diagonal, plan.scale,
                                            opts.blocks);
            ++me.kernel_calls;
            break;
          case StepAction::Kind::Direct: {
            auto& kv = std::get<KvPayload>(*operand);
            count_message(me.counters, PayloadKind::KV, plan.rows, plan.dim);
            accs[w - 1] = block_attn_update(mine.q, kv.k, kv.v,
                                            std::move(accs[w - 1]),
                                            MaskMode::Full, plan.scale,
                                            opts.blocks);
            ++me.kernel_calls;
            operand.reset();
            me.residency.release();
            break;
          }
          case StepAction::Kind::Help: {
            auto& qc = std::get<QPayload>(*operand);
            count_message(me.counters, PayloadKind::Q, plan.rows, plan.dim);
            AttnAccumulator part = block_attn_update(
                qc.q, mine.k, mine.v,
                AttnAccumulator::fresh(plan.rows, plan.dim), MaskMode::Full,
                plan.scale, opts.blocks);
            ++me.kernel_calls;
            operand.reset();
            me.residency.release();
            mail.box(w, a.peer).push(PartialPayload{std::move(part)});
            break;
          }
        }
        for (const auto& m : plan.merges[t]) {
          if (m.owner != w) continue;
          Payload p = mail.box(m.helper, w).pop();
          count_message(me.counters, PayloadKind::PartialResult, plan.rows,
                        plan.dim);
          accs[w - 1] = rescale(accs[w - 1], std::get<PartialPayload>(p).acc);
        }
      }
    } catch (...) {
      errors[w - 1] = std::current_exception();
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(P);
  for (int w = 1; w <= P; ++w) threads.emplace_back(worker_fn, w);
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

ForwardResult run_forward(std::vector<SequenceShard>& shards,
                          const Schedule& schedule, const RunOptions& opts) {
  opts.blocks.check();
  const ForwardPlan plan = make_forward_plan(shards, schedule);
  const int P = plan.workers;

  std::vector<AttnAccumulator> accs;
  accs.reserve(P);
  for (int w = 0; w < P; ++w)
    accs.push_back(AttnAccumulator::fresh(plan.rows, plan.dim));
  std::vector<WorkerTally> tally(P);

  if (opts.mode == ExecutorMode::Stepper)
    run_forward_stepper(shards, plan, opts, accs, tally);
  else
    run_forward_concurrent(shards, plan, opts, accs, tally);

  ForwardResult result;
  result.outputs.reserve(P);
  for (int w = 0; w < P; ++w) {
    AttnOutput out = finalize(accs[w]);
    shards[w].out = out.o;
    shards[w].lse = out.lse;
    result.outputs.push_back(std::move(out));
  }

  Timing timing = simulate_forward_timing(plan, opts.costs, opts.overlap);
  result.trace.workers = P;
  result.trace.events = std::move(timing.events);
  result.trace.messages = std::move(timing.messages);
  result.trace.makespan = timing.makespan;
  for (const auto& wt : tally) {
    merge_counters(result.trace.counters, wt.counters);
    result.trace.attention_kernel_calls += wt.kernel_calls;
    result.trace.max_remote_chunks_held =
        std::max(result.trace.max_remote_chunks_held, wt.residency.max_held);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Backward: vanilla ring order. Worker p handles kv chunk p-t at step t
// (step 0 is the intra-chunk diagonal), accumulating dq locally and sending
// dk/dv contributions back to the chunk owner, which folds arrivals in
// ascending sender order.
// ---------------------------------------------------------------------------

namespace {

struct BackwardSetup {
  int workers = 0;
  Index rows = 0;
  Index dim = 0;
  double scale = 1.0;
};

BackwardSetup make_backward_setup(const std::vector<SequenceShard>& shards) {
  if (shards.empty()) throw ShapeError("no shards");
  BackwardSetup s;
  s.workers = static_cast<int>(shards.size());
  s.rows = shards[0].q.rows();
  s.dim = shards[0].q.cols();
  s.scale = 1.0 / std::sqrt(static_cast<double>(s.dim));
  check_shards(shards, s.workers);
  for (const auto& sh : shards) {
    if (!sh.has_forward_state())
      throw StateError("run_backward requires forward output and logsumexp");
    if (sh.d_out.rows() != s.rows || sh.d_out.cols() != s.dim)
      throw StateError("run_backward requires d_out on every shard");
  }
  return s;
}

Timing simulate_backward_timing(const BackwardSetup& setup,
                                const CostModel& cm) {
  const int P = setup.workers;
  Timing out;
  out.events.resize(P);
  std::vector<double> ready(P, 0.0);
  for (int t = 0; t < P; ++t) {
    std::vector<double> grad_arrive(P + 1, 0.0);
    for (int p = 1; p <= P; ++p) {
      if (t == 0) {
        const double start = ready[p - 1];
        const double end = start + cm.compute;
        out.events[p - 1].push_back({start, end, "bwd_local"});
        ready[p - 1] = end;
      } else if (t < p) {
        const int r = p - t;
        const double issue = ready[p - 1];
        const double arrive = issue + cm.comm;
        out.messages.push_back({issue, arrive, PayloadKind::KV, r, p});
        const double start = arrive;
        const double end = start + cm.compute;
        out.events[p - 1].push_back(
            {start, end, "bwd_remote kv=" + std::to_string(r)});
        ready[p - 1] = end;
        out.messages.push_back(
            {end, end + cm.comm, PayloadKind::GradKV, p, r});
        grad_arrive[p] = end + cm.comm;
      }
    }
    if (t >= 1) {
      for (int r = 1; r <= P; ++r) {
        const int sender = r + t;
        if (sender <= P)
          ready[r - 1] = std::max(ready[r - 1], grad_arrive[sender]);
      }
    }
  }
  out.makespan = *std::max_element(ready.begin(), ready.end());
  return out;
}

void run_backward_stepper(std::vector<SequenceShard>& shards,
                          const BackwardSetup& setup, const RunOptions& opts,
                          std::vector<WorkerTally>& tally) {
  const int P = setup.workers;
  std::map<std::pair<int, int>, GradPayload> pending;
  for (int t = 0; t < P; ++t) {
    for (int p = 1; p <= P; ++p) {
      auto& s = shards[p - 1];
      auto& me = tally[p - 1];
      if (t == 0) {
        ChunkGrads g = block_attn_backward(s.q, s.k, s.v, s.out, s.lse,
                                           s.d_out, MaskMode::Diagonal,
                                           setup.scale, opts.blocks);
        ++me.kernel_calls;
        s.dq += g.dq;
        s.dk += g.dk;
        s.dv += g.dv;
      } else if (t < p) {
        const int r = p - t;
        const auto& kv = shards[r - 1];
        count_message(me.counters, PayloadKind::KV, setup.rows, setup.dim);
        me.residency.acquire();
        ChunkGrads g = block_attn_backward(s.q, kv.k, kv.v, s.out, s.lse,
                                           s.d_out, MaskMode::Full,
                                           setup.scale, opts.blocks);
        ++me.kernel_calls;
        me.residency.release();
        s.dq += g.dq;
        pending[{p, r}] = GradPayload{std::move(g.dk), std::move(g.dv)};
      }
    }
    if (t >= 1) {
      for (int r = 1; r <= P; ++r) {
        const int sender = r + t;
        if (sender > P) continue;
        auto it = pending.find({sender, r});
        auto& me = tally[r - 1];
        count_message(me.counters, PayloadKind::GradKV, setup.rows, setup.dim);
        me.residency.acquire();
        shards[r - 1].dk += it->second.dk;
        shards[r - 1].dv += it->second.dv;
        me.residency.release();
        pending.erase(it);
      }
    }
  }
}

void run_backward_concurrent(std::vector<SequenceShard>& shards,
                             const BackwardSetup& setup,
                             const RunOptions& opts,
                             std::vector<WorkerTally>& tally) {
  const int P = setup.workers;
  MailGrid mail(P);
  std::vector<std::exception_ptr> errors(P);

  auto worker_fn = [&](int w) {
    try {
      auto& me = tally[w - 1];
      auto& s = shards[w - 1];
      // kv refetches are immutable shard data: publish up front. Receiver
      // p consumes my chunk at its step p - w.
      for (int p = w + 1; p <= P; ++p)
        mail.box(w, p).push(KvPayload{s.k, s.v});

      for (int t = 0; t < P; ++t) {
        if (t == 0) {
          ChunkGrads g = block_attn_backward(s.q, s.k, s.v, s.out, s.lse,
                                             s.d_out, MaskMode::Diagonal,
                                             setup.scale, opts.blocks);
          ++me.kernel_calls;
          s.dq += g.dq;
          s.dk += g.dk;
          s.dv += g.dv;
        } else if (t < w) {
          const int r = w - t;
          Payload p = mail.box(r, w).pop();
          auto& kv = std::get<KvPayload>(p);
          count_message(me.counters, PayloadKind::KV, setup.rows, setup.dim);
          me.residency.acquire();
          ChunkGrads g = block_attn_backward(s.q, kv.k, kv.v, s.out, s.lse,
                                             s.d_out, MaskMode::Full,
                                             setup.scale, opts.blocks);
          ++me.kernel_calls;
          me.residency.release();
          s.dq += g.dq;
          mail.box(w, r).push(GradPayload{std::move(g.dk), std::move(g.dv)});
        }
        const int sender = w + t;
        if (t >= 1 && sender <= P) {
          Payload p = mail.box(sender, w).pop();
          auto& g = std::get<GradPayload>(p);
          count_message(me.counters, PayloadKind::GradKV, setup.rows,
                        setup.dim);
          me.residency.acquire();
          s.dk += g.dk;
          s.dv += g.dv;
          me.residency.release();
        }
      }
    } catch (...) {
      errors[w - 1] = std::current_exception();
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(P);
  for (int w = 1; w <= P; ++w) threads.emplace_back(worker_fn, w);
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

ExecutionTrace run_backward(std::vector<SequenceShard>& shards,
                            BackwardMode bmode, const RunOptions& opts) {
  (void)bmode;  // only the vanilla ring order exists
  opts.blocks.check();
  const BackwardSetup setup = make_backward_setup(shards);
  const int P = setup.workers;
  for (auto& s : shards) {
    s.dq = Matd::Zero(setup.rows, setup.dim);
    s.dk = Matd::Zero(setup.rows, setup.dim);
    s.dv = Matd::Zero(setup.rows, setup.dim);
  }
  std::vector<WorkerTally> tally(P);
  if (opts.mode == ExecutorMode::Stepper)
    run_backward_stepper(shards, setup, opts, tally);
  else
    run_backward_concurrent(shards, setup, opts, tally);

  Timing timing = simulate_backward_timing(setup, opts.costs);
  ExecutionTrace trace;
  trace.workers = P;
  trace.events = std::move(timing.events);
  trace.messages = std::move(timing.messages);
  trace.makespan = timing.makespan;
  for (const auto& wt : tally) {
    merge_counters(trace.counters, wt.counters);
    trace.attention_kernel_calls += wt.kernel_calls;
    trace.max_remote_chunks_held =
        std::max(trace.max_remote_chunks_held, wt.residency.max_held);
  }
  return trace;
}

std::string trace_to_json(const ExecutionTrace& t) {
  nlohmann::json j;
  j["workers"] = nlohmann::json::array();
  for (int w = 0; w < t.workers; ++w) {
    nlohmann::json jw;
    jw["worker"] = w + 1;
    jw["events"] = nlohmann::json::array();
    for (const auto& e : t.events[w])
      jw["events"].push_back({{"t0", e.t0}, {"t1", e.t1}, {"task", e.task}});
    j["workers"].push_back(jw);
  }
  j["messages"] = nlohmann::json::array();
  for (const auto& m : t.messages)
    j["messages"].push_back({{"t_issue", m.t_issue},
                             {"t_arrive", m.t_arrive},
                             {"kind", to_string(m.kind)},
                             {"from", m.from},
                             {"to", m.to}});
  j["counters"] = {{"kv_scalars", t.counters.kv_scalars},
                   {"q_scalars", t.counters.q_scalars},
                   {"partial_scalars", t.counters.partial_scalars},
                   {"grad_scalars", t.counters.grad_scalars},
                   {"kv_messages", t.counters.kv_messages},
                   {"q_messages", t.counters.q_messages},
                   {"partial_messages", t.counters.partial_messages},
                   {"grad_messages", t.counters.grad_messages}};
  j["attention_kernel_calls"] = t.attention_kernel_calls;
  j["max_remote_chunks_held"] = t.max_remote_chunks_held;
  j["makespan"] = t.makespan;
  return j.dump(2);
}

std::string trace_to_csv(const ExecutionTrace& t) {
  std::ostringstream os;
  os << "worker,t0,t1,task\n";
  char buf[64];
  auto num = [&](double v) {
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  };
  for (int w = 0; w < t.workers; ++w)
    for (const auto& e : t.events[w])
      os << w + 1 << ',' << num(e.t0) << ',' << num(e.t1) << ',' << e.task
         << '\n';
  return os.str();
}

}  // namespace distattn
