// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "distattn/errors.hpp"
#include "distattn/reference.hpp"
#include "distattn/runtime.hpp"
#include "distattn/schedule.hpp"
#include "json.hpp"
#include "test_support.hpp"

using namespace distattn;
using testing::concat_rows;
using testing::fd_check_attention;
using testing::max_abs_diff;

namespace {

struct Gathered {
  Matd q, k, v, d_out, dq, dk, dv, out;
};

Gathered gather(const std::vector<SequenceShard>& shards) {
  std::vector<Matd> q, k, v, d_out, dq, dk, dv, out;
  for (const auto& s : shards) {
    q.push_back(s.q), k.push_back(s.k), v.push_back(s.v);
    if (s.d_out.size()) d_out.push_back(s.d_out);
    if (s.dq.size()) dq.push_back(s.dq), dk.push_back(s.dk), dv.push_back(s.dv);
    if (s.out.size()) out.push_back(s.out);
  }
  Gathered g;
  g.q = concat_rows(q), g.k = concat_rows(k), g.v = concat_rows(v);
  if (!d_out.empty()) g.d_out = concat_rows(d_out);
  if (!dq.empty()) {
    g.dq = concat_rows(dq), g.dk = concat_rows(dk), g.dv = concat_rows(dv);
  }
  if (!out.empty()) g.out = concat_rows(out);
  return g;
}

bool outputs_bits_equal(const ForwardResult& a, const ForwardResult& b) {
  if (a.outputs.size() != b.outputs.size()) return false;
  for (std::size_t i = 0; i < a.outputs.size(); ++i) {
    if (!bits_equal(a.outputs[i].o, b.outputs[i].o)) return false;
    if (!bits_equal(a.outputs[i].lse, b.outputs[i].lse)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("make_shards slices one seeded sequence and rejects ragged splits") {
  Rng rng(1);
  auto shards = make_shards(4, 32, 8, rng);
  CHECK(shards.size() == 4);
  CHECK(shards[0].q.rows() == 8);
  Rng rng2(1);
  auto whole = make_shards(1, 32, 8, rng2);
  CHECK(bits_equal(gather(shards).q, whole[0].q));

  Rng rng3(1);
  CHECK_THROWS_AS(make_shards(3, 32, 8, rng3), ConfigError);
  CHECK_THROWS_AS(make_shards(0, 32, 8, rng3), ConfigError);
}

TEST_CASE("P=1 forward equals the dense oracle") {
  Rng rng(2);
  auto shards = make_shards(1, 16, 8, rng);
  const auto res = run_forward(shards, build_ring_schedule(1), {});
  const AttnOutput ref = dense_oracle(shards[0].q, shards[0].k, shards[0].v,
                                      true, 1.0 / std::sqrt(8.0));
  CHECK(max_abs_diff(res.outputs[0].o, ref.o) < 1e-12);
  CHECK(max_abs_diff(res.outputs[0].lse, ref.lse) < 1e-12);
  CHECK(res.trace.counters.total_scalars() == 0);
}

TEST_CASE("ring forward matches the dense oracle, P=4 N=32 d=8") {
  Rng rng(3);
  auto shards = make_shards(4, 32, 8, rng);
  const Gathered g = gather(shards);
  const auto res = run_forward(shards, build_ring_schedule(4), {});
  std::vector<Matd> outs;
  for (const auto& o : res.outputs) outs.push_back(o.o);
  const AttnOutput ref = dense_oracle(g.q, g.k, g.v, true, 1.0 / std::sqrt(8.0));
  CHECK(max_abs_diff(concat_rows(outs), ref.o) < 1e-10);
}

TEST_CASE("balanced forward agrees with ring and the oracle") {
  Rng rng(4);
  auto ring_shards = make_shards(4, 32, 8, rng);
  auto bal_shards = ring_shards;
  const Gathered g = gather(ring_shards);
  const auto ring_res = run_forward(ring_shards, build_ring_schedule(4), {});
  const auto bal_res = run_forward(bal_shards, build_balanced_schedule(4), {});
  const AttnOutput ref = dense_oracle(g.q, g.k, g.v, true, 1.0 / std::sqrt(8.0));
  for (int w = 0; w < 4; ++w) {
    CHECK(max_abs_diff(bal_res.outputs[w].o, ring_res.outputs[w].o) < 1e-12);
    CHECK(max_abs_diff(bal_res.outputs[w].lse, ring_res.outputs[w].lse) < 1e-12);
  }
  std::vector<Matd> outs;
  for (const auto& o : bal_res.outputs) outs.push_back(o.o);
  CHECK(max_abs_diff(concat_rows(outs), ref.o) < 1e-10);
  CHECK(bal_res.trace.counters.partial_messages == 1);  // helper 1 -> owner 4... P=4 has 1 helper task
}

TEST_CASE("stepper and concurrent executors are bit-identical with equal counters") {
  Rng rng(5);
  for (const int p : {1, 2, 4, 8}) {
    for (const bool balanced : {false, true}) {
      auto a = make_shards(p, 32, 8, rng);
      auto b = a;
      const Schedule s = balanced ? build_balanced_schedule(p)
                                  : build_ring_schedule(p);
      RunOptions oa, ob;
      ob.mode = ExecutorMode::Concurrent;
      const auto ra = run_forward(a, s, oa);
      const auto rb = run_forward(b, s, ob);
      CHECK(outputs_bits_equal(ra, rb));
      CHECK(ra.trace.counters == rb.trace.counters);
      CHECK(ra.trace.attention_kernel_calls == rb.trace.attention_kernel_calls);
    }
  }
}

TEST_CASE("overlap flag changes timing only, never numerics") {
  Rng rng(6);
  for (const bool balanced : {false, true}) {
    auto a = make_shards(8, 32, 4, rng);
    auto b = a;
    const Schedule s =
        balanced ? build_balanced_schedule(8) : build_ring_schedule(8);
    RunOptions oa, ob;
    ob.overlap = true;
    const auto ra = run_forward(a, s, oa);
    const auto rb = run_forward(b, s, ob);
    CHECK(outputs_bits_equal(ra, rb));
    CHECK(ra.trace.counters == rb.trace.counters);
    // prefetch shows up only in issue times
    CHECK(rb.trace.makespan <= ra.trace.makespan);
  }
}

TEST_CASE("memory residency: one chunk held, two with prefetch") {
  Rng rng(7);
  for (const bool balanced : {false, true}) {
    auto a = make_shards(8, 64, 4, rng);
    const Schedule s =
        balanced ? build_balanced_schedule(8) : build_ring_schedule(8);
    RunOptions plain;
    const auto ra = run_forward(a, s, plain);
    CHECK(ra.trace.max_remote_chunks_held <= 1);
    RunOptions pre;
    pre.overlap = true;
    auto b = make_shards(8, 64, 4, rng);
    const auto rb = run_forward(b, s, pre);
    CHECK(rb.trace.max_remote_chunks_held <= 2);
    CHECK(rb.trace.max_remote_chunks_held == 2);  // prefetch actually happens
  }
}

TEST_CASE("ring forward kv volume is (P-1)*N*d scalars") {
  Rng rng(8);
  for (const int p : {1, 2, 4, 8}) {
    auto shards = make_shards(p, 32, 8, rng);
    const auto res = run_forward(shards, build_ring_schedule(p), {});
    CHECK(res.trace.counters.kv_scalars ==
          static_cast<std::int64_t>(p - 1) * 32 * 8);
    CHECK(res.trace.counters.q_scalars == 0);
    CHECK(res.trace.counters.partial_scalars == 0);
  }
}

TEST_CASE("balanced forward message accounting") {
  Rng rng(9);
  auto shards = make_shards(8, 64, 8, rng);
  const Schedule s = build_balanced_schedule(8);
  const auto res = run_forward(shards, s, {});
  // same attention work as ring
  CHECK(res.trace.attention_kernel_calls == 36);
  // messages recorded by the schedule match the executed counts
  std::int64_t kv = 0, q = 0, partial = 0;
  for (const auto& m : s.messages) {
    if (m.kind == PayloadKind::KV) ++kv;
    if (m.kind == PayloadKind::Q) ++q;
    if (m.kind == PayloadKind::PartialResult) ++partial;
  }
  CHECK(res.trace.counters.kv_messages == kv);
  CHECK(res.trace.counters.q_messages == q);
  CHECK(res.trace.counters.partial_messages == partial);
  const Index rows = 8, d = 8;
  CHECK(res.trace.counters.kv_scalars == kv * 2 * rows * d);
  CHECK(res.trace.counters.q_scalars == q * rows * d);
  CHECK(res.trace.counters.partial_scalars == partial * rows * (d + 2));
}

TEST_CASE("P=1 backward equals the single-chunk kernel exactly") {
  Rng rng(10);
  auto shards = make_shards(1, 16, 4, rng);
  run_forward(shards, build_ring_schedule(1), {});
  shards[0].d_out = rng.matrix(16, 4);
  run_backward(shards);
  const ChunkGrads g = block_attn_backward(
      shards[0].q, shards[0].k, shards[0].v, shards[0].out, shards[0].lse,
      shards[0].d_out, MaskMode::Diagonal, 1.0 / std::sqrt(4.0));
  CHECK(bits_equal(shards[0].dq, g.dq));
  CHECK(bits_equal(shards[0].dk, g.dk));
  CHECK(bits_equal(shards[0].dv, g.dv));
}

TEST_CASE("distributed backward matches dense reference and finite differences") {
  Rng rng(11);
  auto shards = make_shards(4, 32, 8, rng);
  run_forward(shards, build_ring_schedule(4), {});
  for (auto& s : shards) s.d_out = rng.matrix(8, 8);
  run_backward(shards);
  const Gathered g = gather(shards);
  const double scale = 1.0 / std::sqrt(8.0);
  const DenseGrads ref =
      dense_attention_backward(g.q, g.k, g.v, g.d_out, true, scale);
  CHECK(max_abs_diff(g.dq, ref.dq) < 1e-8);
  CHECK(max_abs_diff(g.dk, ref.dk) < 1e-8);
  CHECK(max_abs_diff(g.dv, ref.dv) < 1e-8);

  const auto fd = fd_check_attention(g.q, g.k, g.v, g.d_out, true, scale, g.dq,
                                     g.dk, g.dv, 1e-6);
  CHECK(fd.max_rel < 1e-5);
}

TEST_CASE("backward executors agree bitwise") {
  Rng rng(12);
  auto a = make_shards(6, 48, 8, rng);
  run_forward(a, build_ring_schedule(6), {});
  for (auto& s : a) s.d_out = rng.matrix(8, 8);
  auto b = a;
  run_backward(a);
  RunOptions conc;
  conc.mode = ExecutorMode::Concurrent;
  const auto trace_b = run_backward(b, BackwardMode::Vanilla, conc);
  for (int w = 0; w < 6; ++w) {
    CHECK(bits_equal(a[w].dq, b[w].dq));
    CHECK(bits_equal(a[w].dk, b[w].dk));
    CHECK(bits_equal(a[w].dv, b[w].dv));
  }
  CHECK(trace_b.counters.grad_messages == 15);  // sum over p of (p-1)
}

TEST_CASE("grad contribution counts follow the causal dependency structure") {
  Rng rng(13);
  const int p = 5;
  auto shards = make_shards(p, 40, 4, rng);
  run_forward(shards, build_ring_schedule(p), {});
  for (auto& s : shards) s.d_out = rng.matrix(8, 4);
  const auto trace = run_backward(shards);
  std::vector<int> grad_messages_to(p + 1, 0);
  for (const auto& m : trace.messages)
    if (m.kind == PayloadKind::GradKV) ++grad_messages_to[m.to];
  // worker 1's kv chunk: P-1 remote contributions (+1 local), last worker: 0
  CHECK(grad_messages_to[1] == p - 1);
  CHECK(grad_messages_to[p] == 0);
  // backward kv refetch volume equals forward kv volume
  CHECK(trace.counters.kv_scalars == static_cast<std::int64_t>(p - 1) * 40 * 4);
  CHECK(trace.counters.grad_scalars == static_cast<std::int64_t>(p - 1) * 40 * 4);
}

TEST_CASE("backward errors without forward state or d_out") {
  Rng rng(14);
  auto shards = make_shards(2, 8, 4, rng);
  CHECK_THROWS_AS(run_backward(shards), StateError);
  run_forward(shards, build_ring_schedule(2), {});
  CHECK_THROWS_AS(run_backward(shards), StateError);
}

TEST_CASE("invalid schedule and mismatched shards are rejected") {
  Rng rng(15);
  auto shards = make_shards(4, 16, 4, rng);
  Schedule bad = build_ring_schedule(4);
  bad.steps[1][0] = Task::remote(1, 3, 2);  // duplicate pair, wrong slot
  CHECK_THROWS_AS(run_forward(shards, bad, {}), ScheduleError);

  auto small = make_shards(2, 8, 4, rng);
  CHECK_THROWS_AS(run_forward(small, build_ring_schedule(4), {}), ShapeError);
}

TEST_CASE("virtual-time trace: ring makespans follow the fetch/compute model") {
  Rng rng(16);
  const int p = 8;
  for (const double m : {0.0, 0.5, 1.0, 2.5}) {
    auto shards = make_shards(p, 16, 4, rng);
    RunOptions plain;
    plain.costs = {1.0, m, 0.0};
    const auto res = run_forward(shards, build_ring_schedule(p), plain);
    CHECK(res.trace.makespan ==
          doctest::Approx(p * 1.0 + (p - 1) * m).epsilon(1e-12));
    auto shards2 = make_shards(p, 16, 4, rng);
    RunOptions lap = plain;
    lap.overlap = true;
    const auto res2 = run_forward(shards2, build_ring_schedule(p), lap);
    CHECK(res2.trace.makespan ==
          doctest::Approx(1.0 + (p - 1) * std::max(1.0, m)).epsilon(1e-12));
  }
}

TEST_CASE("overlap prefetch issues the fetch at the previous compute start") {
  Rng rng(17);
  auto shards = make_shards(4, 16, 4, rng);
  RunOptions lap;
  lap.overlap = true;
  lap.costs = {1.0, 1.0, 0.0};
  const auto res = run_forward(shards, build_ring_schedule(4), lap);
  // worker 2's single kv fetch is prefetched at the start of its local step
  for (const auto& m : res.trace.messages) {
    if (m.kind == PayloadKind::KV && m.to == 2) {
      CHECK(m.t_issue == 0.0);
      CHECK(m.t_arrive == 1.0);
    }
  }
}

TEST_CASE("trace export round trips") {
  Rng rng(18);
  auto shards = make_shards(4, 16, 4, rng);
  const auto res = run_forward(shards, build_balanced_schedule(4), {});
  const auto j = nlohmann::json::parse(trace_to_json(res.trace));
  CHECK(j["workers"].size() == 4);
  CHECK(j["counters"]["kv_scalars"] == res.trace.counters.kv_scalars);
  CHECK(j["messages"].size() == res.trace.messages.size());
  const std::string csv = trace_to_csv(res.trace);
  CHECK(csv.rfind("worker,t0,t1,task", 0) == 0);
}
