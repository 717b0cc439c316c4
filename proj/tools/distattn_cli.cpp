// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: verification suites, schedule/timeline emission,
// analytic comparison tables, and checkpoint-strategy reports.
//
//   distattn verify    [--P --N --d --heads --kv-heads --seed --br --bc ...]
//   distattn schedule  --P 8 --strategy ring|balanced [--execute]
//   distattn analyze comm|overlap ...
//   distattn ckpt      --layers 2 --N 32 --d 8 [--model-time ...]
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config error.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "distattn/analyzer.hpp"
#include "distattn/ckptplan.hpp"
#include "distattn/errors.hpp"
#include "distattn/flashcore.hpp"
#include "distattn/numerics.hpp"
#include "distattn/rational.hpp"
#include "distattn/reference.hpp"
#include "distattn/runtime.hpp"
#include "distattn/schedule.hpp"

namespace da = distattn;

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_output(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << '\n';
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw da::ConfigError("cannot open output file: " + path);
  f << text;
}

struct CommonOpts {
  int workers = 4;
  long long tokens = 128;
  long long d = 16;
  int heads = 1;
  int kv_heads = 0;  // 0: same as heads
  int layers = 2;
  long long br = 16;
  long long bc = 16;
  std::uint64_t seed = 0;
  std::string out;
  std::string format = "json";
};

void add_common_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--P", o.workers, "worker count");
  cmd->add_option("--N", o.tokens, "total token count");
  cmd->add_option("--d", o.d, "hidden size per head");
  cmd->add_option("--heads", o.heads, "attention heads");
  cmd->add_option("--kv-heads", o.kv_heads, "key/value heads (default: heads)");
  cmd->add_option("--layers", o.layers, "transformer layers");
  cmd->add_option("--br", o.br, "score block rows");
  cmd->add_option("--bc", o.bc, "score block cols");
  cmd->add_option("--seed", o.seed, "rng seed recorded in every output");
  cmd->add_option("--out", o.out, "output file (default: stdout)");
  cmd->add_option("--format", o.format, "json or csv")
      ->check(CLI::IsMember({"json", "csv"}));
}

void check_common(const CommonOpts& o) {
  if (o.workers < 1) throw da::ConfigError("--P must be >= 1");
  if (o.tokens < 1 || o.d < 1) throw da::ConfigError("--N and --d must be >= 1");
  if (o.tokens % o.workers != 0)
    throw da::ConfigError("--N (" + std::to_string(o.tokens) +
                          ") must be divisible by --P (" +
                          std::to_string(o.workers) + ")");
  if (o.heads < 1) throw da::ConfigError("--heads must be >= 1");
  const int kvh = o.kv_heads == 0 ? o.heads : o.kv_heads;
  if (o.heads % kvh != 0)
    throw da::ConfigError("--heads must be divisible by --kv-heads");
  if (o.br < 1 || o.bc < 1) throw da::ConfigError("block sizes must be >= 1");
}

double max_abs_diff(const da::Matd& a, const da::Matd& b) {
  double m = 0.0;
  for (da::Index i = 0; i < a.rows(); ++i)
    for (da::Index j = 0; j < a.cols(); ++j)
      m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

da::Matd concat_rows(const std::vector<da::Matd>& parts) {
  da::Index rows = 0;
  for (const auto& p : parts) rows += p.rows();
  da::Matd out(rows, parts[0].cols());
  da::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p;
    at += p.rows();
  }
  return out;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

int cmd_verify(const CommonOpts& o) {
  check_common(o);
  std::vector<CheckResult> checks;
  auto add = [&](std::string name, bool pass, std::string detail) {
    checks.push_back({std::move(name), pass, std::move(detail)});
  };
  const da::BlockConfig blocks{static_cast<da::Index>(o.br),
                               static_cast<da::Index>(o.bc)};

  // Schedule construction and arithmetic.
  {
    bool ok = true;
    std::string detail;
    for (int p = 1; p <= std::max(12, o.workers); ++p) {
      for (const bool balanced : {false, true}) {
        const da::Schedule s = balanced ? da::build_balanced_schedule(p)
                                        : da::build_ring_schedule(p);
        const auto viol = da::validate(s);
        if (!viol.empty()) {
          ok = false;
          detail = "P=" + std::to_string(p) + ": " + viol.front();
        }
        if (!balanced &&
            da::idle_fraction(s) != da::ring_idle_fraction_formula(p))
          ok = false;
        if (balanced && p % 2 == 1 && da::idle_fraction(s) != da::Rational(0))
          ok = false;
        if (balanced && s.step_count() != static_cast<std::size_t>((p + 2) / 2))
          ok = false;
      }
    }
    add("schedule_validation", ok, detail.empty() ? "P=1..12 clean" : detail);
  }

  // Forward oracle equivalence, schedule agreement, executor and overlap
  // bitwise equality, one head at a time.
  double max_fwd_err = 0.0;
  double max_sched_diff = 0.0;
  bool bitwise_ok = true;
  bool residency_ok = true;
  da::Rng rng(o.seed);
  for (int h = 0; h < o.heads; ++h) {
    da::Rng head_rng = rng.fork();
    auto shards = da::make_shards(o.workers, o.tokens, o.d, head_rng);
    const da::Matd q = concat_rows([&] {
      std::vector<da::Matd> v;
      for (auto& s : shards) v.push_back(s.q);
      return v;
    }());
    const da::Matd k = concat_rows([&] {
      std::vector<da::Matd> v;
      for (auto& s : shards) v.push_back(s.k);
      return v;
    }());
    const da::Matd v = concat_rows([&] {
      std::vector<da::Matd> vv;
      for (auto& s : shards) vv.push_back(s.v);
      return vv;
    }());
    const double scale = 1.0 / std::sqrt(static_cast<double>(o.d));
    const da::AttnOutput oracle = da::dense_oracle(q, k, v, true, scale);

    const da::Schedule ring = da::build_ring_schedule(o.workers);
    const da::Schedule balanced = da::build_balanced_schedule(o.workers);
    da::RunOptions opts;
    opts.blocks = blocks;

    auto ring_shards = shards;
    const auto ring_out = da::run_forward(ring_shards, ring, opts);
    std::vector<da::Matd> outs;
    for (const auto& ou : ring_out.outputs) outs.push_back(ou.o);
    max_fwd_err = std::max(max_fwd_err, max_abs_diff(concat_rows(outs), oracle.o));

    auto bal_shards = shards;
    const auto bal_out = da::run_forward(bal_shards, balanced, opts);
    for (int w = 0; w < o.workers; ++w)
      max_sched_diff = std::max(
          max_sched_diff, max_abs_diff(bal_out.outputs[w].o, ring_out.outputs[w].o));

    for (const da::Schedule* sched : {&ring, &balanced}) {
      auto a = shards;
      auto b = shards;
      da::RunOptions oa = opts;
      da::RunOptions ob = opts;
      ob.mode = da::ExecutorMode::Concurrent;
      const auto ra = da::run_forward(a, *sched, oa);
      const auto rb = da::run_forward(b, *sched, ob);
      for (int w = 0; w < o.workers; ++w) {
        if (!da::bits_equal(ra.outputs[w].o, rb.outputs[w].o) ||
            !da::bits_equal(ra.outputs[w].lse, rb.outputs[w].lse))
          bitwise_ok = false;
      }
      if (!(ra.trace.counters == rb.trace.counters)) bitwise_ok = false;
      da::RunOptions oc = opts;
      oc.overlap = true;
      auto c = shards;
      const auto rc = da::run_forward(c, *sched, oc);
      for (int w = 0; w < o.workers; ++w)
        if (!da::bits_equal(ra.outputs[w].o, rc.outputs[w].o))
          bitwise_ok = false;
      if (ra.trace.max_remote_chunks_held > 1 ||
          rc.trace.max_remote_chunks_held > 2)
        residency_ok = false;
    }
  }
  add("forward_oracle", max_fwd_err < 1e-10,
      "max_fwd_err=" + fmt(max_fwd_err));
  add("balanced_vs_ring", max_sched_diff < 1e-12,
      "max_diff=" + fmt(max_sched_diff));
  add("executor_and_overlap_bitwise", bitwise_ok, bitwise_ok ? "ok" : "mismatch");
  add("memory_residency", residency_ok,
      residency_ok ? "held<=1, prefetch<=2" : "residency bound exceeded");

  // Backward: dense reference on the given size, executor equivalence, and a
  // small central-difference spot check.
  {
    da::Rng brng(o.seed ^ 0x9E3779B97F4A7C15ULL);
    auto shards = da::make_shards(o.workers, o.tokens, o.d, brng);
    const double scale = 1.0 / std::sqrt(static_cast<double>(o.d));
    da::RunOptions opts;
    opts.blocks = blocks;
    const da::Schedule ring = da::build_ring_schedule(o.workers);
    da::run_forward(shards, ring, opts);
    for (auto& s : shards) s.d_out = brng.matrix(s.q.rows(), s.q.cols());
    auto conc = shards;
    da::run_backward(shards, da::BackwardMode::Vanilla, opts);
    da::RunOptions opts2 = opts;
    opts2.mode = da::ExecutorMode::Concurrent;
    da::run_backward(conc, da::BackwardMode::Vanilla, opts2);
    bool bw_bitwise = true;
    for (int w = 0; w < o.workers; ++w) {
      if (!da::bits_equal(shards[w].dq, conc[w].dq) ||
          !da::bits_equal(shards[w].dk, conc[w].dk) ||
          !da::bits_equal(shards[w].dv, conc[w].dv))
        bw_bitwise = false;
    }

    std::vector<da::Matd> qs, ks, vs, dos, dqs, dks, dvs;
    for (auto& s : shards) {
      qs.push_back(s.q), ks.push_back(s.k), vs.push_back(s.v);
      dos.push_back(s.d_out);
      dqs.push_back(s.dq), dks.push_back(s.dk), dvs.push_back(s.dv);
    }
    const da::DenseGrads ref = da::dense_attention_backward(
        concat_rows(qs), concat_rows(ks), concat_rows(vs), concat_rows(dos),
        true, scale);
    const double bw_err = std::max(
        {max_abs_diff(concat_rows(dqs), ref.dq),
         max_abs_diff(concat_rows(dks), ref.dk),
         max_abs_diff(concat_rows(dvs), ref.dv)});
    add("backward_dense_reference", bw_err < 1e-8, "max_bwd_err=" + fmt(bw_err));
    add("backward_executor_bitwise", bw_bitwise, bw_bitwise ? "ok" : "mismatch");

    // finite differences on a fixed small case
    {
      const int fp = 2;
      const da::Index fn = 16, fd_dim = 4;
      da::Rng frng(o.seed + 17);
      auto fsh = da::make_shards(fp, fn, fd_dim, frng);
      const double fscale = 1.0 / std::sqrt(static_cast<double>(fd_dim));
      const da::Schedule fring = da::build_ring_schedule(fp);
      da::RunOptions fopts;
      da::run_forward(fsh, fring, fopts);
      for (auto& s : fsh) s.d_out = frng.matrix(s.q.rows(), s.q.cols());
      da::run_backward(fsh, da::BackwardMode::Vanilla, fopts);

      std::vector<da::Matd> qs2, ks2, vs2, dos2;
      for (auto& s : fsh) {
        qs2.push_back(s.q), ks2.push_back(s.k), vs2.push_back(s.v);
        dos2.push_back(s.d_out);
      }
      da::Matd q = concat_rows(qs2), k = concat_rows(ks2), v = concat_rows(vs2),
               dO = concat_rows(dos2);
      auto loss = [&](const da::Matd& qq, const da::Matd& kk,
                      const da::Matd& vv) {
        const da::AttnOutput out = da::dense_oracle(qq, kk, vv, true, fscale);
        double l = 0.0;
        for (da::Index i = 0; i < out.o.rows(); ++i)
          for (da::Index j = 0; j < out.o.cols(); ++j)
            l += dO(i, j) * out.o(i, j);
        return l;
      };
      const double h = 1e-6;
      double max_rel = 0.0;
      auto fd_check = [&](da::Matd& m, const std::vector<da::Matd>& got) {
        const da::Matd grad = concat_rows(got);
        for (da::Index i = 0; i < m.rows(); ++i)
          for (da::Index j = 0; j < m.cols(); ++j) {
            const double keep = m(i, j);
            m(i, j) = keep + h;
            const double up = loss(q, k, v);
            m(i, j) = keep - h;
            const double down = loss(q, k, v);
            m(i, j) = keep;
            const double fd = (up - down) / (2 * h);
            const double an = grad(i, j);
            max_rel = std::max(max_rel,
                               std::abs(fd - an) / std::max(1.0, std::abs(an)));
          }
      };
      std::vector<da::Matd> dqs2, dks2, dvs2;
      for (auto& s : fsh) {
        dqs2.push_back(s.dq), dks2.push_back(s.dk), dvs2.push_back(s.dv);
      }
      fd_check(q, dqs2);
      fd_check(k, dks2);
      fd_check(v, dvs2);
      add("backward_finite_difference", max_rel < 1e-5,
          "max_rel=" + fmt(max_rel));
    }
  }

  // Checkpointing equality.
  {
    const auto pipe = da::make_pipeline(2, 16, 8, 16, o.seed + 3);
    da::Rng crng(o.seed + 4);
    const da::Matd input = crng.matrix(16, 8);
    const da::Matd d_out = crng.matrix(16, 8);
    const auto base = da::run_with_checkpointing(
        pipe, da::plan(pipe, da::CheckpointStrategy::None), input, d_out);
    const auto lb = da::run_with_checkpointing(
        pipe, da::plan(pipe, da::CheckpointStrategy::LayerBoundary), input,
        d_out);
    const auto ao = da::run_with_checkpointing(
        pipe, da::plan(pipe, da::CheckpointStrategy::AttentionOutput), input,
        d_out);
    bool equal = da::bits_equal(base.grads.d_input, lb.grads.d_input) &&
                 da::bits_equal(base.grads.d_input, ao.grads.d_input);
    for (int l = 0; l < 2; ++l) {
      equal = equal &&
              da::bits_equal(base.grads.layers[l].dwq, lb.grads.layers[l].dwq) &&
              da::bits_equal(base.grads.layers[l].dwq, ao.grads.layers[l].dwq) &&
              da::bits_equal(base.grads.layers[l].dw_down,
                             ao.grads.layers[l].dw_down);
    }
    const bool counts_ok = lb.trace.attention_forward_recomputes() == 2 &&
                           ao.trace.attention_forward_recomputes() == 0;
    add("checkpoint_bitwise", equal, equal ? "ok" : "gradient mismatch");
    add("checkpoint_recompute_counts", counts_ok,
        "layer_boundary=" + std::to_string(lb.trace.attention_forward_recomputes()) +
            " attention_output=" +
            std::to_string(ao.trace.attention_forward_recomputes()));
  }

  bool all = true;
  std::ostringstream report;
  for (const auto& c : checks) {
    all = all && c.pass;
    report << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << ": " << c.detail
           << '\n';
  }
  report << (all ? "verify: all checks passed\n" : "verify: FAILURES\n");
  std::cout << report.str();

  if (!o.out.empty()) {
    nlohmann::json j;
    j["seed"] = o.seed;
    j["P"] = o.workers;
    j["N"] = o.tokens;
    j["d"] = o.d;
    j["checks"] = nlohmann::json::array();
    for (const auto& c : checks)
      j["checks"].push_back({{"name", c.name}, {"pass", c.pass},
                             {"detail", c.detail}});
    j["pass"] = all;
    write_output(j.dump(2) + "\n", o.out);
  }
  return all ? 0 : 1;
}

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

int cmd_schedule(const CommonOpts& o, const std::string& strategy,
                 bool execute) {
  if (o.workers < 1) throw da::ConfigError("--P must be >= 1");
  const bool balanced = strategy == "balanced";
  const da::Schedule s = balanced ? da::build_balanced_schedule(o.workers)
                                  : da::build_ring_schedule(o.workers);
  const da::Rational idle = da::idle_fraction(s);
  const da::Rational speedup = da::expected_speedup(s);
  std::ostringstream summary;
  summary << "strategy=" << strategy << " P=" << o.workers
          << " steps=" << s.step_count() << " idle=" << fmt(idle.to_double())
          << " speedup=" << fmt(speedup.to_double());
  std::cout << summary.str() << '\n';
  std::optional<da::Rational> claimed;
  if (balanced && o.workers % 2 == 0) {
    claimed = da::balanced_idle_fraction_reference(o.workers);
    if (*claimed != idle)
      std::cout << "note: simulated even-P idle fraction " << idle.to_string()
                << " disagrees with the closed-form claim 1/(2P) = "
                << claimed->to_string() << '\n';
  }

  std::string doc;
  if (execute) {
    check_common(o);
    da::Rng rng(o.seed);
    auto shards = da::make_shards(o.workers, o.tokens, o.d, rng);
    da::RunOptions opts;
    opts.mode = da::ExecutorMode::Concurrent;
    opts.overlap = true;
    opts.blocks = {static_cast<da::Index>(o.br), static_cast<da::Index>(o.bc)};
    const auto res = da::run_forward(shards, s, opts);
    if (o.format == "csv") {
      doc = "# seed=" + std::to_string(o.seed) + "\n" +
            da::trace_to_csv(res.trace);
    } else {
      nlohmann::json j = nlohmann::json::parse(da::trace_to_json(res.trace));
      j["seed"] = o.seed;
      doc = j.dump(2) + "\n";
    }
  } else if (o.format == "csv") {
    std::ostringstream os;
    os << "# seed=" << o.seed << "\n# " << summary.str() << '\n'
       << da::schedule_to_csv(s);
    doc = os.str();
  } else {
    nlohmann::json j;
    j["seed"] = o.seed;
    j["strategy"] = strategy;
    j["summary"] = {{"steps", s.step_count()},
                    {"idle_fraction", idle.to_double()},
                    {"idle_fraction_rational", idle.to_string()},
                    {"expected_speedup", speedup.to_double()},
                    {"expected_speedup_rational", speedup.to_string()},
                    {"attention_tasks", s.attention_task_count()},
                    {"idle_slots", s.idle_slot_count()},
                    {"rescale_merges", s.merge_count()}};
    if (claimed) {
      j["summary"]["claimed_even_idle_fraction"] = claimed->to_double();
      j["summary"]["claimed_even_idle_fraction_rational"] = claimed->to_string();
      j["summary"]["idle_fraction_conflict"] = *claimed != idle;
    }
    j["schedule"] = nlohmann::json::parse(da::schedule_to_json(s));
    doc = j.dump(2) + "\n";
  }
  if (!o.out.empty())
    write_output(doc, o.out);
  else if (!execute)
    std::cout << doc;
  return 0;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

da::Rational parse_ratio(const std::string& text) {
  const auto slash = text.find('/');
  if (slash != std::string::npos) {
    const long long num = std::stoll(text.substr(0, slash));
    const long long den = std::stoll(text.substr(slash + 1));
    return da::Rational(num, den);
  }
  const double v = std::stod(text);
  for (long long den = 1; den <= 4096; ++den) {
    const double num = v * static_cast<double>(den);
    const long long n = std::llround(num);
    if (std::abs(num - static_cast<double>(n)) < 1e-12)
      return da::Rational(n, den);
  }
  throw da::ConfigError("--kv-ratio must be a small rational, got " + text);
}

int cmd_analyze_comm(const CommonOpts& o, const std::string& ratio_text,
                     bool non_causal, bool no_recompute) {
  da::Rational ratio(1);
  if (!ratio_text.empty())
    ratio = parse_ratio(ratio_text);
  else if (o.kv_heads > 0)
    ratio = da::Rational(o.kv_heads, o.heads);

  da::CommScenario base;
  base.tokens = o.tokens;
  base.d = o.d;
  base.workers = o.workers;
  base.causal = !non_causal;
  base.kv_ratio = ratio;
  base.with_checkpoint_recompute = !no_recompute;

  da::CommScenario sp = base;
  sp.strategy = da::CommStrategy::SeqParallel;
  da::CommScenario mtp = base;
  mtp.strategy = da::CommStrategy::MegatronTP;
  const da::Rational v_sp = da::comm_volume_nd(sp);
  const da::Rational v_mtp = da::comm_volume_nd(mtp);
  const da::Rational reduction = v_mtp / v_sp;

  std::ostringstream text;
  text << "seq_parallel  volume=" << v_sp.to_string() << " Nd ("
       << fmt(v_sp.to_double()) << ")\n"
       << "megatron_tp   volume=" << v_mtp.to_string() << " Nd ("
       << fmt(v_mtp.to_double()) << ")\n"
       << "reduction=" << reduction.to_string() << " ("
       << fmt(std::round(reduction.to_double() * 100.0) / 100.0) << "x)\n";
  std::cout << text.str();

  std::string doc;
  if (o.format == "csv") {
    std::ostringstream os;
    os << "# seed=" << o.seed << '\n'
       << "strategy,N,d,P,kv_ratio,volume_Nd,makespan,overhead_pct\n";
    os << "seq_parallel," << o.tokens << ',' << o.d << ',' << o.workers << ','
       << fmt(ratio.to_double()) << ',' << fmt(v_sp.to_double()) << ",,\n";
    os << "megatron_tp," << o.tokens << ',' << o.d << ',' << o.workers << ','
       << fmt(ratio.to_double()) << ',' << fmt(v_mtp.to_double()) << ",,\n";
    doc = os.str();
  } else {
    nlohmann::json j;
    j["seed"] = o.seed;
    j["N"] = o.tokens;
    j["d"] = o.d;
    j["P"] = o.workers;
    j["kv_ratio"] = ratio.to_string();
    j["causal"] = !non_causal;
    j["with_checkpoint_recompute"] = !no_recompute;
    j["rows"] = {{{"strategy", "seq_parallel"},
                  {"volume_Nd", v_sp.to_double()},
                  {"volume_Nd_rational", v_sp.to_string()}},
                 {{"strategy", "megatron_tp"},
                  {"volume_Nd", v_mtp.to_double()},
                  {"volume_Nd_rational", v_mtp.to_string()}}};
    j["reduction"] = reduction.to_double();
    j["reduction_rational"] = reduction.to_string();
    doc = j.dump(2) + "\n";
  }
  if (!o.out.empty()) write_output(doc, o.out);
  return 0;
}

int cmd_analyze_overlap(const CommonOpts& o, long long steps, double compute,
                        double fetch) {
  da::OverlapScenario s;
  s.steps = steps;
  s.compute = compute;
  s.fetch = fetch;
  const double plain = da::overlap_makespan(s, false);
  const double lapped = da::overlap_makespan(s, true);
  std::ostringstream text;
  text << "non-overlapped makespan=" << fmt(plain) << " overhead="
       << fmt(da::comm_overhead_pct(s, false)) << "%\n"
       << "overlapped     makespan=" << fmt(lapped) << " overhead="
       << fmt(da::comm_overhead_pct(s, true)) << "%\n";
  std::cout << text.str();

  std::string doc;
  if (o.format == "csv") {
    std::ostringstream os;
    os << "# seed=" << o.seed << '\n'
       << "strategy,N,d,P,kv_ratio,volume_Nd,makespan,overhead_pct\n"
       << "non_overlapped,,,,,," << fmt(plain) << ','
       << fmt(da::comm_overhead_pct(s, false)) << '\n'
       << "overlapped,,,,,," << fmt(lapped) << ','
       << fmt(da::comm_overhead_pct(s, true)) << '\n';
    doc = os.str();
  } else {
    nlohmann::json j;
    j["seed"] = o.seed;
    j["T"] = steps;
    j["C"] = compute;
    j["M"] = fetch;
    j["non_overlapped"] = {{"makespan", plain},
                           {"overhead_pct", da::comm_overhead_pct(s, false)}};
    j["overlapped"] = {{"makespan", lapped},
                       {"overhead_pct", da::comm_overhead_pct(s, true)}};
    doc = j.dump(2) + "\n";
  }
  if (!o.out.empty()) write_output(doc, o.out);
  return 0;
}

// ---------------------------------------------------------------------------
// ckpt
// ---------------------------------------------------------------------------

int cmd_ckpt(const CommonOpts& o, long long d_ff_opt, bool model_time,
             double f_attn, double f_rest, double backward_cost) {
  if (o.layers < 1) throw da::ConfigError("--layers must be >= 1");
  if (o.tokens < 1 || o.d < 1) throw da::ConfigError("--N and --d must be >= 1");
  const da::Index d_ff = d_ff_opt > 0 ? d_ff_opt : 4 * o.d;

  const auto pipe = da::make_pipeline(o.layers, o.tokens, o.d, d_ff, o.seed);
  da::Rng rng(o.seed + 1);
  const da::Matd input = rng.matrix(o.tokens, o.d);
  const da::Matd d_out = rng.matrix(o.tokens, o.d);

  const auto p_none = da::plan(pipe, da::CheckpointStrategy::None);
  const auto p_lb = da::plan(pipe, da::CheckpointStrategy::LayerBoundary);
  const auto p_ao = da::plan(pipe, da::CheckpointStrategy::AttentionOutput);
  const auto r_none = da::run_with_checkpointing(pipe, p_none, input, d_out);
  const auto r_lb = da::run_with_checkpointing(pipe, p_lb, input, d_out);
  const auto r_ao = da::run_with_checkpointing(pipe, p_ao, input, d_out);

  bool equal = da::bits_equal(r_none.grads.d_input, r_lb.grads.d_input) &&
               da::bits_equal(r_none.grads.d_input, r_ao.grads.d_input);
  for (int l = 0; l < o.layers; ++l) {
    const auto& a = r_none.grads.layers[l];
    const auto& b = r_lb.grads.layers[l];
    const auto& c = r_ao.grads.layers[l];
    equal = equal && da::bits_equal(a.dwq, b.dwq) && da::bits_equal(a.dwq, c.dwq) &&
            da::bits_equal(a.dwk, b.dwk) && da::bits_equal(a.dwk, c.dwk) &&
            da::bits_equal(a.dwv, b.dwv) && da::bits_equal(a.dwv, c.dwv) &&
            da::bits_equal(a.dwo, b.dwo) && da::bits_equal(a.dwo, c.dwo) &&
            da::bits_equal(a.dw_up, b.dw_up) && da::bits_equal(a.dw_up, c.dw_up) &&
            da::bits_equal(a.dw_down, b.dw_down) &&
            da::bits_equal(a.dw_down, c.dw_down);
  }

  std::ostringstream text;
  text << "gradients bitwise-equal across plans: " << (equal ? "yes" : "NO")
       << '\n'
       << "attention forward recomputes: layer_boundary="
       << r_lb.trace.attention_forward_recomputes()
       << " attention_output=" << r_ao.trace.attention_forward_recomputes()
       << '\n'
       << "saved activation scalars: layer_boundary="
       << da::saved_activation_scalars(p_lb, pipe)
       << " attention_output=" << da::saved_activation_scalars(p_ao, pipe)
       << '\n';

  std::int64_t saved_comm = 0;
  if (o.workers > 1) {
    da::Rng srng(o.seed + 2);
    auto shards =
        da::make_shards(o.workers, o.tokens * o.workers, o.d, srng);
    const da::Schedule ring = da::build_ring_schedule(o.workers);
    auto res = da::run_forward(shards, ring, {});
    saved_comm = static_cast<std::int64_t>(o.layers) *
                 res.trace.counters.kv_scalars;
    text << "forward kv re-communication avoided per recompute pass: "
         << saved_comm << " scalars\n";
  }

  double t_lb = 0, t_ao = 0;
  if (model_time) {
    da::CkptCostModel costs{f_attn, f_rest, backward_cost};
    t_lb = da::iteration_time_model(costs, o.layers,
                                    da::CheckpointStrategy::LayerBoundary);
    t_ao = da::iteration_time_model(costs, o.layers,
                                    da::CheckpointStrategy::AttentionOutput);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f", t_lb / t_ao);
    text << "modeled time: layer_boundary=" << fmt(t_lb)
         << " attention_output=" << fmt(t_ao) << " speedup=" << buf << "x\n";
  }
  std::cout << text.str();

  if (!o.out.empty()) {
    nlohmann::json j;
    j["seed"] = o.seed;
    j["layers"] = o.layers;
    j["N"] = o.tokens;
    j["d"] = o.d;
    j["d_ff"] = d_ff;
    j["bitwise_equal"] = equal;
    j["plans"] = {nlohmann::json::parse(da::ckpt_report_json(pipe, p_lb, r_lb.trace)),
                  nlohmann::json::parse(da::ckpt_report_json(pipe, p_ao, r_ao.trace))};
    if (o.workers > 1) j["saved_forward_comm_scalars"] = saved_comm;
    if (model_time) {
      j["modeled_time"] = {{"layer_boundary", t_lb},
                           {"attention_output", t_ao},
                           {"speedup", t_lb / t_ao}};
    }
    write_output(j.dump(2) + "\n", o.out);
  }
  return equal ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale distributed blockwise causal attention toolkit"};
  app.require_subcommand(1);

  CommonOpts common;

  auto* verify = app.add_subcommand("verify", "run the verification suites");
  add_common_flags(verify, common);

  auto* schedule =
      app.add_subcommand("schedule", "emit a schedule table and summary");
  std::string strategy = "ring";
  bool execute = false;
  add_common_flags(schedule, common);
  schedule->add_option("--strategy", strategy, "ring or balanced")
      ->check(CLI::IsMember({"ring", "balanced"}));
  schedule->add_flag("--execute", execute,
                     "run the schedule and emit the execution trace");

  auto* analyze = app.add_subcommand("analyze", "closed-form cost models");
  analyze->require_subcommand(1);
  auto* comm = analyze->add_subcommand("comm", "communication volumes");
  std::string kv_ratio_text;
  bool non_causal = false, no_recompute = false;
  add_common_flags(comm, common);
  comm->add_option("--kv-ratio", kv_ratio_text,
                   "kv heads / query heads, e.g. 0.25 or 8/32");
  comm->add_flag("--non-causal", non_causal, "disable the causal halving");
  comm->add_flag("--no-recompute", no_recompute,
                 "model Megatron without checkpoint recompute");
  auto* overlap = analyze->add_subcommand("overlap", "fetch/compute makespans");
  long long steps_t = 8;
  double cost_c = 1.0, cost_m = 1.0;
  add_common_flags(overlap, common);
  overlap->add_option("--T", steps_t, "step count");
  overlap->add_option("--C", cost_c, "compute cost per step");
  overlap->add_option("--M", cost_m, "fetch cost per step");

  auto* ckpt = app.add_subcommand("ckpt", "checkpoint strategy comparison");
  long long d_ff = 0;
  bool model_time = false;
  double f_attn = 0.6, f_rest = 0.4, backward_cost = 2.0;
  add_common_flags(ckpt, common);
  ckpt->add_option("--d-ff", d_ff, "mlp hidden size (default 4*d)");
  ckpt->add_flag("--model-time", model_time, "report modeled iteration times");
  ckpt->add_option("--f-attn", f_attn, "attention forward cost per layer");
  ckpt->add_option("--f-rest", f_rest, "non-attention forward cost per layer");
  ckpt->add_option("--b", backward_cost, "backward cost per layer");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    if (verify->parsed()) return cmd_verify(common);
    if (schedule->parsed()) return cmd_schedule(common, strategy, execute);
    if (comm->parsed())
      return cmd_analyze_comm(common, kv_ratio_text, non_causal, no_recompute);
    if (overlap->parsed())
      return cmd_analyze_overlap(common, steps_t, cost_c, cost_m);
    if (ckpt->parsed())
      return cmd_ckpt(common, d_ff, model_time, f_attn, f_rest, backward_cost);
  } catch (const da::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const da::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
