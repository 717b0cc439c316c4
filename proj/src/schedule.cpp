// Copyright 2026 the distattn authors
// SPDX-License-Identifier: Apache-2.0

#include "distattn/schedule.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "distattn/errors.hpp"
#include "json.hpp"

namespace distattn {

const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::LocalAttn: return "local_attn";
    case TaskKind::RemoteAttn: return "remote_attn";
    case TaskKind::RescaleMerge: return "rescale_merge";
    case TaskKind::Idle: return "idle";
  }
  return "?";
}

const char* to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::KV: return "kv";
    case PayloadKind::Q: return "q";
    case PayloadKind::PartialResult: return "partial";
    case PayloadKind::GradKV: return "grad_kv";
  }
  return "?";
}

std::size_t Schedule::attention_task_count() const {
  std::size_t n = 0;
  for (const auto& step : steps)
    for (const auto& t : step)
      if (t.is_attention()) ++n;
  return n;
}

std::size_t Schedule::idle_slot_count() const {
  std::size_t n = 0;
  for (const auto& step : steps)
    for (const auto& t : step)
      if (t.kind == TaskKind::Idle) ++n;
  return n;
}

std::size_t Schedule::merge_count() const {
  std::size_t n = 0;
  for (const auto& step : steps)
    for (const auto& t : step)
      if (t.kind == TaskKind::RescaleMerge) ++n;
  return n;
}

Schedule build_ring_schedule(int workers) {
  if (workers < 1) throw ConfigError("ring schedule needs at least 1 worker");
  Schedule s;
  s.workers = workers;
  s.steps.resize(workers);
  for (int p = 1; p <= workers; ++p) s.steps[0].push_back(Task::local(p));
  for (int t = 1; t < workers; ++t) {
    for (int p = 1; p <= workers; ++p) {
      if (p > t) {
        s.steps[t].push_back(Task::remote(p, p, p - t));
        s.messages.push_back({t, p - t, p, PayloadKind::KV});
      } else {
        s.steps[t].push_back(Task::idle(p));
      }
    }
  }
  return s;
}

Schedule build_balanced_schedule(int workers) {
  if (workers < 1)
    throw ConfigError("balanced schedule needs at least 1 worker");
  Schedule s;
  s.workers = workers;
  const int half = workers / 2;
  s.steps.resize(half + 1);
  for (int p = 1; p <= workers; ++p) s.steps[0].push_back(Task::local(p));
  for (int t = 1; t <= half; ++t) {
    std::vector<Task> merges;
    for (int p = 1; p <= workers; ++p) {
      if (p > t) {
        s.steps[t].push_back(Task::remote(p, p, p - t));
        s.messages.push_back({t, p - t, p, PayloadKind::KV});
      } else if (workers % 2 == 0 && t == half) {
        // A helper here would recompute a distance-P/2 pair already
        // covered by the direct workers.
        s.steps[t].push_back(Task::idle(p));
      } else {
        const int owner = p + workers - t;
        s.steps[t].push_back(Task::remote(p, owner, p));
        s.messages.push_back({t, owner, p, PayloadKind::Q});
        s.messages.push_back({t, p, owner, PayloadKind::PartialResult});
        merges.push_back(Task::merge(owner, p));
      }
    }
    for (const auto& m : merges) s.steps[t].push_back(m);
  }
  return s;
}

namespace {

struct Pair {
  int q, kv;
  bool operator<(const Pair& o) const {
    return q != o.q ? q < o.q : kv < o.kv;
  }
};

}  // namespace

std::vector<std::string> validate(const Schedule& s) {
  std::vector<std::string> out;
  auto fail = [&](std::string msg) { out.push_back(std::move(msg)); };
  if (s.workers < 1) {
    fail("schedule has no workers");
    return out;
  }
  const int P = s.workers;

  std::map<Pair, int> pair_count;
  struct HelperTask {
    int step, owner, helper;
    bool merged = false;
  };
  std::vector<HelperTask> helper_tasks;
  std::vector<ScheduleMessage> unused = s.messages;

  auto consume_message = [&](int step, int from, int to, PayloadKind kind) {
    for (auto& m : unused) {
      if (m.step <= step && m.from == from && m.to == to && m.kind == kind &&
          m.step >= 0) {
        m.step = -1;  // mark consumed
        return true;
      }
    }
    return false;
  };

  for (std::size_t t = 0; t < s.steps.size(); ++t) {
    std::vector<int> slot_count(P + 1, 0);
    for (const auto& task : s.steps[t]) {
      if (task.worker < 1 || task.worker > P) {
        fail("step " + std::to_string(t) + ": worker id out of range");
        continue;
      }
      switch (task.kind) {
        case TaskKind::LocalAttn:
          ++slot_count[task.worker];
          ++pair_count[{task.worker, task.worker}];
          break;
        case TaskKind::RemoteAttn: {
          ++slot_count[task.worker];
          if (task.kv_owner >= task.query_owner)
            fail("step " + std::to_string(t) +
                 ": remote task with non-causal pair (q=" +
                 std::to_string(task.query_owner) +
                 ", kv=" + std::to_string(task.kv_owner) + ")");
          ++pair_count[{task.query_owner, task.kv_owner}];
          if (task.worker == task.query_owner) {
            if (!consume_message(static_cast<int>(t), task.kv_owner,
                                 task.worker, PayloadKind::KV))
              fail("step " + std::to_string(t) + ": worker " +
                   std::to_string(task.worker) +
                   " computes on kv chunk " + std::to_string(task.kv_owner) +
                   " that was never sent");
          } else {
            if (task.worker != task.kv_owner)
              fail("step " + std::to_string(t) +
                   ": helper must use its own kv chunk");
            if (!consume_message(static_cast<int>(t), task.query_owner,
                                 task.worker, PayloadKind::Q))
              fail("step " + std::to_string(t) + ": helper " +
                   std::to_string(task.worker) + " computes on query chunk " +
                   std::to_string(task.query_owner) + " that was never sent");
            helper_tasks.push_back(
                {static_cast<int>(t), task.query_owner, task.worker});
          }
          break;
        }
        case TaskKind::Idle:
          ++slot_count[task.worker];
          break;
        case TaskKind::RescaleMerge: {
          // Matched against helper tasks below; computes of a step precede
          // its merges, so a same-step partial already exists.
          auto it = std::find_if(
              helper_tasks.begin(), helper_tasks.end(), [&](HelperTask& h) {
                return !h.merged && h.owner == task.worker &&
                       h.helper == task.helper &&
                       h.step <= static_cast<int>(t);
              });
          if (it == helper_tasks.end()) {
            fail("step " + std::to_string(t) + ": merge at worker " +
                 std::to_string(task.worker) + " from helper " +
                 std::to_string(task.helper) + " has no pending partial");
          } else {
            it->merged = true;
            if (!consume_message(static_cast<int>(t), task.helper, task.worker,
                                 PayloadKind::PartialResult))
              fail("step " + std::to_string(t) +
                   ": merged partial was never sent");
          }
          break;
        }
      }
    }
    for (int p = 1; p <= P; ++p) {
      if (slot_count[p] != 1)
        fail("step " + std::to_string(t) + ": worker " + std::to_string(p) +
             " holds " + std::to_string(slot_count[p]) +
             " primary tasks (want exactly 1)");
    }
  }

  for (const auto& h : helper_tasks) {
    if (!h.merged)
      fail("helper partial (owner=" + std::to_string(h.owner) +
           ", helper=" + std::to_string(h.helper) + ", step=" +
           std::to_string(h.step) + ") is never merged");
  }

  for (int p = 1; p <= P; ++p) {
    for (int r = 1; r <= p; ++r) {
      const auto it = pair_count.find({p, r});
      const int n = it == pair_count.end() ? 0 : it->second;
      if (n == 0)
        fail("pair (q=" + std::to_string(p) + ", kv=" + std::to_string(r) +
             ") is never computed");
      else if (n > 1)
        fail("pair (q=" + std::to_string(p) + ", kv=" + std::to_string(r) +
             ") computed " + std::to_string(n) + " times");
    }
  }
  for (const auto& [pair, n] : pair_count) {
    (void)n;
    if (pair.kv > pair.q)
      fail("non-causal pair (q=" + std::to_string(pair.q) +
           ", kv=" + std::to_string(pair.kv) + ") computed");
  }

  for (const auto& m : unused) {
    if (m.step >= 0)
      fail("message (step=" + std::to_string(m.step) + ", " +
           std::to_string(m.from) + "->" + std::to_string(m.to) + ", " +
           to_string(m.kind) + ") is never consumed");
  }
  return out;
}

Rational idle_fraction(const Schedule& s) {
  const auto slots =
      static_cast<std::int64_t>(s.workers) * static_cast<std::int64_t>(s.step_count());
  if (slots == 0) return Rational(0);
  return Rational(static_cast<std::int64_t>(s.idle_slot_count()), slots);
}

Rational expected_speedup(const Schedule& s) {
  if (s.step_count() == 0) return Rational(0);
  return Rational(static_cast<std::int64_t>(s.attention_task_count()),
                  static_cast<std::int64_t>(s.step_count()));
}

Rational ring_idle_fraction_formula(int workers) {
  if (workers < 1) throw ConfigError("need at least 1 worker");
  const std::int64_t p = workers;
  return Rational(p * p - p, 2 * p * p);
}

Rational balanced_idle_fraction_reference(int workers) {
  if (workers < 1) throw ConfigError("need at least 1 worker");
  if (workers % 2 == 1) return Rational(0);
  return Rational(1, 2 * static_cast<std::int64_t>(workers));
}

namespace {

nlohmann::json task_to_json(const Task& t) {
  nlohmann::json j;
  j["kind"] = to_string(t.kind);
  if (t.kind == TaskKind::RemoteAttn) {
    j["query_owner"] = t.query_owner;
    j["kv_owner"] = t.kv_owner;
  } else if (t.kind == TaskKind::RescaleMerge) {
    j["helper"] = t.helper;
  }
  return j;
}

}  // namespace

std::string schedule_to_json(const Schedule& s) {
  nlohmann::json j;
  j["P"] = s.workers;
  j["steps"] = nlohmann::json::array();
  for (const auto& step : s.steps) {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& t : step) {
      nlohmann::json jt;
      jt["worker"] = t.worker;
      jt["task"] = task_to_json(t);
      js.push_back(jt);
    }
    j["steps"].push_back(js);
  }
  j["messages"] = nlohmann::json::array();
  for (const auto& m : s.messages) {
    j["messages"].push_back({{"step", m.step},
                             {"from", m.from},
                             {"to", m.to},
                             {"kind", to_string(m.kind)}});
  }
  return j.dump(2);
}

std::string schedule_to_csv(const Schedule& s) {
  std::ostringstream os;
  os << "step,worker,task,query_owner,kv_owner,helper\n";
  for (std::size_t t = 0; t < s.steps.size(); ++t) {
    for (const auto& task : s.steps[t]) {
      os << t << ',' << task.worker << ',' << to_string(task.kind) << ',';
      if (task.kind == TaskKind::RemoteAttn)
        os << task.query_owner << ',' << task.kv_owner << ',';
      else if (task.kind == TaskKind::LocalAttn)
        os << task.worker << ',' << task.worker << ',';
      else
        os << ",,";
      if (task.kind == TaskKind::RescaleMerge) os << task.helper;
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace distattn
