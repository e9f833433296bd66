#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorakv/engine.hpp"
#include "lorakv/kvcache.hpp"

namespace lorakv {

// One agent step of the emulated schedule: agents 0/1/2 are plan/action/
// reflect. prefill_len is the context appended to the trajectory this step,
// gen_len the number of generated tokens.
struct TraceStep {
  idx agent = 0;
  idx prefill_len = 0;
  idx gen_len = 0;
  bool operator==(const TraceStep&) const = default;
};

inline constexpr idx kPlanAgent = 0;
inline constexpr idx kActionAgent = 1;
inline constexpr idx kReflectAgent = 2;

// The fixed 17-step iteration schedule: one long plan prefill, two short
// bootstrap steps, four retrieval cycles parameterized by l_ctx, and two
// trailing reflect steps. Total length is 912 + 4 * l_ctx.
std::vector<TraceStep> generate_trace(idx l_ctx);

idx trace_total_len(const std::vector<TraceStep>& trace);

void save_trace(const std::vector<TraceStep>& trace, const std::string& path);
std::vector<TraceStep> load_trace(const std::string& path);

// Deterministic token id for (root seed, trace step, trajectory position);
// independent of scheme so all schemes replay identical token streams.
inline std::int32_t synth_token(std::uint64_t seed, idx step_index, idx position,
                                idx vocab) {
  const std::uint64_t h = Rng::mix(Rng::mix(seed, 0x70c5u),
                                   Rng::mix(static_cast<std::uint64_t>(step_index),
                                            static_cast<std::uint64_t>(position)));
  return static_cast<std::int32_t>(h % static_cast<std::uint64_t>(vocab));
}

struct StepLog {
  idx step_index = 0;
  idx agent = 0;
  idx len_before = 0;
  idx len_after = 0;
  Interval hidden_pass, kv_project, lr_project, kv_recompute;
  std::uint64_t mac_delta = 0;
  std::uint64_t prefill_macs = 0;
  std::uint64_t hidden_token_passes = 0;
  nlohmann::json to_json() const;
};

struct CostReport {
  std::string scheme;
  idx l_ctx = -1;  // -1 when the trace did not come from generate_trace
  std::uint64_t seed = 0;
  std::string dtype;
  idx block_r = 0, block_c = 0;
  nlohmann::json model_config;
  idx total_seq_len = 0;
  FlopCounter counters;
  CacheBytes bytes;
  std::uint64_t ttft_proxy_macs = 0;
  double throughput_proxy = 0.0;  // total_seq_len / total MACs
  std::vector<StepLog> steps;
  double wall_seconds = 0.0;  // informational only; never serialized

  nlohmann::json to_json() const;
};

// Markdown tables shaped scheme-rows x trace-length-columns, one table per
// proxy metric, plus a cache-size table for the longest trace.
std::string reports_markdown(const std::vector<CostReport>& reports);
std::string reports_csv(const std::vector<CostReport>& reports);

template <class T>
CostReport run_trace(const Model<T>& model, const CacheScheme& scheme,
                     const std::vector<TraceStep>& trace, const BlockConfig& blocks,
                     idx l_ctx = -1) {
  const auto t_start = std::chrono::steady_clock::now();
  KvStore<T> store(scheme, model.cfg.store_dims());
  CostReport report;
  report.scheme = scheme.name();
  report.l_ctx = l_ctx;
  report.seed = model.cfg.seed;
  report.dtype = detail::dtype_name<T>();
  report.block_r = blocks.b_r;
  report.block_c = blocks.b_c;
  report.model_config = model.cfg.to_json();

  FlopCounter total;
  for (std::size_t si = 0; si < trace.size(); ++si) {
    const TraceStep& ts = trace[si];
    if (ts.agent < 0 || ts.agent >= model.cfg.n_agents)
      fail("run_trace: trace agent " + std::to_string(ts.agent) +
           " outside the model's " + std::to_string(model.cfg.n_agents) + " agents");
    if (ts.prefill_len < 0 || ts.gen_len < 0) fail("run_trace: negative step length");

    StepLog log;
    log.step_index = static_cast<idx>(si);
    log.agent = ts.agent;
    log.len_before = store.length();

    std::vector<std::int32_t> prefill_ids;
    prefill_ids.reserve(static_cast<std::size_t>(ts.prefill_len));
    for (idx i = 0; i < ts.prefill_len; ++i)
      prefill_ids.push_back(synth_token(model.cfg.seed, static_cast<idx>(si),
                                        store.length() + i, model.cfg.vocab));
    FlopCounter prefill_delta;
    StepOutput<T> so = step(model, store, ts.agent, prefill_ids, StepMode::Prefill,
                            blocks, prefill_delta);
    log.hidden_pass = so.plan.hidden_pass;
    log.kv_project = so.plan.kv_project;
    log.lr_project = so.plan.lr_project;
    log.kv_recompute = so.plan.kv_recompute;
    log.prefill_macs = prefill_delta.total_macs;
    report.ttft_proxy_macs += prefill_delta.total_macs;

    FlopCounter step_delta = prefill_delta;
    for (idx g = 0; g < ts.gen_len; ++g) {
      const std::vector<std::int32_t> one{
          synth_token(model.cfg.seed, static_cast<idx>(si), store.length(),
                      model.cfg.vocab)};
      FlopCounter decode_delta;
      step(model, store, ts.agent, one, StepMode::Decode, blocks, decode_delta);
      step_delta += decode_delta;
    }

    log.len_after = store.length();
    log.mac_delta = step_delta.total_macs;
    log.hidden_token_passes = step_delta.hidden_token_passes;
    total += step_delta;
    report.steps.push_back(log);
  }

  report.total_seq_len = store.length();
  report.counters = total;
  report.bytes = store.bytes();
  report.throughput_proxy =
      total.total_macs == 0
          ? 0.0
          : static_cast<double>(report.total_seq_len) /
                static_cast<double>(total.total_macs);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

}  // namespace lorakv
