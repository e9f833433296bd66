#include "lorakv/trace.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace lorakv {

std::vector<TraceStep> generate_trace(idx l_ctx) {
  if (l_ctx < 0) fail("generate_trace: l_ctx must be >= 0");
  std::vector<TraceStep> trace;
  trace.push_back({kPlanAgent, 512, 32});
  trace.push_back({kPlanAgent, 8, 8});
  trace.push_back({kActionAgent, 8, 8});
  for (int cycle = 0; cycle < 4; ++cycle) {
    trace.push_back({kPlanAgent, l_ctx, 32});
    trace.push_back({kPlanAgent, 8, 8});
    trace.push_back({kActionAgent, 8, 8});
  }
  trace.push_back({kReflectAgent, 32, 32});
  trace.push_back({kReflectAgent, 8, 8});
  return trace;
}

idx trace_total_len(const std::vector<TraceStep>& trace) {
  idx total = 0;
  for (const TraceStep& s : trace) total += s.prefill_len + s.gen_len;
  return total;
}

void save_trace(const std::vector<TraceStep>& trace, const std::string& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const TraceStep& s : trace)
    j.push_back({{"agent", s.agent}, {"prefill", s.prefill_len}, {"gen", s.gen_len}});
  std::ofstream out(path);
  if (!out) fail("cannot open trace file for writing: " + path);
  out << j.dump(2) << "\n";
}

std::vector<TraceStep> load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open trace file: " + path);
  nlohmann::json j;
  in >> j;
  if (!j.is_array()) fail("trace file must hold a JSON array: " + path);
  std::vector<TraceStep> trace;
  for (const auto& e : j)
    trace.push_back(
        {e.at("agent").get<idx>(), e.at("prefill").get<idx>(), e.at("gen").get<idx>()});
  return trace;
}

namespace {
nlohmann::json interval_json(const Interval& iv) {
  return {{"begin", iv.begin}, {"end", iv.end}};
}
}  // namespace

nlohmann::json StepLog::to_json() const {
  return {{"step", step_index},
          {"agent", agent},
          {"len_before", len_before},
          {"len_after", len_after},
          {"hidden_pass", interval_json(hidden_pass)},
          {"kv_project", interval_json(kv_project)},
          {"lr_project", interval_json(lr_project)},
          {"kv_recompute", interval_json(kv_recompute)},
          {"mac_delta", mac_delta},
          {"prefill_macs", prefill_macs},
          {"hidden_token_passes", hidden_token_passes}};
}

nlohmann::json CostReport::to_json() const {
  nlohmann::json steps_json = nlohmann::json::array();
  for (const StepLog& s : steps) steps_json.push_back(s.to_json());
  return {{"scheme", scheme},
          {"l_ctx", l_ctx},
          {"seed", seed},
          {"dtype", dtype},
          {"block_r", block_r},
          {"block_c", block_c},
          {"model", model_config},
          {"total_seq_len", total_seq_len},
          {"counters", counters.to_json()},
          {"cache_bytes",
           {{"key", bytes.key},
            {"value", bytes.value},
            {"lr", bytes.lr},
            {"hidden", bytes.hidden},
            {"total", bytes.total()}}},
          {"ttft_proxy_macs", ttft_proxy_macs},
          {"throughput_proxy", throughput_proxy},
          {"per_step", steps_json}};
}

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::scientific << v;
  return os.str();
}

// Column order and row order follow first appearance in the report list.
struct Grid {
  std::vector<std::string> schemes;
  std::vector<idx> lengths;
  std::map<std::pair<std::string, idx>, const CostReport*> cells;
};

Grid build_grid(const std::vector<CostReport>& reports) {
  Grid g;
  for (const CostReport& r : reports) {
    if (std::find(g.schemes.begin(), g.schemes.end(), r.scheme) == g.schemes.end())
      g.schemes.push_back(r.scheme);
    if (std::find(g.lengths.begin(), g.lengths.end(), r.total_seq_len) == g.lengths.end())
      g.lengths.push_back(r.total_seq_len);
    g.cells[{r.scheme, r.total_seq_len}] = &r;
  }
  return g;
}

}  // namespace

std::string reports_markdown(const std::vector<CostReport>& reports) {
  const Grid g = build_grid(reports);
  std::ostringstream os;
  os << "# Trace cost report\n\n";
  if (!reports.empty())
    os << "seed " << reports.front().seed << ", dtype " << reports.front().dtype
       << ", blocks " << reports.front().block_r << "x" << reports.front().block_c
       << "\n\n";

  auto header = [&]() {
    os << "| Scheme |";
    for (idx len : g.lengths) os << " " << len << " |";
    os << "\n|---|";
    for (std::size_t i = 0; i < g.lengths.size(); ++i) os << "---|";
    os << "\n";
  };

  os << "## Throughput proxy (tokens per MAC)\n\n";
  header();
  for (const auto& s : g.schemes) {
    os << "| " << s << " |";
    for (idx len : g.lengths) {
      auto it = g.cells.find({s, len});
      os << " " << (it == g.cells.end() ? std::string("-")
                                        : fmt_double(it->second->throughput_proxy))
         << " |";
    }
    os << "\n";
  }
  os << "\n## TTFT proxy (prefill MACs)\n\n";
  header();
  for (const auto& s : g.schemes) {
    os << "| " << s << " |";
    for (idx len : g.lengths) {
      auto it = g.cells.find({s, len});
      os << " "
         << (it == g.cells.end() ? std::string("-")
                                 : std::to_string(it->second->ttft_proxy_macs))
         << " |";
    }
    os << "\n";
  }
  os << "\n## Cache bytes (total at end of trace)\n\n";
  header();
  for (const auto& s : g.schemes) {
    os << "| " << s << " |";
    for (idx len : g.lengths) {
      auto it = g.cells.find({s, len});
      os << " "
         << (it == g.cells.end() ? std::string("-")
                                 : std::to_string(it->second->bytes.total()))
         << " |";
    }
    os << "\n";
  }
  return os.str();
}

std::string reports_csv(const std::vector<CostReport>& reports) {
  std::ostringstream os;
  os << "scheme,l_ctx,total_seq_len,total_macs,hidden_token_passes,ttft_proxy_macs,"
        "throughput_proxy,key_bytes,value_bytes,lr_bytes,hidden_bytes,total_bytes\n";
  for (const CostReport& r : reports) {
    os << r.scheme << "," << r.l_ctx << "," << r.total_seq_len << ","
       << r.counters.total_macs << "," << r.counters.hidden_token_passes << ","
       << r.ttft_proxy_macs << "," << fmt_double(r.throughput_proxy) << ","
       << r.bytes.key << "," << r.bytes.value << "," << r.bytes.lr << ","
       << r.bytes.hidden << "," << r.bytes.total() << "\n";
  }
  return os.str();
}

}  // namespace lorakv
