#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorakv/engine.hpp"
#include "lorakv/matrix.hpp"

namespace lorakv {

// Per-layer, per-agent-pair cosine measurements. Degenerate inputs (zero
// adapters) leave the affected cosines unset.
struct PairSimilarity {
  idx layer = 0;
  idx agent_i = 0;
  idx agent_j = 0;
  std::optional<double> cos_base, cos_full, cos_adapter, cos_key, cos_lr;
};

struct LayerL1 {
  idx layer = 0;
  double l1_base = 0.0;
  double l1_adapter = 0.0;  // scale included
};

struct SimilarityReport {
  bool common_hidden_states = false;
  std::vector<PairSimilarity> pairs;
  std::vector<LayerL1> l1;
  double mean_cos_base = 0.0, mean_cos_full = 0.0, mean_cos_adapter = 0.0;
  double mean_cos_key = 0.0, mean_cos_lr = 0.0;
  double l1_base_over_adapter = 0.0;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

struct BoundReport {
  idx dims = 0;
  idx trials = 0;
  idx violations = 0;
  bool zero_delta_exact_equality = false;
  bool equal_energy_halves_cosine = false;
  double min_gap = 0.0;  // min over trials of cos_base - cos_full
  nlohmann::json to_json() const;
};

// Constructed check of the base-vs-full cosine ordering: bases with
// controllable non-negative similarity, perturbations orthogonalized against
// both bases and each other (two projection passes). Under exact
// orthogonality the ordering cos(base_i, base_j) >= cos(full_i, full_j) is
// deterministic; the zero-perturbation trial is an exact equality.
BoundReport verify_cosine_bound(idx dims, idx trials, std::uint64_t seed);

namespace detail {
inline std::optional<double> safe_cos(const Matrix<double>& a, const Matrix<double>& b) {
  double na = 0.0, nb = 0.0;
  for (double v : a.data) na += v * v;
  for (double v : b.data) nb += v * v;
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return cosine_similarity(a, b);
}

template <class T>
inline Matrix<double> to_f64(const Matrix<T>& m) {
  Matrix<double> out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.data.size(); ++i)
    out.data[i] = static_cast<double>(m.data[i]);
  return out;
}
}  // namespace detail

// Runs every agent on the same context and compares per-layer value-path
// projections across agent pairs. With `common_hidden_states` set, one
// reference forward supplies the hidden states and each agent's projections
// are evaluated on that shared stream (the idealized measurement in which a
// shared down-projection forces identical low-rank caches).
template <class T>
SimilarityReport measure_similarity(const Model<T>& model,
                                    const std::vector<std::int32_t>& tokens,
                                    bool common_hidden_states = false) {
  const ModelConfig& cfg = model.cfg;
  if (cfg.n_agents < 2) fail("measure_similarity: needs at least two agents");

  // [layer][agent] value-path snapshots in f64 for the measurement.
  std::vector<std::vector<Matrix<double>>> base(cfg.n_layers), full(cfg.n_layers),
      delta(cfg.n_layers), key(cfg.n_layers), lr(cfg.n_layers);

  if (common_hidden_states) {
    ProjectionSnapshot<T> snap = projection_snapshot(model, tokens);
    for (idx l = 0; l < cfg.n_layers; ++l) {
      for (idx a = 0; a < cfg.n_agents; ++a) {
        base[l].push_back(detail::to_f64(snap.y_base[l]));
        full[l].push_back(detail::to_f64(snap.y_full[l][a]));
        delta[l].push_back(detail::to_f64(snap.delta[l][a]));
        key[l].push_back(detail::to_f64(snap.k[l]));
        lr[l].push_back(detail::to_f64(snap.y_lr[l][a]));
      }
    }
  } else {
    std::vector<AgentOracle<T>> runs = oracle_run(model, tokens);
    for (idx l = 0; l < cfg.n_layers; ++l) {
      for (idx a = 0; a < cfg.n_agents; ++a) {
        const LayerCapture<T>& lc = runs[a].capture.layers[l];
        base[l].push_back(detail::to_f64(lc.v_base));
        full[l].push_back(detail::to_f64(lc.v_full));
        Matrix<double> d(lc.v_full.rows, lc.v_full.cols);
        for (std::size_t i = 0; i < d.data.size(); ++i)
          d.data[i] = static_cast<double>(lc.v_full.data[i]) -
                      static_cast<double>(lc.v_base.data[i]);
        delta[l].push_back(std::move(d));
        key[l].push_back(detail::to_f64(lc.k));
        lr[l].push_back(detail::to_f64(lc.v_lr));
      }
    }
  }

  SimilarityReport report;
  report.common_hidden_states = common_hidden_states;
  double sum_base = 0, sum_full = 0, sum_adapter = 0, sum_key = 0, sum_lr = 0;
  idx n_base = 0, n_full = 0, n_adapter = 0, n_key = 0, n_lr = 0;
  for (idx l = 0; l < cfg.n_layers; ++l) {
    double l1_base_sum = 0, l1_adapter_sum = 0;
    for (idx a = 0; a < cfg.n_agents; ++a) {
      l1_base_sum += l1_norm_mean(base[l][a]);
      l1_adapter_sum += l1_norm_mean(delta[l][a]);
    }
    report.l1.push_back(LayerL1{l, l1_base_sum / cfg.n_agents,
                                l1_adapter_sum / cfg.n_agents});
    for (idx a = 0; a < cfg.n_agents; ++a) {
      for (idx b = a + 1; b < cfg.n_agents; ++b) {
        PairSimilarity p;
        p.layer = l;
        p.agent_i = a;
        p.agent_j = b;
        p.cos_base = detail::safe_cos(base[l][a], base[l][b]);
        p.cos_full = detail::safe_cos(full[l][a], full[l][b]);
        p.cos_adapter = detail::safe_cos(delta[l][a], delta[l][b]);
        p.cos_key = detail::safe_cos(key[l][a], key[l][b]);
        p.cos_lr = lr[l][a].cols > 0 ? detail::safe_cos(lr[l][a], lr[l][b])
                                     : std::nullopt;
        if (p.cos_base) { sum_base += *p.cos_base; ++n_base; }
        if (p.cos_full) { sum_full += *p.cos_full; ++n_full; }
        if (p.cos_adapter) { sum_adapter += *p.cos_adapter; ++n_adapter; }
        if (p.cos_key) { sum_key += *p.cos_key; ++n_key; }
        if (p.cos_lr) { sum_lr += *p.cos_lr; ++n_lr; }
        report.pairs.push_back(p);
      }
    }
  }
  report.mean_cos_base = n_base ? sum_base / n_base : 0.0;
  report.mean_cos_full = n_full ? sum_full / n_full : 0.0;
  report.mean_cos_adapter = n_adapter ? sum_adapter / n_adapter : 0.0;
  report.mean_cos_key = n_key ? sum_key / n_key : 0.0;
  report.mean_cos_lr = n_lr ? sum_lr / n_lr : 0.0;

  double l1b = 0, l1a = 0;
  for (const LayerL1& e : report.l1) {
    l1b += e.l1_base;
    l1a += e.l1_adapter;
  }
  report.l1_base_over_adapter = l1a > 0.0 ? l1b / l1a : 0.0;
  return report;
}

}  // namespace lorakv
