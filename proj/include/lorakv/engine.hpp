#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorakv/attention.hpp"
#include "lorakv/kvcache.hpp"
#include "lorakv/lora.hpp"
#include "lorakv/matrix.hpp"
#include "lorakv/rng.hpp"

namespace lorakv {

struct ModelConfig {
  idx n_layers = 2;
  idx d_model = 128;
  idx n_q_heads = 2;
  idx n_kv_heads = 2;
  idx d_head = 64;
  idx d_mlp = 256;
  idx n_agents = 3;
  idx rank = 8;
  bool rope = true;
  idx vocab = 256;
  std::uint64_t seed = 42;

  idx d_kv() const { return n_kv_heads * d_head; }
  idx group() const { return n_q_heads / n_kv_heads; }

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_q_heads < 1 || n_kv_heads < 1 ||
        d_head < 1 || d_mlp < 1 || n_agents < 1 || vocab < 2)
      fail("ModelConfig: dimensions must be positive (vocab >= 2)");
    if (rank < 0) fail("ModelConfig: rank must be >= 0");
    if (d_model != n_q_heads * d_head)
      fail("ModelConfig: d_model " + std::to_string(d_model) +
           " != n_q_heads * d_head = " + std::to_string(n_q_heads * d_head));
    if (n_q_heads % n_kv_heads != 0)
      fail("ModelConfig: n_q_heads not divisible by n_kv_heads");
  }

  StoreDims store_dims() const { return StoreDims{n_layers, d_kv(), d_model, rank, n_agents}; }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers},   {"d_model", d_model},
            {"n_q_heads", n_q_heads}, {"n_kv_heads", n_kv_heads},
            {"d_head", d_head},       {"d_mlp", d_mlp},
            {"n_agents", n_agents},   {"rank", rank},
            {"rope", rope},           {"vocab", vocab},
            {"seed", seed}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_q_heads = j.value("n_q_heads", c.n_q_heads);
    c.n_kv_heads = j.value("n_kv_heads", c.n_kv_heads);
    c.d_head = j.value("d_head", c.d_head);
    c.d_mlp = j.value("d_mlp", c.d_mlp);
    c.n_agents = j.value("n_agents", c.n_agents);
    c.rank = j.value("rank", c.rank);
    c.rope = j.value("rope", c.rope);
    c.vocab = j.value("vocab", c.vocab);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }
};

enum class MacCategory : int {
  QkvProj = 0,
  LoraDown,
  LoraUp,
  AttnQk,
  AttnPv,
  AttnLr,
  OutProj,
  Mlp,
};
inline constexpr int kNumMacCategories = 8;
inline constexpr const char* kMacCategoryNames[kNumMacCategories] = {
    "qkv_proj", "lora_down", "lora_up", "attn_qk",
    "attn_pv",  "attn_lr",   "out_proj", "mlp"};

// Exact multiply-accumulate ledger. Every matmul in the engine reports to
// exactly one category; softmax, nonlinearity and normalization flops are
// excluded. hidden_token_passes counts tokens x layers fully computed.
struct FlopCounter {
  std::array<std::uint64_t, kNumMacCategories> macs{};
  std::uint64_t total_macs = 0;
  std::uint64_t hidden_token_passes = 0;

  void add(MacCategory cat, std::uint64_t n) {
    macs[static_cast<int>(cat)] += n;
    total_macs += n;
  }
  std::uint64_t by(MacCategory cat) const { return macs[static_cast<int>(cat)]; }
  std::uint64_t category_sum() const {
    std::uint64_t s = 0;
    for (auto v : macs) s += v;
    return s;
  }
  FlopCounter& operator+=(const FlopCounter& o) {
    for (int i = 0; i < kNumMacCategories; ++i) macs[i] += o.macs[i];
    total_macs += o.total_macs;
    hidden_token_passes += o.hidden_token_passes;
    return *this;
  }
  nlohmann::json to_json() const {
    nlohmann::json by_cat;
    for (int i = 0; i < kNumMacCategories; ++i) by_cat[kMacCategoryNames[i]] = macs[i];
    return {{"macs_by_category", by_cat},
            {"total_macs", total_macs},
            {"hidden_token_passes", hidden_token_passes}};
  }
};

inline constexpr double kLoraAlpha = 16.0;

template <class T>
struct LayerWeights {
  Matrix<T> wq, wk, wv, wo, w_up, w_down;
  std::optional<MultiLoraSet<T>> q_lora;  // adapters on the query projection
  std::optional<MultiLoraSet<T>> v_lora;  // adapters on the value projection
};

template <class T>
struct Model {
  ModelConfig cfg;
  Matrix<T> embedding;  // vocab x d_model
  Matrix<T> readout;    // d_model x vocab, tied to the embedding
  std::vector<LayerWeights<T>> layers;
};

// Deterministic weights from the config seed. Adapters sit on the query and
// value projections only and share one down-projection across agents.
template <class T>
Model<T> build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model<T> model;
  model.cfg = cfg;
  Rng root(cfg.seed);

  model.embedding = Matrix<T>::gaussian(cfg.vocab, cfg.d_model, root.child(1), 1.0);
  model.readout = Matrix<T>(cfg.d_model, cfg.vocab);
  for (idx i = 0; i < cfg.vocab; ++i)
    for (idx j = 0; j < cfg.d_model; ++j) model.readout(j, i) = model.embedding(i, j);

  const double w_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double mlp_down_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_mlp));
  for (idx l = 0; l < cfg.n_layers; ++l) {
    Rng lr = root.child(0x100 + static_cast<std::uint64_t>(l));
    LayerWeights<T> w;
    w.wq = Matrix<T>::gaussian(cfg.d_model, cfg.d_model, lr.child(0), w_scale);
    w.wk = Matrix<T>::gaussian(cfg.d_model, cfg.d_kv(), lr.child(1), w_scale);
    w.wv = Matrix<T>::gaussian(cfg.d_model, cfg.d_kv(), lr.child(2), w_scale);
    w.wo = Matrix<T>::gaussian(cfg.d_model, cfg.d_model, lr.child(3), w_scale);
    w.w_up = Matrix<T>::gaussian(cfg.d_model, cfg.d_mlp, lr.child(4), w_scale);
    w.w_down = Matrix<T>::gaussian(cfg.d_mlp, cfg.d_model, lr.child(5), mlp_down_scale);

    if (cfg.rank > 0) {
      const double a_scale = w_scale;
      const double b_scale = 0.02 / std::sqrt(static_cast<double>(cfg.rank));
      Matrix<T> shared_aq =
          Matrix<T>::gaussian(cfg.d_model, cfg.rank, lr.child(10), a_scale);
      std::vector<LoraAdapter<T>> q_adapters;
      for (idx a = 0; a < cfg.n_agents; ++a)
        q_adapters.emplace_back(
            shared_aq,
            Matrix<T>::gaussian(cfg.rank, cfg.d_model,
                                lr.child(0x200 + static_cast<std::uint64_t>(a)),
                                b_scale),
            cfg.rank, kLoraAlpha);
      w.q_lora.emplace(w.wq, std::move(q_adapters), true);

      Matrix<T> shared_av =
          Matrix<T>::gaussian(cfg.d_model, cfg.rank, lr.child(11), a_scale);
      std::vector<LoraAdapter<T>> v_adapters;
      for (idx a = 0; a < cfg.n_agents; ++a)
        v_adapters.emplace_back(
            shared_av,
            Matrix<T>::gaussian(cfg.rank, cfg.d_kv(),
                                lr.child(0x300 + static_cast<std::uint64_t>(a)),
                                b_scale),
            cfg.rank, kLoraAlpha);
      w.v_lora.emplace(w.wv, std::move(v_adapters), true);
    }
    model.layers.push_back(std::move(w));
  }
  return model;
}

// ---- forward helpers ----

namespace detail {

template <class T>
inline Matrix<T> rms_norm(Span2D<const T> x) {
  Matrix<T> out(x.rows, x.cols);
  for (idx i = 0; i < x.rows; ++i) {
    double ss = 0.0;
    for (idx j = 0; j < x.cols; ++j) {
      const double v = static_cast<double>(x(i, j));
      ss += v * v;
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(x.cols) + 1e-6));
    for (idx j = 0; j < x.cols; ++j) out(i, j) = x(i, j) * inv;
  }
  return out;
}

template <class T>
inline void silu_inplace(Matrix<T>& m) {
  for (auto& v : m.data) v = v / (T(1) + std::exp(-v));
}

// Half-dim rotation applied per head; row i carries position pos_begin + i.
template <class T>
inline void apply_rope(Matrix<T>& m, idx n_heads, idx d_head, idx pos_begin) {
  const idx half = d_head / 2;
  for (idx i = 0; i < m.rows; ++i) {
    const double pos = static_cast<double>(pos_begin + i);
    for (idx h = 0; h < n_heads; ++h) {
      const idx base = h * d_head;
      for (idx c = 0; c < half; ++c) {
        const double freq =
            std::pow(10000.0, -2.0 * static_cast<double>(c) / static_cast<double>(d_head));
        const T cos_t = static_cast<T>(std::cos(pos * freq));
        const T sin_t = static_cast<T>(std::sin(pos * freq));
        const T x0 = m(i, base + c);
        const T x1 = m(i, base + c + half);
        m(i, base + c) = x0 * cos_t - x1 * sin_t;
        m(i, base + c + half) = x0 * sin_t + x1 * cos_t;
      }
    }
  }
}

template <class T>
inline Matrix<T> mm(FlopCounter& counter, MacCategory cat, Span2D<const T> a,
                    Span2D<const T> b) {
  counter.add(cat, matmul_macs(a.rows, a.cols, b.cols));
  return matmul(a, b);
}

}  // namespace detail

enum class StepMode { Prefill, Decode };

template <class T>
struct LayerCapture {
  Matrix<T> x_attn;  // normalized attention input for the processed rows
  Matrix<T> k;       // post-rope key rows written this step
  Matrix<T> v_base;
  Matrix<T> v_lr;    // unscaled down-projection rows
  Matrix<T> v_full;  // only when the scheme materializes full values
};

template <class T>
struct StepCapture {
  std::vector<LayerCapture<T>> layers;
};

template <class T>
struct StepOutput {
  Matrix<T> logits;  // 1 x vocab for steps that processed rows, else 0 x vocab
  PrefillPlan plan;
};

// Executes one agent step under the store's scheme: honors the prefill plan,
// appends cache rows, and records every MAC delta in `counter`.
template <class T>
StepOutput<T> step(const Model<T>& model, KvStore<T>& store, idx agent,
                   const std::vector<std::int32_t>& new_tokens, StepMode mode,
                   const BlockConfig& blocks, FlopCounter& counter,
                   StepCapture<T>* capture = nullptr) {
  const ModelConfig& cfg = model.cfg;
  if (agent < 0 || agent >= cfg.n_agents)
    fail("step: agent " + std::to_string(agent) + " out of range");
  if (mode == StepMode::Decode && new_tokens.size() != 1)
    fail("step: decode processes exactly one token");
  for (std::int32_t t : new_tokens)
    if (t < 0 || t >= cfg.vocab) fail("step: token id out of vocab range");

  const CacheScheme& scheme = store.scheme();
  const PrefillPlan plan = plan_step(store, agent, static_cast<idx>(new_tokens.size()));
  store.append_tokens(new_tokens);
  if (capture) capture->layers.assign(static_cast<std::size_t>(cfg.n_layers), {});

  StepOutput<T> out;
  out.plan = plan;
  if (plan.hidden_pass.empty()) {
    out.logits = Matrix<T>(0, cfg.vocab);
    store.mark_seen(agent);
    return out;
  }

  const idx p0 = plan.hidden_pass.begin;
  const idx p1 = plan.hidden_pass.end;
  const idx fresh0 = store.length() - static_cast<idx>(new_tokens.size());
  const idx skip = plan.skip_layers_below;  // 0 except SelectiveRecompute
  const bool selective = scheme.kind == SchemeKind::SelectiveRecompute;
  const bool two_phase = selective && skip > 0;
  const bool full_values = scheme.kind == SchemeKind::NonShared ||
                           scheme.kind == SchemeKind::FullShared || selective;
  const bool has_lora = cfg.rank > 0;

  auto embed_rows = [&](idx begin, idx end) {
    Matrix<T> m(end - begin, cfg.d_model);
    for (idx i = begin; i < end; ++i) {
      const std::int32_t tok = store.tokens()[static_cast<std::size_t>(i)];
      for (idx j = 0; j < cfg.d_model; ++j) m(i - begin, j) = model.embedding(tok, j);
    }
    return m;
  };

  // Residual stream. Under SelectiveRecompute with a non-zero boundary the
  // fresh rows run alone below the first recomputed layer; rows previously
  // produced by other agents join there from the hidden-state cache.
  idx active0 = two_phase ? fresh0 : p0;
  Matrix<T> x = embed_rows(active0, p1);
  if (selective && skip == 0 && p1 > fresh0)
    store.append_hidden(fresh0, x.view().row_range(fresh0 - active0, p1 - active0));

  for (idx layer = 0; layer < cfg.n_layers; ++layer) {
    if (two_phase && layer == skip) {
      // Splice previously produced rows in from the hidden-state cache and
      // record the boundary values of the fresh rows.
      if (p1 > fresh0) store.append_hidden(fresh0, x.view());
      Matrix<T> widened(p1 - p0, cfg.d_model);
      Span2D<const T> old_rows = store.hidden_rows(p0, fresh0);
      for (idx i = 0; i < old_rows.rows; ++i)
        for (idx j = 0; j < cfg.d_model; ++j) widened(i, j) = old_rows(i, j);
      for (idx i = fresh0; i < p1; ++i)
        for (idx j = 0; j < cfg.d_model; ++j) widened(i - p0, j) = x(i - fresh0, j);
      x = std::move(widened);
      active0 = p0;
    }
    if (two_phase && layer < skip && p1 == fresh0) continue;  // no fresh rows below boundary

    const idx n_active = p1 - active0;
    const LayerWeights<T>& w = model.layers[static_cast<std::size_t>(layer)];
    Matrix<T> x_norm = detail::rms_norm<T>(x.view());

    // Query projection for every row whose attention output is needed.
    Matrix<T> q = detail::mm<T>(counter, MacCategory::QkvProj, x_norm.view(), w.wq.view());
    if (has_lora) {
      const LoraAdapter<T>& qa = w.q_lora->adapter(agent);
      Matrix<T> q_down =
          detail::mm<T>(counter, MacCategory::LoraDown, x_norm.view(), qa.a.view());
      Matrix<T> q_up =
          detail::mm<T>(counter, MacCategory::LoraUp, q_down.view(), qa.b.view());
      const T q_scale = static_cast<T>(qa.lora_scale());
      for (std::size_t i = 0; i < q.data.size(); ++i)
        q.data[i] += q_scale * q_up.data[i];
    }

    // Key/value projection over the plan's range for this layer.
    const Interval kv_range = plan.kv_project_at(layer, scheme);
    Matrix<T> k_rows, v_base_rows, v_store_rows, v_lr_rows;
    if (!kv_range.empty()) {
      Span2D<const T> x_kv =
          x_norm.view().row_range(kv_range.begin - active0, kv_range.end - active0);
      k_rows = detail::mm<T>(counter, MacCategory::QkvProj, x_kv, w.wk.view());
      if (cfg.rope)
        detail::apply_rope(k_rows, cfg.n_kv_heads, cfg.d_head, kv_range.begin);
      v_base_rows = detail::mm<T>(counter, MacCategory::QkvProj, x_kv, w.wv.view());
      v_store_rows = v_base_rows;
      if (full_values && has_lora) {
        const LoraAdapter<T>& va = w.v_lora->adapter(agent);
        v_lr_rows = detail::mm<T>(counter, MacCategory::LoraDown, x_kv, va.a.view());
        Matrix<T> v_up =
            detail::mm<T>(counter, MacCategory::LoraUp, v_lr_rows.view(), va.b.view());
        const T v_scale = static_cast<T>(va.lora_scale());
        for (std::size_t i = 0; i < v_store_rows.data.size(); ++i)
          v_store_rows.data[i] += v_scale * v_up.data[i];
      }

      if (selective && scheme.is_recompute_layer(layer)) {
        const idx existing = store.key_view(layer, agent).rows;
        const idx ow_end = std::min(kv_range.end, existing);
        if (ow_end > kv_range.begin)
          store.recompute_overwrite(
              layer, kv_range.begin,
              k_rows.view().row_range(0, ow_end - kv_range.begin),
              v_store_rows.view().row_range(0, ow_end - kv_range.begin));
        if (kv_range.end > std::max(kv_range.begin, existing)) {
          const idx ap = std::max(kv_range.begin, existing);
          store.append_key(layer, agent, ap,
                           k_rows.view().row_range(ap - kv_range.begin, kv_range.size()));
          store.append_value(
              layer, agent, ap,
              v_store_rows.view().row_range(ap - kv_range.begin, kv_range.size()));
        }
      } else {
        store.append_key(layer, agent, kv_range.begin, k_rows.view());
        store.append_value(layer, agent, kv_range.begin, v_store_rows.view());
      }
    }

    // Low-rank cache rows for the schemes that keep one.
    const bool lr_cached = scheme.kind == SchemeKind::BaseShared ||
                           scheme.kind == SchemeKind::BaseLRShared;
    Matrix<T> lr_rows;
    if (lr_cached && has_lora) {
      const Interval lr_range = plan.lr_project_at(layer, scheme);
      if (!lr_range.empty()) {
        const LoraAdapter<T>& va = w.v_lora->adapter(agent);
        Span2D<const T> x_lr =
            x_norm.view().row_range(lr_range.begin - active0, lr_range.end - active0);
        lr_rows = detail::mm<T>(counter, MacCategory::LoraDown, x_lr, va.a.view());
        store.append_lr(layer, agent, lr_range.begin, lr_rows.view());
      }
    } else if (lr_cached && !has_lora) {
      const Interval lr_range = plan.lr_project_at(layer, scheme);
      if (!lr_range.empty())
        store.append_lr(layer, agent, lr_range.begin,
                        Span2D<const T>{nullptr, lr_range.size(), 0, 0});
    }

    if (cfg.rope) detail::apply_rope(q, cfg.n_q_heads, cfg.d_head, active0);

    Span2D<const T> v_lr_view = store.lr_view(layer, agent);
    Span2D<const T> b_up{nullptr, 0, cfg.d_kv(), 0};
    T attn_scale = T(1);
    if (lr_cached && has_lora) {
      b_up = w.v_lora->adapter(agent).b.view();
      attn_scale = static_cast<T>(w.v_lora->adapter(agent).lora_scale());
    } else {
      v_lr_view = Span2D<const T>{nullptr, store.key_view(layer, agent).rows, 0, 0};
    }

    AttnMacs am;
    Matrix<T> attn =
        gqa_attention<T>(q.view(), store.key_view(layer, agent),
                         store.value_view(layer, agent), v_lr_view, b_up, attn_scale,
                         active0, cfg.n_q_heads, cfg.n_kv_heads, blocks, &am);
    counter.add(MacCategory::AttnQk, am.qk);
    counter.add(MacCategory::AttnPv, am.pv);
    counter.add(MacCategory::AttnLr, am.lr);

    Matrix<T> attn_proj =
        detail::mm<T>(counter, MacCategory::OutProj, attn.view(), w.wo.view());
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += attn_proj.data[i];

    Matrix<T> x_norm2 = detail::rms_norm<T>(x.view());
    Matrix<T> h = detail::mm<T>(counter, MacCategory::Mlp, x_norm2.view(), w.w_up.view());
    detail::silu_inplace(h);
    Matrix<T> mlp_out =
        detail::mm<T>(counter, MacCategory::Mlp, h.view(), w.w_down.view());
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += mlp_out.data[i];

    counter.hidden_token_passes += static_cast<std::uint64_t>(n_active);

    if (capture) {
      LayerCapture<T>& lc = capture->layers[static_cast<std::size_t>(layer)];
      lc.x_attn = std::move(x_norm);
      lc.k = std::move(k_rows);
      lc.v_base = std::move(v_base_rows);
      if (full_values) lc.v_full = std::move(v_store_rows);
      lc.v_lr = lr_cached ? std::move(lr_rows) : std::move(v_lr_rows);
    }
  }

  // Readout for the most recent processed row.
  Matrix<T> last = detail::rms_norm<T>(x.view().row_range(x.rows - 1, x.rows));
  out.logits =
      detail::mm<T>(counter, MacCategory::OutProj, last.view(), model.readout.view());
  store.mark_seen(agent);
  return out;
}

// Ground truth: every agent independently processes the whole token stream
// (NonShared semantics) with per-layer projections captured.
template <class T>
struct AgentOracle {
  StepCapture<T> capture;
  Matrix<T> logits;
  KvStore<T> store;
};

template <class T>
std::vector<AgentOracle<T>> oracle_run(const Model<T>& model,
                                       const std::vector<std::int32_t>& tokens,
                                       const BlockConfig& blocks = BlockConfig{}) {
  std::vector<AgentOracle<T>> out;
  for (idx a = 0; a < model.cfg.n_agents; ++a) {
    KvStore<T> store(CacheScheme{SchemeKind::NonShared, {}}, model.cfg.store_dims());
    FlopCounter counter;
    StepCapture<T> capture;
    StepOutput<T> so =
        step(model, store, a, tokens, StepMode::Prefill, blocks, counter, &capture);
    out.push_back(AgentOracle<T>{std::move(capture), std::move(so.logits), std::move(store)});
  }
  return out;
}

// Idealized measurement mode: one reference forward provides the hidden
// states, and every agent's projections are evaluated on that common stream.
template <class T>
struct ProjectionSnapshot {
  std::vector<Matrix<T>> x_attn;                 // [layer]
  std::vector<Matrix<T>> k;                      // [layer] (adapter-free)
  std::vector<Matrix<T>> y_base;                 // [layer]
  std::vector<std::vector<Matrix<T>>> y_lr;      // [layer][agent]
  std::vector<std::vector<Matrix<T>>> delta;     // [layer][agent]
  std::vector<std::vector<Matrix<T>>> y_full;    // [layer][agent]
};

template <class T>
ProjectionSnapshot<T> projection_snapshot(const Model<T>& model,
                                          const std::vector<std::int32_t>& tokens,
                                          idx reference_agent = 0) {
  const ModelConfig& cfg = model.cfg;
  KvStore<T> store(CacheScheme{SchemeKind::NonShared, {}}, cfg.store_dims());
  FlopCounter counter;
  StepCapture<T> capture;
  step(model, store, reference_agent, tokens, StepMode::Prefill, BlockConfig{}, counter,
       &capture);

  ProjectionSnapshot<T> snap;
  for (idx l = 0; l < cfg.n_layers; ++l) {
    const Matrix<T>& x = capture.layers[static_cast<std::size_t>(l)].x_attn;
    const LayerWeights<T>& w = model.layers[static_cast<std::size_t>(l)];
    Matrix<T> k = matmul(x, w.wk);
    if (cfg.rope) detail::apply_rope(k, cfg.n_kv_heads, cfg.d_head, 0);
    Matrix<T> base = matmul(x, w.wv);
    std::vector<Matrix<T>> lr_per_agent, delta_per_agent, full_per_agent;
    for (idx a = 0; a < cfg.n_agents; ++a) {
      if (cfg.rank > 0) {
        ForwardParts<T> parts = forward_decomposed(*w.v_lora, a, x);
        lr_per_agent.push_back(std::move(parts.y_lr));
        Matrix<T> delta = expand_lr(lr_per_agent.back(), w.v_lora->adapter(a));
        full_per_agent.push_back(add(base, delta));
        delta_per_agent.push_back(std::move(delta));
      } else {
        lr_per_agent.emplace_back(x.rows, 0);
        delta_per_agent.emplace_back(base.rows, base.cols);
        full_per_agent.push_back(base);
      }
    }
    snap.x_attn.push_back(x);
    snap.k.push_back(std::move(k));
    snap.y_base.push_back(std::move(base));
    snap.y_lr.push_back(std::move(lr_per_agent));
    snap.delta.push_back(std::move(delta_per_agent));
    snap.y_full.push_back(std::move(full_per_agent));
  }
  return snap;
}

// ---- model file: JSON manifest + raw weight payload ----

template <class T>
void save_model(const Model<T>& model, const std::string& path) {
  std::vector<std::pair<std::string, const Matrix<T>*>> tensors;
  tensors.emplace_back("embedding", &model.embedding);
  for (idx l = 0; l < model.cfg.n_layers; ++l) {
    const auto tag = "layer" + std::to_string(l) + ".";
    const LayerWeights<T>& w = model.layers[static_cast<std::size_t>(l)];
    tensors.emplace_back(tag + "wq", &w.wq);
    tensors.emplace_back(tag + "wk", &w.wk);
    tensors.emplace_back(tag + "wv", &w.wv);
    tensors.emplace_back(tag + "wo", &w.wo);
    tensors.emplace_back(tag + "w_up", &w.w_up);
    tensors.emplace_back(tag + "w_down", &w.w_down);
    if (model.cfg.rank > 0) {
      for (idx a = 0; a < model.cfg.n_agents; ++a) {
        const auto atag = tag + "agent" + std::to_string(a) + ".";
        tensors.emplace_back(atag + "q_lora.a", &w.q_lora->adapter(a).a);
        tensors.emplace_back(atag + "q_lora.b", &w.q_lora->adapter(a).b);
        tensors.emplace_back(atag + "v_lora.a", &w.v_lora->adapter(a).a);
        tensors.emplace_back(atag + "v_lora.b", &w.v_lora->adapter(a).b);
      }
    }
  }

  nlohmann::json header;
  header["format"] = "lorakv-model";
  header["version"] = 1;
  header["dtype"] = detail::dtype_name<T>();
  header["config"] = model.cfg.to_json();
  nlohmann::json tj = nlohmann::json::array();
  for (const auto& [name, m] : tensors)
    tj.push_back({{"name", name}, {"rows", m->rows}, {"cols", m->cols}});
  header["tensors"] = tj;

  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open model file for writing: " + path);
  const std::string hs = header.dump();
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, m] : tensors)
    out.write(reinterpret_cast<const char*>(m->data.data()),
              static_cast<std::streamsize>(m->data.size() * sizeof(T)));
  if (!out) fail("model write failed: " + path);
}

template <class T>
Model<T> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open model file: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) fail("model header truncated: " + path);
  const nlohmann::json header = nlohmann::json::parse(hs);
  if (header.at("format") != "lorakv-model") fail("not a model file: " + path);
  if (header.at("dtype") != detail::dtype_name<T>())
    fail("model dtype " + header.at("dtype").get<std::string>() +
         " does not match requested dtype " + detail::dtype_name<T>());
  const ModelConfig cfg = ModelConfig::from_json(header.at("config"));

  // Rebuild the skeleton with the right shapes, then overwrite the payload.
  Model<T> model = build_model<T>(cfg);
  std::vector<Matrix<T>*> order;
  order.push_back(&model.embedding);
  for (idx l = 0; l < cfg.n_layers; ++l) {
    LayerWeights<T>& w = model.layers[static_cast<std::size_t>(l)];
    order.push_back(&w.wq);
    order.push_back(&w.wk);
    order.push_back(&w.wv);
    order.push_back(&w.wo);
    order.push_back(&w.w_up);
    order.push_back(&w.w_down);
    if (cfg.rank > 0) {
      for (idx a = 0; a < cfg.n_agents; ++a) {
        order.push_back(&w.q_lora->adapters[static_cast<std::size_t>(a)].a);
        order.push_back(&w.q_lora->adapters[static_cast<std::size_t>(a)].b);
        order.push_back(&w.v_lora->adapters[static_cast<std::size_t>(a)].a);
        order.push_back(&w.v_lora->adapters[static_cast<std::size_t>(a)].b);
      }
    }
  }
  const auto& tj = header.at("tensors");
  if (tj.size() != order.size()) fail("model tensor list mismatch: " + path);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const idx rows = tj[i].at("rows").get<idx>();
    const idx cols = tj[i].at("cols").get<idx>();
    if (rows != order[i]->rows || cols != order[i]->cols)
      fail("model tensor shape mismatch at index " + std::to_string(i));
    in.read(reinterpret_cast<char*>(order[i]->data.data()),
            static_cast<std::streamsize>(order[i]->data.size() * sizeof(T)));
  }
  if (!in) fail("model payload truncated: " + path);
  for (idx i = 0; i < cfg.vocab; ++i)
    for (idx j = 0; j < cfg.d_model; ++j) model.readout(j, i) = model.embedding(i, j);
  if (cfg.rank > 0) {
    for (const LayerWeights<T>& w : model.layers)
      for (const auto* set : {&*w.q_lora, &*w.v_lora})
        for (const auto& ad : set->adapters)
          if (ad.a.data != set->adapters.front().a.data)
            fail("model file violates the shared down-projection layout: " + path);
  }
  return model;
}

}  // namespace lorakv
