#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorakv/matrix.hpp"

namespace lorakv {

enum class SchemeKind {
  NonShared,
  FullShared,
  BaseShared,
  BaseLRShared,
  SelectiveRecompute,
};

struct CacheScheme {
  SchemeKind kind = SchemeKind::NonShared;
  std::vector<idx> recompute_layers;  // SelectiveRecompute only; sorted, unique

  std::string name() const {
    switch (kind) {
      case SchemeKind::NonShared: return "NonShared";
      case SchemeKind::FullShared: return "FullShared";
      case SchemeKind::BaseShared: return "BaseShared";
      case SchemeKind::BaseLRShared: return "BaseLRShared";
      case SchemeKind::SelectiveRecompute: return "SelectiveRecompute";
    }
    return "?";
  }

  static CacheScheme parse(const std::string& s) {
    for (SchemeKind k : {SchemeKind::NonShared, SchemeKind::FullShared,
                         SchemeKind::BaseShared, SchemeKind::BaseLRShared,
                         SchemeKind::SelectiveRecompute}) {
      CacheScheme c{k, {}};
      if (c.name() == s) return c;
    }
    fail("unknown cache scheme '" + s + "'");
  }

  bool is_recompute_layer(idx layer) const {
    return std::binary_search(recompute_layers.begin(), recompute_layers.end(), layer);
  }

  idx first_recompute() const {
    return recompute_layers.empty() ? 0 : recompute_layers.front();
  }

  // Pseudo-sensitivity selection: ceil(n/3) layers, always containing layer 0
  // so that a returning agent recomputes hidden states from the bottom; the
  // rest are drawn from a seeded shuffle. The set stays a config input.
  static std::vector<idx> default_recompute_layers(idx n_layers, std::uint64_t seed);
};

inline std::vector<idx> CacheScheme::default_recompute_layers(idx n_layers,
                                                              std::uint64_t seed) {
  if (n_layers < 1) fail("default_recompute_layers: n_layers must be >= 1");
  const idx want = (n_layers + 2) / 3;
  std::vector<idx> pool;
  for (idx i = 1; i < n_layers; ++i) pool.push_back(i);
  Rng rng(Rng::mix(seed, 0x5ec7));
  for (std::size_t i = pool.size(); i > 1; --i)
    std::swap(pool[i - 1], pool[rng.next_u64() % i]);
  std::vector<idx> out{0};
  for (idx i = 0; i + 1 < want && i < static_cast<idx>(pool.size()); ++i)
    out.push_back(pool[static_cast<std::size_t>(i)]);
  std::sort(out.begin(), out.end());
  return out;
}

// Half-open token interval [begin, end).
struct Interval {
  idx begin = 0;
  idx end = 0;
  idx size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool operator==(const Interval&) const = default;
};

// Work ranges for one step. `kv_recompute` and `skip_layers_below` only
// apply under SelectiveRecompute, where the key/value projection widens to
// the unseen range on recomputed layers and the hidden-state cache lets
// previously produced tokens enter at the first recomputed layer.
struct PrefillPlan {
  Interval hidden_pass;
  Interval kv_project;
  Interval lr_project;
  Interval kv_recompute;
  idx skip_layers_below = 0;

  Interval kv_project_at(idx layer, const CacheScheme& scheme) const {
    if (scheme.kind == SchemeKind::SelectiveRecompute && scheme.is_recompute_layer(layer))
      return kv_recompute;
    return kv_project;
  }
  Interval lr_project_at(idx layer, const CacheScheme& scheme) const {
    if (scheme.kind == SchemeKind::SelectiveRecompute && scheme.is_recompute_layer(layer))
      return kv_recompute;
    return lr_project;
  }
};

// Pure planning core: `length` is the trajectory length before the step,
// `seen` how far the agent has processed, `new_tokens` the appended count.
inline PrefillPlan plan_core(const CacheScheme& scheme, idx length, idx seen,
                             idx new_tokens) {
  if (new_tokens < 0) fail("plan_core: new_tokens must be >= 0");
  if (seen < 0 || seen > length) fail("plan_core: seen out of range");
  const idx total = length + new_tokens;
  const Interval fresh{length, total};
  const Interval unseen{seen, total};
  PrefillPlan plan;
  switch (scheme.kind) {
    case SchemeKind::NonShared:
      plan.hidden_pass = plan.kv_project = plan.lr_project = unseen;
      break;
    case SchemeKind::FullShared:
      plan.hidden_pass = plan.kv_project = plan.lr_project = fresh;
      break;
    case SchemeKind::BaseShared:
      plan.hidden_pass = plan.lr_project = unseen;
      plan.kv_project = fresh;
      break;
    case SchemeKind::BaseLRShared:
      plan.hidden_pass = plan.kv_project = plan.lr_project = fresh;
      break;
    case SchemeKind::SelectiveRecompute:
      plan.hidden_pass = unseen;
      plan.kv_project = plan.lr_project = fresh;
      plan.kv_recompute = unseen;
      plan.skip_layers_below = scheme.first_recompute();
      break;
  }
  return plan;
}

struct CacheBytes {
  std::uint64_t key = 0;
  std::uint64_t value = 0;  // base cache or full value cache
  std::uint64_t lr = 0;
  std::uint64_t hidden = 0;
  std::uint64_t total() const { return key + value + lr + hidden; }
};

struct StoreDims {
  idx n_layers = 0;
  idx d_kv = 0;     // n_kv_heads * d_head
  idx d_model = 0;
  idx rank = 0;
  idx n_agents = 0;
};

// Append-only row buffer.
template <class T>
class GrowMat {
 public:
  GrowMat() = default;
  explicit GrowMat(idx cols) : cols_(cols) {}

  idx rows() const { return rows_; }
  idx cols() const { return cols_; }
  std::uint64_t elements() const { return static_cast<std::uint64_t>(data_.size()); }

  void append(Span2D<const T> src) {
    if (src.cols != cols_) fail("GrowMat::append: column mismatch");
    if (cols_ == 0) {  // rank-0 caches track row counts only
      rows_ += src.rows;
      return;
    }
    const std::size_t old = data_.size();
    data_.resize(old + static_cast<std::size_t>(src.rows * cols_));
    for (idx i = 0; i < src.rows; ++i)
      std::copy(src.row(i), src.row(i) + cols_, data_.begin() + old + i * cols_);
    rows_ += src.rows;
  }

  void overwrite(idx row_begin, Span2D<const T> src) {
    if (src.cols != cols_) fail("GrowMat::overwrite: column mismatch");
    if (row_begin < 0 || row_begin + src.rows > rows_)
      fail("GrowMat::overwrite: rows [" + std::to_string(row_begin) + "," +
           std::to_string(row_begin + src.rows) + ") not materialized");
    for (idx i = 0; i < src.rows; ++i)
      std::copy(src.row(i), src.row(i) + cols_,
                data_.begin() + (row_begin + i) * cols_);
  }

  Span2D<const T> view() const { return Span2D<const T>{data_.data(), rows_, cols_, cols_}; }
  Span2D<const T> rows_view(idx begin, idx end) const {
    return view().row_range(begin, end);
  }
  const std::vector<T>& raw() const { return data_; }
  std::vector<T>& raw_mutable() { return data_; }
  void set_rows(idx r) { rows_ = r; }

 private:
  idx cols_ = 0;
  idx rows_ = 0;
  std::vector<T> data_;
};

// Scheme-aware cache store for one trajectory. Writes follow
// first-writer-wins: rows already materialized are never replaced through
// the append path; the explicit overwrite path exists only for recomputed
// layers under SelectiveRecompute.
template <class T>
class KvStore {
 public:
  KvStore(CacheScheme scheme, StoreDims dims) : scheme_(std::move(scheme)), dims_(dims) {
    if (dims.n_layers < 1 || dims.d_kv < 1 || dims.d_model < 1 || dims.n_agents < 1)
      fail("KvStore: invalid dims");
    if (dims.rank < 0) fail("KvStore: negative rank");
    for (idx l : scheme_.recompute_layers)
      if (l < 0 || l >= dims.n_layers)
        fail("KvStore: recompute layer " + std::to_string(l) + " out of range");
    if (scheme_.kind == SchemeKind::SelectiveRecompute && scheme_.recompute_layers.empty())
      fail("KvStore: SelectiveRecompute requires a non-empty recompute set");
    seen_.assign(static_cast<std::size_t>(dims.n_agents), 0);

    const bool per_agent_kv = scheme_.kind == SchemeKind::NonShared;
    if (per_agent_kv) {
      agent_key_.resize(static_cast<std::size_t>(dims.n_agents));
      agent_value_.resize(static_cast<std::size_t>(dims.n_agents));
      for (idx a = 0; a < dims.n_agents; ++a) {
        agent_key_[a].assign(static_cast<std::size_t>(dims.n_layers), GrowMat<T>(dims.d_kv));
        agent_value_[a].assign(static_cast<std::size_t>(dims.n_layers), GrowMat<T>(dims.d_kv));
      }
    } else {
      key_.assign(static_cast<std::size_t>(dims.n_layers), GrowMat<T>(dims.d_kv));
      value_.assign(static_cast<std::size_t>(dims.n_layers), GrowMat<T>(dims.d_kv));
    }
    if (scheme_.kind == SchemeKind::BaseShared) {
      agent_lr_.resize(static_cast<std::size_t>(dims.n_agents));
      for (idx a = 0; a < dims.n_agents; ++a)
        agent_lr_[a].assign(static_cast<std::size_t>(dims.n_layers), GrowMat<T>(dims.rank));
    }
    if (scheme_.kind == SchemeKind::BaseLRShared)
      shared_lr_.assign(static_cast<std::size_t>(dims.n_layers), GrowMat<T>(dims.rank));
    if (scheme_.kind == SchemeKind::SelectiveRecompute)
      hidden_ = GrowMat<T>(dims.d_model);
  }

  const CacheScheme& scheme() const { return scheme_; }
  const StoreDims& dims() const { return dims_; }
  idx length() const { return length_; }
  const std::vector<std::int32_t>& tokens() const { return tokens_; }

  void append_tokens(const std::vector<std::int32_t>& ids) {
    tokens_.insert(tokens_.end(), ids.begin(), ids.end());
    length_ += static_cast<idx>(ids.size());
  }

  idx seen(idx agent) const { return seen_.at(check_agent(agent)); }
  void mark_seen(idx agent) {
    auto& s = seen_.at(check_agent(agent));
    if (length_ < s) fail("KvStore: seen_upto may not decrease");
    s = length_;
  }

  // Append paths. Rows already materialized are skipped (content unchanged);
  // a gap between the buffer end and row_begin signals a planning bug.
  void append_key(idx layer, idx agent, idx row_begin, Span2D<const T> rows) {
    GrowMat<T>& m = scheme_.kind == SchemeKind::NonShared
                        ? agent_key_[check_agent(agent)][check_layer(layer)]
                        : key_[check_layer(layer)];
    append_fww(m, row_begin, rows, "key");
  }
  void append_value(idx layer, idx agent, idx row_begin, Span2D<const T> rows) {
    GrowMat<T>& m = scheme_.kind == SchemeKind::NonShared
                        ? agent_value_[check_agent(agent)][check_layer(layer)]
                        : value_[check_layer(layer)];
    append_fww(m, row_begin, rows, "value");
  }
  void append_lr(idx layer, idx agent, idx row_begin, Span2D<const T> rows) {
    if (scheme_.kind == SchemeKind::BaseShared) {
      append_fww(agent_lr_[check_agent(agent)][check_layer(layer)], row_begin, rows, "lr");
    } else if (scheme_.kind == SchemeKind::BaseLRShared) {
      append_fww(shared_lr_[check_layer(layer)], row_begin, rows, "lr");
    } else {
      fail("KvStore: scheme " + scheme_.name() + " has no LR cache");
    }
  }
  void append_hidden(idx row_begin, Span2D<const T> rows) {
    if (scheme_.kind != SchemeKind::SelectiveRecompute)
      fail("KvStore: scheme " + scheme_.name() + " has no hidden-state cache");
    append_fww(hidden_, row_begin, rows, "hidden");
  }

  // Overwrite of already-materialized rows; only recomputed layers under
  // SelectiveRecompute may do this, everywhere else it is the
  // overwrite-forbidden error.
  void recompute_overwrite(idx layer, idx row_begin, Span2D<const T> k_rows,
                           Span2D<const T> v_rows) {
    if (scheme_.kind != SchemeKind::SelectiveRecompute || !scheme_.is_recompute_layer(layer))
      fail("KvStore: overwrite of existing cache rows is forbidden (scheme " +
           scheme_.name() + ", layer " + std::to_string(layer) + ")");
    key_[check_layer(layer)].overwrite(row_begin, k_rows);
    value_[layer].overwrite(row_begin, v_rows);
  }

  Span2D<const T> key_view(idx layer, idx agent) const {
    return scheme_.kind == SchemeKind::NonShared
               ? agent_key_[check_agent(agent)][check_layer(layer)].view()
               : key_[check_layer(layer)].view();
  }
  Span2D<const T> value_view(idx layer, idx agent) const {
    return scheme_.kind == SchemeKind::NonShared
               ? agent_value_[check_agent(agent)][check_layer(layer)].view()
               : value_[check_layer(layer)].view();
  }
  // Empty (zero-column) span when the scheme keeps full values.
  Span2D<const T> lr_view(idx layer, idx agent) const {
    if (scheme_.kind == SchemeKind::BaseShared)
      return agent_lr_[check_agent(agent)][check_layer(layer)].view();
    if (scheme_.kind == SchemeKind::BaseLRShared)
      return shared_lr_[check_layer(layer)].view();
    return Span2D<const T>{nullptr, key_view(layer, agent).rows, 0, 0};
  }
  Span2D<const T> hidden_rows(idx begin, idx end) const {
    return hidden_.rows_view(begin, end);
  }
  idx hidden_size() const { return hidden_.rows(); }

  CacheBytes bytes() const {
    CacheBytes b;
    const auto sz = static_cast<std::uint64_t>(sizeof(T));
    for (const auto& m : key_) b.key += m.elements() * sz;
    for (const auto& m : value_) b.value += m.elements() * sz;
    for (const auto& per : agent_key_)
      for (const auto& m : per) b.key += m.elements() * sz;
    for (const auto& per : agent_value_)
      for (const auto& m : per) b.value += m.elements() * sz;
    for (const auto& per : agent_lr_)
      for (const auto& m : per) b.lr += m.elements() * sz;
    for (const auto& m : shared_lr_) b.lr += m.elements() * sz;
    b.hidden += hidden_.elements() * sz;
    return b;
  }

  std::uint64_t allocated_elements() const {
    std::uint64_t n = hidden_.elements();
    for (const auto& m : key_) n += m.elements();
    for (const auto& m : value_) n += m.elements();
    for (const auto& m : shared_lr_) n += m.elements();
    for (const auto& per : agent_key_)
      for (const auto& m : per) n += m.elements();
    for (const auto& per : agent_value_)
      for (const auto& m : per) n += m.elements();
    for (const auto& per : agent_lr_)
      for (const auto& m : per) n += m.elements();
    return n;
  }

  void save_snapshot(const std::string& path) const;
  static KvStore load_snapshot(const std::string& path);

  bool operator==(const KvStore& o) const {
    auto eq = [](const GrowMat<T>& a, const GrowMat<T>& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() && a.raw() == b.raw();
    };
    auto eq_vec = [&](const std::vector<GrowMat<T>>& a, const std::vector<GrowMat<T>>& b) {
      if (a.size() != b.size()) return false;
      for (std::size_t i = 0; i < a.size(); ++i)
        if (!eq(a[i], b[i])) return false;
      return true;
    };
    if (scheme_.kind != o.scheme_.kind || length_ != o.length_ || seen_ != o.seen_ ||
        tokens_ != o.tokens_)
      return false;
    if (!eq_vec(key_, o.key_) || !eq_vec(value_, o.value_) || !eq_vec(shared_lr_, o.shared_lr_))
      return false;
    if (agent_key_.size() != o.agent_key_.size()) return false;
    for (std::size_t a = 0; a < agent_key_.size(); ++a)
      if (!eq_vec(agent_key_[a], o.agent_key_[a])) return false;
    for (std::size_t a = 0; a < agent_value_.size(); ++a)
      if (!eq_vec(agent_value_[a], o.agent_value_[a])) return false;
    for (std::size_t a = 0; a < agent_lr_.size(); ++a)
      if (!eq_vec(agent_lr_[a], o.agent_lr_[a])) return false;
    return eq(hidden_, o.hidden_);
  }

 private:
  std::size_t check_agent(idx agent) const {
    if (agent < 0 || agent >= dims_.n_agents)
      fail("unknown agent " + std::to_string(agent));
    return static_cast<std::size_t>(agent);
  }
  std::size_t check_layer(idx layer) const {
    if (layer < 0 || layer >= dims_.n_layers)
      fail("layer " + std::to_string(layer) + " out of range");
    return static_cast<std::size_t>(layer);
  }

  void append_fww(GrowMat<T>& m, idx row_begin, Span2D<const T> rows, const char* what) {
    if (row_begin > m.rows())
      fail(std::string("KvStore: ") + what + " append leaves a gap at row " +
           std::to_string(m.rows()));
    const idx present = m.rows() - row_begin;  // rows of `rows` already stored
    if (present >= rows.rows) return;          // fully present: first writer wins
    m.append(rows.row_range(present, rows.rows));
  }

  CacheScheme scheme_;
  StoreDims dims_;
  idx length_ = 0;
  std::vector<std::int32_t> tokens_;
  std::vector<idx> seen_;

  std::vector<GrowMat<T>> key_, value_, shared_lr_;
  std::vector<std::vector<GrowMat<T>>> agent_key_, agent_value_, agent_lr_;
  GrowMat<T> hidden_{0};

  friend struct SnapshotAccess;
};

template <class T>
inline PrefillPlan plan_step(const KvStore<T>& store, idx agent, idx new_tokens) {
  return plan_core(store.scheme(), store.length(), store.seen(agent), new_tokens);
}

// ---- snapshot serialization ----

namespace detail {
template <class T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }
}  // namespace detail

struct SnapshotAccess {
  template <class T>
  static void save(const KvStore<T>& s, const std::string& path) {
    nlohmann::json header;
    header["format"] = "lorakv-cache-snapshot";
    header["version"] = 1;
    header["dtype"] = detail::dtype_name<T>();
    header["scheme"] = s.scheme_.name();
    header["recompute_layers"] = s.scheme_.recompute_layers;
    header["n_layers"] = s.dims_.n_layers;
    header["d_kv"] = s.dims_.d_kv;
    header["d_model"] = s.dims_.d_model;
    header["rank"] = s.dims_.rank;
    header["n_agents"] = s.dims_.n_agents;
    header["length"] = s.length_;
    header["seen_upto"] = s.seen_;
    header["tokens"] = s.tokens_;

    std::vector<std::pair<std::string, const GrowMat<T>*>> tensors;
    collect(s, tensors);
    nlohmann::json tj = nlohmann::json::array();
    for (const auto& [name, m] : tensors)
      tj.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
    header["tensors"] = tj;

    std::ofstream out(path, std::ios::binary);
    if (!out) fail("cannot open snapshot file for writing: " + path);
    const std::string hs = header.dump();
    const std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, m] : tensors)
      out.write(reinterpret_cast<const char*>(m->raw().data()),
                static_cast<std::streamsize>(m->raw().size() * sizeof(T)));
    if (!out) fail("snapshot write failed: " + path);
  }

  template <class T>
  static KvStore<T> load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open snapshot file: " + path);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) fail("snapshot header truncated: " + path);
    const nlohmann::json header = nlohmann::json::parse(hs);
    if (header.at("format") != "lorakv-cache-snapshot")
      fail("not a cache snapshot: " + path);
    if (header.at("dtype") != detail::dtype_name<T>())
      fail("snapshot dtype " + header.at("dtype").get<std::string>() +
           " does not match build dtype " + detail::dtype_name<T>());

    CacheScheme scheme = CacheScheme::parse(header.at("scheme").get<std::string>());
    scheme.recompute_layers = header.at("recompute_layers").get<std::vector<idx>>();
    StoreDims dims{header.at("n_layers").get<idx>(), header.at("d_kv").get<idx>(),
                   header.at("d_model").get<idx>(), header.at("rank").get<idx>(),
                   header.at("n_agents").get<idx>()};
    KvStore<T> s(scheme, dims);
    s.length_ = header.at("length").get<idx>();
    s.seen_ = header.at("seen_upto").get<std::vector<idx>>();
    s.tokens_ = header.at("tokens").get<std::vector<std::int32_t>>();

    std::vector<std::pair<std::string, const GrowMat<T>*>> tensors;
    collect(s, tensors);
    const auto& tj = header.at("tensors");
    if (tj.size() != tensors.size()) fail("snapshot tensor list mismatch: " + path);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& meta = tj[i];
      if (meta.at("name") != tensors[i].first)
        fail("snapshot tensor order mismatch at " + tensors[i].first);
      auto* m = const_cast<GrowMat<T>*>(tensors[i].second);
      const idx rows = meta.at("rows").get<idx>();
      const idx cols = meta.at("cols").get<idx>();
      if (cols != m->cols()) fail("snapshot tensor width mismatch at " + tensors[i].first);
      m->raw_mutable().resize(static_cast<std::size_t>(rows * cols));
      m->set_rows(rows);
      in.read(reinterpret_cast<char*>(m->raw_mutable().data()),
              static_cast<std::streamsize>(m->raw_mutable().size() * sizeof(T)));
    }
    if (!in) fail("snapshot payload truncated: " + path);
    return s;
  }

  template <class T>
  static void collect(const KvStore<T>& s,
                      std::vector<std::pair<std::string, const GrowMat<T>*>>& out) {
    auto layer_tag = [](idx l) { return "layer" + std::to_string(l); };
    for (idx l = 0; l < s.dims_.n_layers; ++l) {
      if (!s.key_.empty()) {
        out.emplace_back(layer_tag(l) + ".key", &s.key_[l]);
        out.emplace_back(layer_tag(l) + ".value", &s.value_[l]);
      }
      for (idx a = 0; a < static_cast<idx>(s.agent_key_.size()); ++a) {
        out.emplace_back(layer_tag(l) + ".key.agent" + std::to_string(a),
                         &s.agent_key_[a][l]);
        out.emplace_back(layer_tag(l) + ".value.agent" + std::to_string(a),
                         &s.agent_value_[a][l]);
      }
      for (idx a = 0; a < static_cast<idx>(s.agent_lr_.size()); ++a)
        out.emplace_back(layer_tag(l) + ".lr.agent" + std::to_string(a),
                         &s.agent_lr_[a][l]);
      if (!s.shared_lr_.empty())
        out.emplace_back(layer_tag(l) + ".lr", &s.shared_lr_[l]);
    }
    if (s.scheme_.kind == SchemeKind::SelectiveRecompute)
      out.emplace_back("hidden", &s.hidden_);
  }
};

template <class T>
void KvStore<T>::save_snapshot(const std::string& path) const {
  SnapshotAccess::save(*this, path);
}

template <class T>
KvStore<T> KvStore<T>::load_snapshot(const std::string& path) {
  return SnapshotAccess::load<T>(path);
}

}  // namespace lorakv
