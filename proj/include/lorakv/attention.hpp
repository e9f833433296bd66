#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "lorakv/matrix.hpp"

namespace lorakv {

// Query / key-value tile sizes for the blocked kernels.
struct BlockConfig {
  idx b_r = 64;
  idx b_c = 64;
};

// MAC counters for the attention paths. Accounting is dense: every block
// pair contributes its full tile product, masked entries included, so the
// counters reproduce the closed-form cost model independent of tiling.
// Skipping a fully masked tile changes no count.
struct AttnMacs {
  std::uint64_t qk = 0;  // Q K^T scores
  std::uint64_t pv = 0;  // P V_base accumulation
  std::uint64_t lr = 0;  // low-rank path: P V_lr + final expansion (reordered)
                         // or V_lr B + P (V_lr B) (expand-first)
};

struct LrMacCounts {
  std::uint64_t no_reorder = 0;  // L r d_head + L_c L d_head
  std::uint64_t reorder = 0;     // L_c L r + L_c r d_head
};

// Closed-form MAC counts of the two low-rank expansion orders for one head.
inline LrMacCounts lr_mac_counts(idx total_len, idx cur_len, idx rank, idx d_head) {
  const auto L = static_cast<std::uint64_t>(total_len);
  const auto Lc = static_cast<std::uint64_t>(cur_len);
  const auto r = static_cast<std::uint64_t>(rank);
  const auto d = static_cast<std::uint64_t>(d_head);
  return LrMacCounts{L * r * d + Lc * L * d, Lc * L * r + Lc * r * d};
}

// Per-head attention operands. Queries cover rows
// [query_offset, query_offset + L_c) of the sequence; causal masking hides
// key j from query row i when j > query_offset + i. r == 0 (empty v_lr)
// degrades to plain attention over v_base.
template <class T>
struct AttentionInputs {
  Span2D<const T> q;       // L_c x d_head
  Span2D<const T> k;       // L x d_head
  Span2D<const T> v_base;  // L x d_head
  Span2D<const T> v_lr;    // L x r
  Span2D<const T> b_up;    // r x d_head
  T lr_scale = T(1);
  idx query_offset = 0;
};

template <class T>
inline void validate_attention_inputs(const AttentionInputs<T>& in) {
  const idx L = in.k.rows;
  const idx d = in.q.cols;
  if (in.k.cols != d) fail("attention: q/k head dim mismatch");
  if (in.v_base.rows != L || in.v_base.cols != d)
    fail("attention: v_base shape " + shape_str(in.v_base.rows, in.v_base.cols) +
         " does not match k " + shape_str(L, d));
  if (in.v_lr.rows != L && in.v_lr.cols != 0)
    fail("attention: v_lr rows " + std::to_string(in.v_lr.rows) +
         " != sequence length " + std::to_string(L));
  if (in.b_up.rows != in.v_lr.cols || (in.v_lr.cols > 0 && in.b_up.cols != d))
    fail("attention: b_up shape " + shape_str(in.b_up.rows, in.b_up.cols) +
         " does not match rank " + std::to_string(in.v_lr.cols));
  if (in.query_offset < 0 || in.query_offset + in.q.rows > L)
    fail("attention: query_offset " + std::to_string(in.query_offset) +
         " with L_c " + std::to_string(in.q.rows) + " exceeds L " +
         std::to_string(L));
}

// Reference implementation: materializes the full score matrix and the
// expanded value cache. Ground-truth oracle for the blocked kernels.
template <class T>
inline Matrix<T> naive_attention(const AttentionInputs<T>& in) {
  validate_attention_inputs(in);
  const idx L_c = in.q.rows, L = in.k.rows, d = in.q.cols, r = in.v_lr.cols;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  Matrix<T> scores(L_c, L);
  for (idx i = 0; i < L_c; ++i) {
    const T* q_row = in.q.row(i);
    for (idx j = 0; j < L; ++j) {
      if (j > in.query_offset + i) {
        scores(i, j) = neg_inf;
        continue;
      }
      T dot = T(0);
      const T* k_row = in.k.row(j);
      for (idx p = 0; p < d; ++p) dot += q_row[p] * k_row[p];
      scores(i, j) = dot * inv_sqrt_d;
    }
  }
  Matrix<T> probs = row_softmax(scores);

  Matrix<T> value(L, d);
  for (idx j = 0; j < L; ++j)
    for (idx p = 0; p < d; ++p) value(j, p) = in.v_base(j, p);
  if (r > 0) {
    Matrix<T> expanded = matmul(in.v_lr, in.b_up);
    for (idx j = 0; j < L; ++j)
      for (idx p = 0; p < d; ++p) value(j, p) += in.lr_scale * expanded(j, p);
  }
  return matmul(probs.view(), value.view());
}

// Final online-softmax state per query row, exposed for verification.
template <class T>
struct OnlineSoftmaxStats {
  std::vector<T> row_max;
  std::vector<T> row_denom;
};

namespace detail {

template <class T>
struct FlashState {
  idx rows, d, r;
  std::vector<T> o;       // rows x d accumulator
  std::vector<T> o_lr;    // rows x r accumulator
  std::vector<T> m, l;    // running max / denominator
  FlashState(idx rows_, idx d_, idx r_)
      : rows(rows_), d(d_), r(r_),
        o(static_cast<std::size_t>(rows_ * d_), T(0)),
        o_lr(static_cast<std::size_t>(rows_ * r_), T(0)),
        m(static_cast<std::size_t>(rows_), -std::numeric_limits<T>::infinity()),
        l(static_cast<std::size_t>(rows_), T(0)) {}
};

// One key/value tile update for query rows [i0, i0+rows). `extra_v` lets the
// expand-first variant stream a second full-dim value operand.
template <class T>
inline void flash_tile_update(const AttentionInputs<T>& in, idx i0, idx j0, idx j1,
                              Span2D<const T> extra_v, std::vector<T>& extra_acc,
                              FlashState<T>& st) {
  const idx d = st.d, r = st.r, bc = j1 - j0;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  std::vector<T> p(static_cast<std::size_t>(bc));

  for (idx a = 0; a < st.rows; ++a) {
    const idx last_visible = in.query_offset + i0 + a;
    const T* q_row = in.q.row(i0 + a);

    T row_max = neg_inf;
    for (idx b = 0; b < bc; ++b) {
      if (j0 + b > last_visible) {
        p[b] = neg_inf;
        continue;
      }
      T dot = T(0);
      const T* k_row = in.k.row(j0 + b);
      for (idx c = 0; c < d; ++c) dot += q_row[c] * k_row[c];
      p[b] = dot * inv_sqrt_d;
      row_max = std::max(row_max, p[b]);
    }
    // Row fully masked within this tile: keep the running state untouched.
    if (row_max == neg_inf) continue;

    const T m_new = std::max(st.m[a], row_max);
    const T alpha = st.m[a] == neg_inf ? T(0) : std::exp(st.m[a] - m_new);
    T row_sum = T(0);
    for (idx b = 0; b < bc; ++b) {
      p[b] = p[b] == neg_inf ? T(0) : std::exp(p[b] - m_new);
      row_sum += p[b];
    }
    st.l[a] = alpha * st.l[a] + row_sum;
    st.m[a] = m_new;

    T* o_row = st.o.data() + a * d;
    for (idx c = 0; c < d; ++c) o_row[c] *= alpha;
    T* olr_row = st.o_lr.data() + a * r;
    for (idx c = 0; c < r; ++c) olr_row[c] *= alpha;
    T* extra_row = extra_acc.empty() ? nullptr : extra_acc.data() + a * d;
    if (extra_row)
      for (idx c = 0; c < d; ++c) extra_row[c] *= alpha;

    for (idx b = 0; b < bc; ++b) {
      const T pb = p[b];
      if (pb == T(0)) continue;
      const T* v_row = in.v_base.row(j0 + b);
      for (idx c = 0; c < d; ++c) o_row[c] += pb * v_row[c];
      if (r > 0) {
        const T* lr_row = in.v_lr.row(j0 + b);
        for (idx c = 0; c < r; ++c) olr_row[c] += pb * lr_row[c];
      }
      if (extra_row) {
        const T* e_row = extra_v.row(j0 + b);
        for (idx c = 0; c < d; ++c) extra_row[c] += pb * e_row[c];
      }
    }
  }
}

}  // namespace detail

// Blocked attention with online softmax and a rank-r value accumulator.
// Streams key/value tiles, accumulating P V_base in full dimension and
// P V_lr in rank r; the up-projection is applied once per query block after
// the key loop, then the denominator division. The low-rank cache is never
// expanded over the sequence length.
template <class T>
inline Matrix<T> flash_lora_attention(const AttentionInputs<T>& in,
                                      const BlockConfig& cfg,
                                      AttnMacs* macs = nullptr,
                                      OnlineSoftmaxStats<T>* stats = nullptr) {
  validate_attention_inputs(in);
  if (cfg.b_r < 1 || cfg.b_c < 1) fail("flash_lora_attention: block sizes must be >= 1");
  const idx L_c = in.q.rows, L = in.k.rows, d = in.q.cols, r = in.v_lr.cols;
  Matrix<T> out(L_c, d);
  if (stats) {
    stats->row_max.assign(static_cast<std::size_t>(L_c), T(0));
    stats->row_denom.assign(static_cast<std::size_t>(L_c), T(0));
  }

  std::vector<T> no_extra;
  for (idx i0 = 0; i0 < L_c; i0 += cfg.b_r) {
    const idx i1 = std::min(i0 + cfg.b_r, L_c);
    detail::FlashState<T> st(i1 - i0, d, r);
    for (idx j0 = 0; j0 < L; j0 += cfg.b_c) {
      const idx j1 = std::min(j0 + cfg.b_c, L);
      if (macs) {
        const auto br = static_cast<std::uint64_t>(i1 - i0);
        const auto bc = static_cast<std::uint64_t>(j1 - j0);
        macs->qk += br * static_cast<std::uint64_t>(d) * bc;
        macs->pv += br * bc * static_cast<std::uint64_t>(d);
        macs->lr += br * bc * static_cast<std::uint64_t>(r);
      }
      // Tile entirely above the causal boundary for every query row in the
      // block: skip before the max/exp update so no -inf flows through.
      if (j0 > in.query_offset + i1 - 1) continue;
      detail::flash_tile_update(in, i0, j0, j1, Span2D<const T>{}, no_extra, st);
    }
    if (macs)
      macs->lr += static_cast<std::uint64_t>(i1 - i0) *
                  static_cast<std::uint64_t>(r) * static_cast<std::uint64_t>(d);
    if (r > 0) {
      for (idx a = 0; a < st.rows; ++a) {
        T* o_row = st.o.data() + a * d;
        const T* olr_row = st.o_lr.data() + a * r;
        for (idx p = 0; p < r; ++p) {
          const T w = in.lr_scale * olr_row[p];
          const T* b_row = in.b_up.row(p);
          for (idx c = 0; c < d; ++c) o_row[c] += w * b_row[c];
        }
      }
    }
    for (idx a = 0; a < st.rows; ++a) {
      if (!(st.l[a] > T(0)))
        fail("flash_lora_attention: zero softmax denominator at row " +
             std::to_string(i0 + a));
      for (idx c = 0; c < d; ++c) out(i0 + a, c) = st.o[a * d + c] / st.l[a];
      if (stats) {
        stats->row_max[static_cast<std::size_t>(i0 + a)] = st.m[a];
        stats->row_denom[static_cast<std::size_t>(i0 + a)] = st.l[a];
      }
    }
  }
  ensure_finite(out, "flash_lora_attention");
  return out;
}

// Baseline that materializes scale * (V_lr B) over the whole sequence before
// attending. Kept permanently as the counter-verified expand-first variant;
// its lr counter follows the no-reorder cost form.
template <class T>
inline Matrix<T> expand_first_attention(const AttentionInputs<T>& in,
                                        const BlockConfig& cfg,
                                        AttnMacs* macs = nullptr) {
  validate_attention_inputs(in);
  if (cfg.b_r < 1 || cfg.b_c < 1) fail("expand_first_attention: block sizes must be >= 1");
  const idx L_c = in.q.rows, L = in.k.rows, d = in.q.cols, r = in.v_lr.cols;

  Matrix<T> expanded(L, r > 0 ? d : 0);
  if (r > 0) {
    expanded = matmul(in.v_lr, in.b_up);
    for (auto& v : expanded.data) v *= in.lr_scale;
  }
  if (macs)
    macs->lr += static_cast<std::uint64_t>(L) * static_cast<std::uint64_t>(r) *
                static_cast<std::uint64_t>(d);

  Matrix<T> out(L_c, d);
  for (idx i0 = 0; i0 < L_c; i0 += cfg.b_r) {
    const idx i1 = std::min(i0 + cfg.b_r, L_c);
    detail::FlashState<T> st(i1 - i0, d, 0);
    std::vector<T> extra_acc(
        r > 0 ? static_cast<std::size_t>((i1 - i0) * d) : 0, T(0));
    AttentionInputs<T> base_only = in;
    base_only.v_lr = Span2D<const T>{nullptr, L, 0, 0};
    base_only.b_up = Span2D<const T>{nullptr, 0, r > 0 ? d : 0, 0};
    for (idx j0 = 0; j0 < L; j0 += cfg.b_c) {
      const idx j1 = std::min(j0 + cfg.b_c, L);
      if (macs) {
        const auto br = static_cast<std::uint64_t>(i1 - i0);
        const auto bc = static_cast<std::uint64_t>(j1 - j0);
        macs->qk += br * static_cast<std::uint64_t>(d) * bc;
        macs->pv += br * bc * static_cast<std::uint64_t>(d);
        macs->lr += br * bc * static_cast<std::uint64_t>(r > 0 ? d : 0);
      }
      if (j0 > in.query_offset + i1 - 1) continue;
      detail::flash_tile_update(base_only, i0, j0, j1,
                                r > 0 ? expanded.view() : Span2D<const T>{},
                                extra_acc, st);
    }
    for (idx a = 0; a < st.rows; ++a) {
      if (!(st.l[a] > T(0)))
        fail("expand_first_attention: zero softmax denominator at row " +
             std::to_string(i0 + a));
      for (idx c = 0; c < d; ++c) {
        T v = st.o[a * d + c];
        if (r > 0) v += extra_acc[static_cast<std::size_t>(a * d + c)];
        out(i0 + a, c) = v / st.l[a];
      }
    }
  }
  ensure_finite(out, "expand_first_attention");
  return out;
}

// Multi-head attention with grouped-query head mapping: query head h reads
// key/value head h / (n_q / n_kv). All heads share one rank-r value cache;
// each kv head owns a column slice of the up-projection.
template <class T>
inline Matrix<T> gqa_attention(Span2D<const T> q, Span2D<const T> k,
                               Span2D<const T> v_base, Span2D<const T> v_lr,
                               Span2D<const T> b_up, T lr_scale, idx query_offset,
                               idx n_q_heads, idx n_kv_heads, const BlockConfig& cfg,
                               AttnMacs* macs = nullptr) {
  if (n_q_heads < 1 || n_kv_heads < 1 || n_q_heads % n_kv_heads != 0)
    fail("gqa_attention: n_q_heads " + std::to_string(n_q_heads) +
         " not divisible by n_kv_heads " + std::to_string(n_kv_heads));
  if (q.cols % n_q_heads != 0) fail("gqa_attention: q width not divisible by head count");
  const idx d_head = q.cols / n_q_heads;
  if (k.cols != n_kv_heads * d_head || v_base.cols != n_kv_heads * d_head)
    fail("gqa_attention: k/v width does not match n_kv_heads * d_head");
  const idx group = n_q_heads / n_kv_heads;

  Matrix<T> out(q.rows, q.cols);
  for (idx h = 0; h < n_q_heads; ++h) {
    const idx kv = h / group;
    AttentionInputs<T> in;
    in.q = q.col_range(h * d_head, (h + 1) * d_head);
    in.k = k.col_range(kv * d_head, (kv + 1) * d_head);
    in.v_base = v_base.col_range(kv * d_head, (kv + 1) * d_head);
    in.v_lr = v_lr;
    in.b_up = v_lr.cols > 0 ? b_up.col_range(kv * d_head, (kv + 1) * d_head)
                            : Span2D<const T>{nullptr, 0, d_head, 0};
    in.lr_scale = lr_scale;
    in.query_offset = query_offset;
    Matrix<T> head_out = flash_lora_attention(in, cfg, macs);
    for (idx i = 0; i < head_out.rows; ++i)
      for (idx j = 0; j < d_head; ++j) out(i, h * d_head + j) = head_out(i, j);
  }
  return out;
}

}  // namespace lorakv
