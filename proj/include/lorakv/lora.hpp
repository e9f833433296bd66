#pragma once

#include <vector>

#include "lorakv/matrix.hpp"

namespace lorakv {

// One task's low-rank adapter pair: down-projection `a` (d_in x r) and
// up-projection `b` (r x d_out). The effective scale alpha/rank is applied
// with the up-projection, so cached down-projection outputs stay unscaled.
template <class T>
struct LoraAdapter {
  Matrix<T> a;
  Matrix<T> b;
  idx rank = 0;
  double alpha = 0.0;

  LoraAdapter(Matrix<T> a_, Matrix<T> b_, idx rank_, double alpha_)
      : a(std::move(a_)), b(std::move(b_)), rank(rank_), alpha(alpha_) {
    if (rank < 1) fail("LoraAdapter: rank must be >= 1, got " + std::to_string(rank));
    if (a.cols != rank || b.rows != rank)
      fail("LoraAdapter: rank " + std::to_string(rank) + " inconsistent with a " +
           shape_str(a.rows, a.cols) + ", b " + shape_str(b.rows, b.cols));
    if (rank > std::min(a.rows, b.cols))
      fail("LoraAdapter: rank " + std::to_string(rank) + " exceeds min(d_in, d_out)");
    const double s = alpha / static_cast<double>(rank);
    if (!(std::isfinite(s) && s > 0.0))
      fail("LoraAdapter: effective scale alpha/rank must be finite and positive");
  }

  idx d_in() const { return a.rows; }
  idx d_out() const { return b.cols; }
  double lora_scale() const { return alpha / static_cast<double>(rank); }
};

// scale * (y_lr * b); expands rank-r cached rows back to the full output dim.
template <class T>
inline Matrix<T> expand_lr(const Matrix<T>& y_lr, const LoraAdapter<T>& adapter) {
  if (y_lr.cols != adapter.rank)
    fail("expand_lr: rank mismatch, y_lr " + shape_str(y_lr.rows, y_lr.cols) +
         " vs adapter rank " + std::to_string(adapter.rank));
  Matrix<T> out = matmul(y_lr, adapter.b);
  const T s = static_cast<T>(adapter.lora_scale());
  for (auto& v : out.data) v *= s;
  return out;
}

// A base weight with one adapter per agent. With `shared_a` set every
// adapter carries its own copy of the common down-projection; equality is
// checked, not enforced by aliasing.
template <class T>
struct MultiLoraSet {
  Matrix<T> base_weight;
  std::vector<LoraAdapter<T>> adapters;
  bool shared_a = false;

  MultiLoraSet(Matrix<T> base, std::vector<LoraAdapter<T>> adapters_, bool shared_a_)
      : base_weight(std::move(base)), adapters(std::move(adapters_)), shared_a(shared_a_) {
    if (adapters.empty()) fail("MultiLoraSet: needs at least one adapter");
    for (const auto& ad : adapters) {
      if (ad.d_in() != base_weight.rows || ad.d_out() != base_weight.cols)
        fail("MultiLoraSet: adapter dims " + shape_str(ad.d_in(), ad.d_out()) +
             " do not match base weight " +
             shape_str(base_weight.rows, base_weight.cols));
      if (ad.rank != adapters.front().rank)
        fail("MultiLoraSet: adapters must share one rank");
    }
    if (shared_a) {
      for (const auto& ad : adapters)
        if (ad.a.data != adapters.front().a.data)
          fail("MultiLoraSet: shared_a set but down-projections differ");
    }
  }

  idx num_agents() const { return static_cast<idx>(adapters.size()); }
  idx d_in() const { return base_weight.rows; }
  idx d_out() const { return base_weight.cols; }
  idx rank() const { return adapters.front().rank; }

  const LoraAdapter<T>& adapter(idx agent) const {
    if (agent < 0 || agent >= num_agents())
      fail("agent index " + std::to_string(agent) + " out of range [0," +
           std::to_string(num_agents()) + ")");
    return adapters[static_cast<std::size_t>(agent)];
  }
};

template <class T>
struct ForwardParts {
  Matrix<T> y_base;  // x * W0
  Matrix<T> y_lr;    // x * A_agent, unscaled
  Matrix<T> y_full;  // y_base + scale * (y_lr * B_agent)
};

template <class T>
inline ForwardParts<T> forward_decomposed(const MultiLoraSet<T>& set, idx agent,
                                          const Matrix<T>& x) {
  if (x.cols != set.d_in())
    fail("forward_decomposed: x cols " + std::to_string(x.cols) +
         " != d_in " + std::to_string(set.d_in()));
  const LoraAdapter<T>& ad = set.adapter(agent);
  ForwardParts<T> parts;
  parts.y_base = matmul(x, set.base_weight);
  parts.y_lr = matmul(x, ad.a);
  parts.y_full = add(parts.y_base, expand_lr(parts.y_lr, ad));
  return parts;
}

}  // namespace lorakv
