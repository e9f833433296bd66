#pragma once

#include <cstdint>
#include <vector>

#include "lorakv/attention.hpp"
#include "lorakv/matrix.hpp"
#include "lorakv/rng.hpp"

namespace lorakv {

struct KernelFuzzResult {
  idx comparisons = 0;
  double max_rel_flash = 0.0;
  double max_rel_expand = 0.0;
  double max_rel() const { return std::max(max_rel_flash, max_rel_expand); }
};

// Randomized kernel-vs-oracle sweep. Each base case samples shapes
// (L <= max_len, every query offset admissible, r in {0,1,2,8}) and a score
// amplitude that reaches near-underflow exp ranges, then compares the
// blocked kernels against the naive oracle across the full block-size grid
// including b == 1 and b >= L.
template <class T>
KernelFuzzResult run_kernel_fuzz(idx base_cases, std::uint64_t seed, idx max_len = 64) {
  KernelFuzzResult result;
  Rng root(Rng::mix(seed, 0xf022));
  const idx rank_choices[] = {0, 1, 2, 8};
  const idx head_choices[] = {4, 16, 64};
  const double amp_choices[] = {1.0, 5.0, 25.0};
  const idx block_choices[] = {1, 3, 8, 64};

  for (idx c = 0; c < base_cases; ++c) {
    Rng rng = root.child(static_cast<std::uint64_t>(c));
    const idx L = 1 + static_cast<idx>(rng.next_u64() % static_cast<std::uint64_t>(max_len));
    const idx L_c = 1 + static_cast<idx>(rng.next_u64() % static_cast<std::uint64_t>(L));
    const idx offset = static_cast<idx>(rng.next_u64() % static_cast<std::uint64_t>(L - L_c + 1));
    const idx r = rank_choices[rng.next_u64() % 4];
    const idx d = head_choices[rng.next_u64() % 3];
    const double amp = amp_choices[rng.next_u64() % 3];

    Matrix<T> q = Matrix<T>::gaussian(L_c, d, rng.child(1), amp / std::sqrt((double)d));
    Matrix<T> k = Matrix<T>::gaussian(L, d, rng.child(2), amp / std::sqrt((double)d));
    Matrix<T> v = Matrix<T>::gaussian(L, d, rng.child(3), 1.0);
    Matrix<T> v_lr = Matrix<T>::gaussian(L, r, rng.child(4), 1.0);
    Matrix<T> b_up = Matrix<T>::gaussian(r, d, rng.child(5), 1.0);

    AttentionInputs<T> in;
    in.q = q.view();
    in.k = k.view();
    in.v_base = v.view();
    in.v_lr = v_lr.view();
    in.b_up = b_up.view();
    in.lr_scale = static_cast<T>(0.5);
    in.query_offset = offset;

    const Matrix<T> expected = naive_attention(in);
    for (idx br : block_choices) {
      for (idx bc : block_choices) {
        const BlockConfig cfg{br, bc};
        const Matrix<T> got = flash_lora_attention(in, cfg);
        result.max_rel_flash =
            std::max(result.max_rel_flash, max_rel_error(got, expected));
        const Matrix<T> got2 = expand_first_attention(in, cfg);
        result.max_rel_expand =
            std::max(result.max_rel_expand, max_rel_error(got2, expected));
        ++result.comparisons;
      }
    }
  }
  return result;
}

}  // namespace lorakv
