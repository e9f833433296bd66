#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lorakv/kvcache.hpp"
#include "lorakv/rng.hpp"

using namespace lorakv;

namespace {

Matrix<double> fill_rows(idx rows, idx cols, double tag) {
  Matrix<double> m(rows, cols);
  for (idx i = 0; i < rows; ++i)
    for (idx j = 0; j < cols; ++j) m(i, j) = tag + static_cast<double>(i * cols + j);
  return m;
}

StoreDims dims(idx n_layers, idx d_kv, idx d_model, idx rank, idx agents) {
  return StoreDims{n_layers, d_kv, d_model, rank, agents};
}

// Bring a store to trajectory length `L` with every agent fully caught up,
// mirroring the engine's append discipline for each scheme.
void fill_caught_up(KvStore<double>& store, idx L) {
  const StoreDims& d = store.dims();
  std::vector<std::int32_t> ids(static_cast<std::size_t>(L), 1);
  store.append_tokens(ids);
  const bool per_agent_kv = store.scheme().kind == SchemeKind::NonShared;
  for (idx layer = 0; layer < d.n_layers; ++layer) {
    const Matrix<double> kv = fill_rows(L, d.d_kv, 1000.0 * layer);
    if (per_agent_kv) {
      for (idx a = 0; a < d.n_agents; ++a) {
        store.append_key(layer, a, 0, kv.view());
        store.append_value(layer, a, 0, kv.view());
      }
    } else {
      store.append_key(layer, 0, 0, kv.view());
      store.append_value(layer, 0, 0, kv.view());
    }
    if (store.scheme().kind == SchemeKind::BaseShared) {
      const Matrix<double> lr = fill_rows(L, d.rank, 77.0 + layer);
      for (idx a = 0; a < d.n_agents; ++a) store.append_lr(layer, a, 0, lr.view());
    }
    if (store.scheme().kind == SchemeKind::BaseLRShared) {
      const Matrix<double> lr = fill_rows(L, d.rank, 77.0 + layer);
      store.append_lr(layer, 0, 0, lr.view());
    }
  }
  if (store.scheme().kind == SchemeKind::SelectiveRecompute)
    store.append_hidden(0, fill_rows(L, d.d_model, 5.0).view());
  for (idx a = 0; a < d.n_agents; ++a) store.mark_seen(a);
}

}  // namespace

TEST_CASE("plan: cold start computes the new tokens in full for every scheme") {
  for (SchemeKind kind : {SchemeKind::NonShared, SchemeKind::FullShared,
                          SchemeKind::BaseShared, SchemeKind::BaseLRShared,
                          SchemeKind::SelectiveRecompute}) {
    const CacheScheme scheme{kind, {0}};
    const PrefillPlan plan = plan_core(scheme, 0, 0, 16);
    CHECK(plan.hidden_pass == Interval{0, 16});
    CHECK(plan.kv_project_at(0, scheme) == Interval{0, 16});
    CHECK(plan.lr_project_at(0, scheme) == Interval{0, 16});
  }
}

TEST_CASE("plan: agent switch after a 1000-token prefill") {
  // Agent 0 prefilled 1000 tokens; agent 1 appends 10.
  SUBCASE("BaseLRShared touches only the appended tokens") {
    const PrefillPlan plan =
        plan_core(CacheScheme{SchemeKind::BaseLRShared, {}}, 1000, 0, 10);
    CHECK(plan.hidden_pass == Interval{1000, 1010});
    CHECK(plan.kv_project == Interval{1000, 1010});
    CHECK(plan.lr_project == Interval{1000, 1010});
  }
  SUBCASE("BaseShared runs the LR prefill over the whole unseen context") {
    const PrefillPlan plan =
        plan_core(CacheScheme{SchemeKind::BaseShared, {}}, 1000, 0, 10);
    CHECK(plan.hidden_pass == Interval{0, 1010});
    CHECK(plan.kv_project == Interval{1000, 1010});
    CHECK(plan.lr_project == Interval{0, 1010});
    // lr_project contains kv_project
    CHECK(plan.lr_project.begin <= plan.kv_project.begin);
    CHECK(plan.lr_project.end >= plan.kv_project.end);
  }
  SUBCASE("NonShared recomputes everything it has not seen") {
    const PrefillPlan plan =
        plan_core(CacheScheme{SchemeKind::NonShared, {}}, 1000, 0, 10);
    CHECK(plan.hidden_pass == Interval{0, 1010});
    CHECK(plan.kv_project == Interval{0, 1010});
  }
  SUBCASE("FullShared reuses everything") {
    const PrefillPlan plan =
        plan_core(CacheScheme{SchemeKind::FullShared, {}}, 1000, 0, 10);
    CHECK(plan.hidden_pass == Interval{1000, 1010});
  }
  SUBCASE("SelectiveRecompute widens kv projection on recomputed layers only") {
    const CacheScheme scheme{SchemeKind::SelectiveRecompute, {0, 2}};
    const PrefillPlan plan = plan_core(scheme, 1000, 0, 10);
    CHECK(plan.hidden_pass == Interval{0, 1010});
    CHECK(plan.kv_project == Interval{1000, 1010});
    CHECK(plan.kv_project_at(0, scheme) == Interval{0, 1010});
    CHECK(plan.kv_project_at(1, scheme) == Interval{1000, 1010});
    CHECK(plan.kv_project_at(2, scheme) == Interval{0, 1010});
    CHECK(plan.skip_layers_below == 0);
  }
  SUBCASE("hidden-cache boundary is the first recomputed layer") {
    const CacheScheme scheme{SchemeKind::SelectiveRecompute, {2, 3}};
    CHECK(plan_core(scheme, 1000, 0, 10).skip_layers_below == 2);
  }
}

TEST_CASE("append: first writer wins, later writers add only their own rows") {
  KvStore<double> store(CacheScheme{SchemeKind::BaseShared, {}}, dims(1, 4, 8, 2, 3));
  store.append_tokens(std::vector<std::int32_t>(6, 1));
  const Matrix<double> base0 = fill_rows(6, 4, 0.0);
  store.append_key(0, 0, 0, base0.view());
  store.append_value(0, 0, 0, base0.view());
  store.append_lr(0, 0, 0, fill_rows(6, 2, 10.0).view());
  store.mark_seen(0);

  // Agent 1 presents different content for the same rows: the base cache is
  // unchanged, only its LR rows land.
  const Matrix<double> base1 = fill_rows(6, 4, 500.0);
  store.append_key(0, 1, 0, base1.view());
  store.append_value(0, 1, 0, base1.view());
  store.append_lr(0, 1, 0, fill_rows(6, 2, 20.0).view());
  store.mark_seen(1);
  CHECK(store.value_view(0, 1)(0, 0) == 0.0);
  CHECK(store.key_view(0, 1)(5, 3) == base0(5, 3));
  CHECK(store.lr_view(0, 1)(0, 0) == 20.0);
  CHECK(store.lr_view(0, 0)(0, 0) == 10.0);

  // A gap between the buffer end and the append offset is a planning bug.
  CHECK_THROWS_WITH_AS(store.append_value(0, 0, 9, fill_rows(1, 4, 0.0).view()),
                       doctest::Contains("gap"), std::runtime_error);
}

TEST_CASE("append: FullShared second agent adds nothing for seen rows") {
  KvStore<double> store(CacheScheme{SchemeKind::FullShared, {}}, dims(1, 4, 8, 0, 2));
  store.append_tokens(std::vector<std::int32_t>(4, 1));
  store.append_key(0, 0, 0, fill_rows(4, 4, 0.0).view());
  store.append_value(0, 0, 0, fill_rows(4, 4, 0.0).view());
  const CacheBytes before = store.bytes();
  store.append_key(0, 1, 0, fill_rows(4, 4, 9.0).view());
  store.append_value(0, 1, 0, fill_rows(4, 4, 9.0).view());
  CHECK(store.bytes().total() == before.total());
  CHECK(store.value_view(0, 1)(0, 0) == 0.0);
}

TEST_CASE("append: NonShared agents own disjoint caches") {
  KvStore<double> store(CacheScheme{SchemeKind::NonShared, {}}, dims(1, 4, 8, 0, 2));
  store.append_tokens(std::vector<std::int32_t>(3, 1));
  store.append_key(0, 0, 0, fill_rows(3, 4, 0.0).view());
  store.append_value(0, 0, 0, fill_rows(3, 4, 0.0).view());
  CHECK(store.key_view(0, 1).rows == 0);
  store.append_key(0, 1, 0, fill_rows(3, 4, 50.0).view());
  store.append_value(0, 1, 0, fill_rows(3, 4, 50.0).view());
  CHECK(store.value_view(0, 0)(0, 0) == 0.0);
  CHECK(store.value_view(0, 1)(0, 0) == 50.0);
}

TEST_CASE("overwrite is forbidden outside recomputed layers") {
  KvStore<double> store(CacheScheme{SchemeKind::BaseShared, {}}, dims(1, 4, 8, 2, 2));
  store.append_tokens(std::vector<std::int32_t>(2, 1));
  store.append_key(0, 0, 0, fill_rows(2, 4, 0.0).view());
  store.append_value(0, 0, 0, fill_rows(2, 4, 0.0).view());
  CHECK_THROWS_WITH_AS(
      store.recompute_overwrite(0, 0, fill_rows(2, 4, 1.0).view(),
                                fill_rows(2, 4, 1.0).view()),
      doctest::Contains("forbidden"), std::runtime_error);

  KvStore<double> sr(CacheScheme{SchemeKind::SelectiveRecompute, {1}}, dims(2, 4, 8, 0, 2));
  sr.append_tokens(std::vector<std::int32_t>(2, 1));
  for (idx l = 0; l < 2; ++l) {
    sr.append_key(l, 0, 0, fill_rows(2, 4, 0.0).view());
    sr.append_value(l, 0, 0, fill_rows(2, 4, 0.0).view());
  }
  CHECK_THROWS_AS(sr.recompute_overwrite(0, 0, fill_rows(2, 4, 1.0).view(),
                                         fill_rows(2, 4, 1.0).view()),
                  std::runtime_error);
  sr.recompute_overwrite(1, 0, fill_rows(2, 4, 1.0).view(), fill_rows(2, 4, 1.0).view());
  CHECK(sr.value_view(1, 0)(0, 0) == 1.0);
}

TEST_CASE("byte accounting matches the closed-form sharing ratios exactly") {
  const idx L = 24, n_layers = 2, N = 3;
  for (idx r : {4, 8, 16, 32}) {
    for (idx d_out : {256, 1024}) {
      KvStore<double> ns(CacheScheme{SchemeKind::NonShared, {}},
                         dims(n_layers, d_out, 4 * d_out, r, N));
      KvStore<double> bs(CacheScheme{SchemeKind::BaseShared, {}},
                         dims(n_layers, d_out, 4 * d_out, r, N));
      KvStore<double> blr(CacheScheme{SchemeKind::BaseLRShared, {}},
                          dims(n_layers, d_out, 4 * d_out, r, N));
      KvStore<double> fs(CacheScheme{SchemeKind::FullShared, {}},
                         dims(n_layers, d_out, 4 * d_out, r, N));
      fill_caught_up(ns, L);
      fill_caught_up(bs, L);
      fill_caught_up(blr, L);
      fill_caught_up(fs, L);

      const CacheBytes nsb = ns.bytes(), bsb = bs.bytes(), blrb = blr.bytes(),
                       fsb = fs.bytes();
      // Value-path ratios vs NonShared: 1/N + r/d_out and 1/N + r/(N d_out).
      CHECK((bsb.value + bsb.lr) * N * d_out == nsb.value * (d_out + N * r));
      CHECK((blrb.value + blrb.lr) * N * d_out == nsb.value * (d_out + r));
      CHECK(fsb.value * N == nsb.value);
      // Key path is 1/N under every sharing scheme.
      CHECK(bsb.key * N == nsb.key);
      CHECK(blrb.key * N == nsb.key);
      CHECK(fsb.key * N == nsb.key);
    }
  }
}

TEST_CASE("byte accounting spot values from the sharing formulas") {
  // N=3, r=8, d_out=1024: BaseShared value ratio 1/3 + 8/1024 = 131/384,
  // BaseLRShared value ratio 1/3 + 8/3072 = 129/384 = 0.3359375.
  const idx L = 16, N = 3, r = 8, d_out = 1024;
  KvStore<double> ns(CacheScheme{SchemeKind::NonShared, {}},
                     dims(1, d_out, 4 * d_out, r, N));
  KvStore<double> bs(CacheScheme{SchemeKind::BaseShared, {}},
                     dims(1, d_out, 4 * d_out, r, N));
  KvStore<double> blr(CacheScheme{SchemeKind::BaseLRShared, {}},
                      dims(1, d_out, 4 * d_out, r, N));
  fill_caught_up(ns, L);
  fill_caught_up(bs, L);
  fill_caught_up(blr, L);
  const std::uint64_t ns_value = ns.bytes().value;
  CHECK((bs.bytes().value + bs.bytes().lr) * 384 == ns_value * 131);
  CHECK((blr.bytes().value + blr.bytes().lr) * 384 == ns_value * 129);
  const double blr_ratio =
      static_cast<double>(blr.bytes().value + blr.bytes().lr) /
      static_cast<double>(ns_value);
  CHECK(blr_ratio == 0.3359375);
}

TEST_CASE("hidden-state cache is twice one layer's KV bytes at group size 4") {
  const idx L = 10, d_kv = 16, d_model = 4 * d_kv;
  KvStore<double> sr(CacheScheme{SchemeKind::SelectiveRecompute, {0}},
                     dims(3, d_kv, d_model, 0, 3));
  fill_caught_up(sr, L);
  const CacheBytes b = sr.bytes();
  const std::uint64_t one_layer_kv = (b.key + b.value) / 3;
  CHECK(b.hidden == 2 * one_layer_kv);
}

TEST_CASE("component bytes sum to allocated elements times dtype size") {
  for (SchemeKind kind : {SchemeKind::NonShared, SchemeKind::BaseShared,
                          SchemeKind::BaseLRShared, SchemeKind::SelectiveRecompute}) {
    KvStore<double> store(CacheScheme{kind, {0}}, dims(2, 8, 32, 4, 3));
    fill_caught_up(store, 12);
    CHECK(store.bytes().total() == store.allocated_elements() * sizeof(double));
  }
  KvStore<float> store32(CacheScheme{SchemeKind::FullShared, {}}, dims(1, 8, 32, 0, 2));
  store32.append_tokens(std::vector<std::int32_t>(4, 1));
  Matrix<float> rows(4, 8);
  store32.append_key(0, 0, 0, rows.view());
  CHECK(store32.bytes().total() == store32.allocated_elements() * sizeof(float));
}

TEST_CASE("seen_upto is monotone and bounded by the trajectory length") {
  KvStore<double> store(CacheScheme{SchemeKind::BaseLRShared, {}}, dims(1, 4, 8, 2, 2));
  CHECK(store.seen(0) == 0);
  store.append_tokens(std::vector<std::int32_t>(5, 1));
  store.mark_seen(0);
  CHECK(store.seen(0) == 5);
  store.append_tokens(std::vector<std::int32_t>(3, 1));
  store.mark_seen(0);
  CHECK(store.seen(0) == 8);
  CHECK(store.seen(1) == 0);
  CHECK_THROWS_AS(store.seen(7), std::runtime_error);
}

TEST_CASE("snapshot round-trips bit-exactly and re-dumps identically") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "lorakv_snapshot_test";
  fs::create_directories(dir);
  for (SchemeKind kind : {SchemeKind::NonShared, SchemeKind::FullShared,
                          SchemeKind::BaseShared, SchemeKind::BaseLRShared,
                          SchemeKind::SelectiveRecompute}) {
    KvStore<double> store(CacheScheme{kind, {0, 1}}, dims(2, 4, 16, 2, 3));
    fill_caught_up(store, 9);
    const std::string path = (dir / ("snap_" + store.scheme().name() + ".bin")).string();
    store.save_snapshot(path);
    const KvStore<double> loaded = KvStore<double>::load_snapshot(path);
    CHECK(loaded == store);
    CHECK(loaded.bytes().total() == store.bytes().total());

    const std::string path2 = path + ".again";
    loaded.save_snapshot(path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)),
                         std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)),
                         std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    CHECK(b1.size() > 8);
  }
  fs::remove_all(dir);
}

TEST_CASE("dtype mismatch is rejected when loading a snapshot") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "lorakv_snapshot_dtype";
  fs::create_directories(dir);
  KvStore<float> store(CacheScheme{SchemeKind::FullShared, {}}, dims(1, 4, 8, 0, 2));
  store.append_tokens(std::vector<std::int32_t>(3, 1));
  Matrix<float> rows(3, 4);
  store.append_key(0, 0, 0, rows.view());
  store.append_value(0, 0, 0, rows.view());
  const std::string path = (dir / "snap.bin").string();
  store.save_snapshot(path);
  CHECK_THROWS_AS(KvStore<double>::load_snapshot(path), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("default recompute set always contains layer zero") {
  for (idx n : {1, 3, 5, 12, 32}) {
    const std::vector<idx> set = CacheScheme::default_recompute_layers(n, 42);
    CHECK(static_cast<idx>(set.size()) == (n + 2) / 3);
    CHECK(set.front() == 0);
    for (std::size_t i = 1; i < set.size(); ++i) CHECK(set[i] > set[i - 1]);
    CHECK(set.back() < n);
    CHECK(set == CacheScheme::default_recompute_layers(n, 42));
  }
  CHECK(CacheScheme::default_recompute_layers(12, 1) !=
        CacheScheme::default_recompute_layers(12, 2));
}

TEST_CASE("scheme parsing and store validation") {
  CHECK(CacheScheme::parse("BaseLRShared").kind == SchemeKind::BaseLRShared);
  CHECK(CacheScheme::parse("NonShared").name() == "NonShared");
  CHECK_THROWS_AS(CacheScheme::parse("turbo"), std::runtime_error);
  CHECK_THROWS_AS(
      KvStore<double>(CacheScheme{SchemeKind::SelectiveRecompute, {}}, dims(2, 4, 8, 0, 2)),
      std::runtime_error);
  CHECK_THROWS_AS(
      KvStore<double>(CacheScheme{SchemeKind::SelectiveRecompute, {5}}, dims(2, 4, 8, 0, 2)),
      std::runtime_error);
}
