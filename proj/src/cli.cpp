#include "lorakv/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lorakv/analysis.hpp"
#include "lorakv/engine.hpp"
#include "lorakv/fuzz.hpp"
#include "lorakv/trace.hpp"

namespace lorakv {

namespace {

namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open output file: " + path.string());
  out << content;
  if (!out) fail("write failed: " + path.string());
}

std::string default_out_dir() {
  if (const char* env = std::getenv("LORAKV_OUT_DIR")) return env;
  return "out";
}

struct ModelOptions {
  ModelConfig cfg;
  std::string model_path;
  std::string save_model_path;

  void attach(CLI::App* cmd) {
    cmd->add_option("--layers", cfg.n_layers, "transformer layers");
    cmd->add_option("--d-model", cfg.d_model, "hidden width");
    cmd->add_option("--q-heads", cfg.n_q_heads, "query heads");
    cmd->add_option("--kv-heads", cfg.n_kv_heads, "key/value heads");
    cmd->add_option("--d-head", cfg.d_head, "per-head width");
    cmd->add_option("--d-mlp", cfg.d_mlp, "MLP inner width");
    cmd->add_option("--agents", cfg.n_agents, "number of agents");
    cmd->add_option("--rank", cfg.rank, "adapter rank (0 disables adapters)");
    cmd->add_option("--vocab", cfg.vocab, "vocabulary size");
    cmd->add_flag("--rope,!--no-rope", cfg.rope, "rotary position embedding on q/k");
    cmd->add_option("--model", model_path, "load weights from a model file");
    cmd->add_option("--save-model", save_model_path, "write the weights used for the run");
  }

  template <class T>
  Model<T> build(std::uint64_t seed) const {
    if (!model_path.empty()) return load_model<T>(model_path);
    ModelConfig c = cfg;
    c.seed = seed;
    c.validate();
    return build_model<T>(c);
  }
};

// The config file seeds the option defaults; flags given on the command line
// override because CLI::parse assigns over them afterwards.
nlohmann::json read_config(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) fail("cannot open config file: " + path);
  nlohmann::json cfg;
  in >> cfg;
  if (!cfg.is_object()) fail("config file must hold a JSON object: " + path);
  return cfg;
}

template <class V>
void config_take(nlohmann::json& cfg, const char* key, V& target) {
  if (auto it = cfg.find(key); it != cfg.end()) {
    target = it->get<V>();
    cfg.erase(it);
  }
}

int run_kernel_fuzz_cmd(idx iterations, std::uint64_t seed, const std::string& dtype) {
  bool ok = true;
  if (dtype == "f64" || dtype == "both") {
    const KernelFuzzResult r = run_kernel_fuzz<double>(iterations, seed);
    const bool pass = r.max_rel() <= 1e-10;
    std::cout << "kernel-fuzz f64: " << r.comparisons
              << " comparisons, max rel error flash=" << r.max_rel_flash
              << " expand-first=" << r.max_rel_expand << " tol=1e-10 "
              << (pass ? "PASS" : "FAIL") << "\n";
    ok = ok && pass;
  }
  if (dtype == "f32" || dtype == "both") {
    const KernelFuzzResult r = run_kernel_fuzz<float>(iterations, seed);
    const bool pass = r.max_rel() <= 1e-4;
    std::cout << "kernel-fuzz f32: " << r.comparisons
              << " comparisons, max rel error flash=" << r.max_rel_flash
              << " expand-first=" << r.max_rel_expand << " tol=1e-4 "
              << (pass ? "PASS" : "FAIL") << "\n";
    ok = ok && pass;
  }
  return ok ? 0 : 1;
}

template <class T>
int run_trace_cmd(const ModelOptions& model_opts, std::uint64_t seed,
                  const std::vector<std::string>& schemes, const std::vector<idx>& lctx,
                  const std::string& trace_path, idx block_r, idx block_c,
                  const std::vector<idx>& recompute_layers, const std::string& out_dir,
                  const std::vector<std::string>& formats) {
  if (schemes.empty()) fail("run-trace: need at least one --scheme");
  if (lctx.empty() && trace_path.empty())
    fail("run-trace: need at least one --lctx or a --trace file");

  Model<T> model = model_opts.build<T>(seed);
  if (!model_opts.save_model_path.empty()) save_model(model, model_opts.save_model_path);
  const BlockConfig blocks{block_r, block_c};

  std::vector<std::pair<idx, std::vector<TraceStep>>> traces;
  if (!trace_path.empty()) {
    traces.emplace_back(-1, load_trace(trace_path));
  } else {
    for (idx l : lctx) traces.emplace_back(l, generate_trace(l));
  }

  std::vector<CostReport> reports;
  for (const std::string& scheme_name : schemes) {
    CacheScheme scheme = CacheScheme::parse(scheme_name);
    if (scheme.kind == SchemeKind::SelectiveRecompute)
      scheme.recompute_layers =
          recompute_layers.empty()
              ? CacheScheme::default_recompute_layers(model.cfg.n_layers, seed)
              : recompute_layers;
    for (const auto& [l, trace] : traces) {
      CostReport r = run_trace(model, scheme, trace, blocks, l);
      std::cout << "ran " << r.scheme << " total_len=" << r.total_seq_len
                << " total_macs=" << r.counters.total_macs << " wall="
                << r.wall_seconds << "s\n";
      reports.push_back(std::move(r));
    }
  }

  const fs::path out(out_dir);
  const bool want_json = std::find(formats.begin(), formats.end(), "json") != formats.end();
  const bool want_md = std::find(formats.begin(), formats.end(), "md") != formats.end();
  const bool want_csv = std::find(formats.begin(), formats.end(), "csv") != formats.end();
  for (const CostReport& r : reports) {
    if (!want_json) break;
    const std::string label =
        r.l_ctx >= 0 ? "lctx" + std::to_string(r.l_ctx) : "trace";
    write_file(out / ("report_" + r.scheme + "_" + label + ".json"),
               r.to_json().dump(2) + "\n");
  }
  if (want_md) write_file(out / "report.md", reports_markdown(reports));
  if (want_csv) write_file(out / "report.csv", reports_csv(reports));
  std::cout << "wrote reports to " << out.string() << "\n";
  return 0;
}

template <class T>
int analyze_cmd(const ModelOptions& model_opts, std::uint64_t seed, idx trials, idx dims,
                idx ctx_len, bool common_hidden, const std::string& out_dir,
                const std::vector<std::string>& formats) {
  const BoundReport bound = verify_cosine_bound(dims, trials, seed);
  std::cout << "cosine bound: " << bound.trials << " trials, " << bound.violations
            << " violations, min gap " << bound.min_gap << "\n";

  Model<T> model = model_opts.build<T>(seed);
  std::vector<std::int32_t> tokens;
  Rng rng(Rng::mix(seed, 0xc720));
  for (idx i = 0; i < ctx_len; ++i)
    tokens.push_back(static_cast<std::int32_t>(rng.next_u64() %
                                               static_cast<std::uint64_t>(model.cfg.vocab)));
  const SimilarityReport sim = measure_similarity(model, tokens, common_hidden);
  std::cout << "similarity: mean cos base=" << sim.mean_cos_base
            << " full=" << sim.mean_cos_full << " adapter=" << sim.mean_cos_adapter
            << " lr=" << sim.mean_cos_lr << "\n";

  const fs::path out(out_dir);
  const bool want_json = std::find(formats.begin(), formats.end(), "json") != formats.end();
  const bool want_csv = std::find(formats.begin(), formats.end(), "csv") != formats.end();
  if (want_json) {
    write_file(out / "bound.json", bound.to_json().dump(2) + "\n");
    write_file(out / "similarity.json", sim.to_json().dump(2) + "\n");
  }
  if (want_csv) write_file(out / "similarity.csv", sim.to_csv());
  return bound.violations == 0 ? 0 : 1;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"multi-LoRA KV-cache sharing engine"};
  app.require_subcommand(1);

  std::uint64_t seed = 42;
#ifdef LORAKV_DEFAULT_DTYPE
  std::string dtype = LORAKV_DEFAULT_DTYPE;
#else
  std::string dtype = "f64";
#endif
  std::string out_dir = default_out_dir();
  std::string config_path;

  nlohmann::json file_cfg;
  try {
    file_cfg = read_config(args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  // gen-trace
  auto* gen = app.add_subcommand("gen-trace", "write an emulated agent trace file");
  idx gen_lctx = 256;
  std::string gen_out = "trace.json";
  gen->add_option("--lctx", gen_lctx, "retrieved context length per cycle");
  gen->add_option("--out", gen_out, "output trace file");

  // kernel-fuzz
  auto* fuzz = app.add_subcommand("kernel-fuzz",
                                  "randomized blocked-kernel vs oracle verification");
  idx fuzz_iterations = 700;
  std::string fuzz_dtype = "both";
  fuzz->add_option("--iterations", fuzz_iterations, "base shapes (x16 block combos each)")
      ->check(CLI::PositiveNumber);
  fuzz->add_option("--seed", seed, "root seed");
  fuzz->add_option("--dtype", fuzz_dtype, "f32, f64 or both")
      ->check(CLI::IsMember({"f32", "f64", "both"}));

  // run-trace
  auto* run = app.add_subcommand("run-trace", "execute traces under cache schemes");
  ModelOptions run_model;
  std::vector<std::string> run_schemes;
  std::vector<idx> run_lctx;
  std::vector<idx> run_recompute;
  std::string run_trace_path;
  idx block_r = 64, block_c = 64;
  std::vector<std::string> run_formats{"json", "md"};

  // analyze defaults (declared here so the config file can seed both)
  idx trials = 1000, dims = 256, ctx_len = 96;
  bool common_hidden = false;

  try {
    config_take(file_cfg, "seed", seed);
    config_take(file_cfg, "dtype", dtype);
    config_take(file_cfg, "out", out_dir);
    config_take(file_cfg, "scheme", run_schemes);
    config_take(file_cfg, "lctx", run_lctx);
    config_take(file_cfg, "trace", run_trace_path);
    config_take(file_cfg, "block-r", block_r);
    config_take(file_cfg, "block-c", block_c);
    config_take(file_cfg, "format", run_formats);
    config_take(file_cfg, "recompute-layers", run_recompute);
    config_take(file_cfg, "trials", trials);
    config_take(file_cfg, "dims", dims);
    config_take(file_cfg, "ctx-len", ctx_len);
    config_take(file_cfg, "common-hidden", common_hidden);
    config_take(file_cfg, "layers", run_model.cfg.n_layers);
    config_take(file_cfg, "d-model", run_model.cfg.d_model);
    config_take(file_cfg, "q-heads", run_model.cfg.n_q_heads);
    config_take(file_cfg, "kv-heads", run_model.cfg.n_kv_heads);
    config_take(file_cfg, "d-head", run_model.cfg.d_head);
    config_take(file_cfg, "d-mlp", run_model.cfg.d_mlp);
    config_take(file_cfg, "agents", run_model.cfg.n_agents);
    config_take(file_cfg, "rank", run_model.cfg.rank);
    config_take(file_cfg, "vocab", run_model.cfg.vocab);
    config_take(file_cfg, "rope", run_model.cfg.rope);
    config_take(file_cfg, "model", run_model.model_path);
    if (!file_cfg.empty())
      fail("config file sets unknown option '" + file_cfg.begin().key() + "'");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  run->add_option("--scheme", run_schemes, "cache schemes")->delimiter(',');
  run->add_option("--lctx", run_lctx, "retrieved context lengths")->delimiter(',');
  run->add_option("--trace", run_trace_path, "run a trace file instead of --lctx");
  run->add_option("--dtype", dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  run->add_option("--block-r", block_r, "query block size");
  run->add_option("--block-c", block_c, "key/value block size");
  run->add_option("--seed", seed, "root seed");
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--format", run_formats, "report formats: json, md, csv")->delimiter(',');
  run->add_option("--recompute-layers", run_recompute,
                  "layer set for SelectiveRecompute")
      ->delimiter(',');
  run->add_option("--config", config_path, "JSON config file; flags override");
  run_model.attach(run);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "similarity + cosine-bound reports");
  ModelOptions& analyze_model = run_model;  // same model surface for both commands
  analyze->add_option("--trials", trials, "bound trials")->check(CLI::PositiveNumber);
  analyze->add_option("--dims", dims, "bound vector dimension");
  analyze->add_option("--ctx-len", ctx_len, "similarity context length");
  analyze->add_flag("--common-hidden", common_hidden,
                    "evaluate projections on one shared hidden stream");
  analyze->add_option("--dtype", dtype, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  analyze->add_option("--seed", seed, "root seed");
  analyze->add_option("--out", out_dir, "output directory");
  std::vector<std::string> analyze_formats{"json", "csv"};
  analyze->add_option("--format", analyze_formats, "report formats: json, csv")
      ->delimiter(',');
  analyze->add_option("--config", config_path, "JSON config file; flags override");
  analyze_model.attach(analyze);

  std::vector<const char*> argv;
  argv.push_back("lorakv");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());

    if (gen->parsed()) {
      save_trace(generate_trace(gen_lctx), gen_out);
      std::cout << "wrote " << gen_out << " (total length "
                << trace_total_len(generate_trace(gen_lctx)) << ")\n";
      return 0;
    }
    if (fuzz->parsed()) return run_kernel_fuzz_cmd(fuzz_iterations, seed, fuzz_dtype);
    if (run->parsed()) {
      if (dtype == "f32")
        return run_trace_cmd<float>(run_model, seed, run_schemes, run_lctx,
                                    run_trace_path, block_r, block_c, run_recompute,
                                    out_dir, run_formats);
      return run_trace_cmd<double>(run_model, seed, run_schemes, run_lctx,
                                   run_trace_path, block_r, block_c, run_recompute,
                                   out_dir, run_formats);
    }
    if (analyze->parsed()) {
      if (dtype == "f32")
        return analyze_cmd<float>(analyze_model, seed, trials, dims, ctx_len,
                                  common_hidden, out_dir, analyze_formats);
      return analyze_cmd<double>(analyze_model, seed, trials, dims, ctx_len,
                                 common_hidden, out_dir, analyze_formats);
    }
    return 2;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args);
}

}  // namespace lorakv
