// blockdrop command-line tool: train a baseline detector on the synthetic
// task, compress it by progressive block drop, evaluate, benchmark, and run
// the ablation suites.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "blockdrop/cli.hpp"

namespace {

blockdrop::RunConfig resolve_config(const std::string& config_path, std::optional<long> seed,
                                    std::optional<int> threads) {
  blockdrop::RunConfig cfg;
  if (!config_path.empty()) cfg = blockdrop::load_run_config(config_path);
  if (seed) cfg.seed = static_cast<std::uint64_t>(*seed);
  if (threads) cfg.threads = *threads;
  cfg.finalize();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Progressive block-drop compression for temporal action detection"};
  app.require_subcommand(1);

  std::string config_path, ckpt_dir, data_dir, out_dir, split = "val", suite;
  std::string preds_csv;
  std::optional<long> seed;
  std::optional<int> threads;
  int warmup = 5, reps = 30;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* opt = cmd->add_option("--config", config_path, "Run configuration JSON");
    if (needs_config) opt->required();
    cmd->add_option("--seed", seed, "Override the config seed");
    cmd->add_option("--threads", threads, "Worker threads (0 = all cores)");
    cmd->add_option("--out", out_dir, "Output directory")->required();
  };

  CLI::App* train = app.add_subcommand("train", "Train the uncompressed baseline");
  add_common(train, true);

  CLI::App* compress = app.add_subcommand("compress", "Run the progressive block-drop loop");
  add_common(compress, true);
  compress->add_option("--ckpt", ckpt_dir, "Baseline directory produced by train")->required();

  CLI::App* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint or prediction dump");
  add_common(evaluate, false);
  evaluate->add_option("--ckpt", ckpt_dir, "Checkpoint directory (parent of checkpoint/)");
  evaluate->add_option("--data", data_dir, "Dataset directory")->required();
  evaluate->add_option("--split", split, "Split to evaluate: train|val|all");
  evaluate->add_option("--preds", preds_csv, "Evaluate this predictions CSV instead of a model");

  CLI::App* bench = app.add_subcommand("bench", "Measure forward latency");
  bench->add_option("--ckpt", ckpt_dir, "Checkpoint directory (parent of checkpoint/)")
      ->required();
  bench->add_option("--out", out_dir, "Output directory")->required();
  bench->add_option("--warmup", warmup, "Warmup forwards to discard");
  bench->add_option("--reps", reps, "Timed repetitions (>= 10)");
  bench->add_option("--threads", threads, "Concurrent forward streams");

  CLI::App* ablate = app.add_subcommand("ablate", "Run an ablation suite");
  add_common(ablate, true);
  ablate->add_option("--suite", suite, "metrics|alignment|lora|sim_vs_prog|sparsity")->required();
  ablate->add_option("--ckpt", ckpt_dir, "Baseline directory produced by train")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*train) {
      blockdrop::run_train(resolve_config(config_path, seed, threads), out_dir);
    } else if (*compress) {
      blockdrop::run_compress(resolve_config(config_path, seed, threads), ckpt_dir, out_dir);
    } else if (*evaluate) {
      std::optional<std::filesystem::path> preds;
      if (!preds_csv.empty()) preds = preds_csv;
      if (ckpt_dir.empty() && !preds)
        throw blockdrop::ConfigError("evaluate needs --ckpt or --preds");
      blockdrop::run_evaluate(resolve_config(config_path, seed, threads), ckpt_dir, data_dir,
                              split, preds, out_dir);
    } else if (*bench) {
      blockdrop::run_bench(ckpt_dir, warmup, reps, threads.value_or(1), out_dir);
    } else if (*ablate) {
      blockdrop::run_ablate(resolve_config(config_path, seed, threads), suite, ckpt_dir, out_dir);
    }
  } catch (const blockdrop::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const blockdrop::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const blockdrop::ContractError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const blockdrop::TrainingError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 3;
  } catch (const blockdrop::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const blockdrop::DomainError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
