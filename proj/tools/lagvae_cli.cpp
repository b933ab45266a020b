// lagvae: synthetic data, training, evaluation and posterior-mean traces.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lagvae/lagvae.hpp"

namespace fs = std::filesystem;
using namespace lagvae;

namespace {

std::atomic<bool> g_stop{false};

void on_sigint(int) { g_stop.store(true); }

// Flags shared by every subcommand: --config, --seed, --out and one flag per config key.
struct ConfigFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "flat key = value config file")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "master seed (train.seed)");
    app->add_option("--out", out, "output directory (out_dir)");
    auto* group = app->add_option_group("config keys");
    for (const auto& key : config_keys())
      group->add_option("--" + key.name, overrides[key.name], key.help);
  }

  RunConfig resolve(RunConfig base) const {
    if (const char* env = std::getenv("LAGVAE_OUT")) base.out_dir = env;
    if (!config_path.empty()) base = load_config(config_path, base);
    for (const auto& key : config_keys()) {
      const auto it = overrides.find(key.name);
      if (it != overrides.end() && !it->second.empty()) key.set(base, it->second);
    }
    if (seed) base.train.seed = *seed;
    if (!out.empty()) base.out_dir = out;
    return base;
  }
};

void print_metrics(const MetricsRecord& r) {
  std::printf("epoch %zu  -elbo %.4f  kl %.4f  iw_nll %.4f  mi %.4f  au %zu  lr %.4g  kl_weight %.3f  aggressive %d\n",
              r.epoch, r.neg_elbo, r.kl, r.iw_nll, r.mi, r.au, r.lr, r.kl_weight, r.aggressive ? 1 : 0);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text VAE posterior-collapse experiments"};
  app.require_subcommand(1);

  ConfigFlags synth_flags, train_flags, eval_flags, trace_flags, report_flags;

  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset into data_dir");
  std::string preset = "small";
  synth->add_option("--preset", preset, "small or paper")->check(CLI::IsMember({"small", "paper"}));
  synth_flags.attach(synth);

  auto* train = app.add_subcommand("train", "train one run per seed into out_dir/seed_<n>");
  bool resume = false;
  train->add_flag("--resume", resume, "continue from ckpt/latest.bin where present");
  train_flags.attach(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint: IW-NLL, -ELBO, KL, MI, AU");
  std::string eval_ckpt, eval_split = "test", eval_report;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--split", eval_split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  eval->add_option("--report-dir", eval_report, "write eval.csv here");
  eval_flags.attach(eval);

  auto* trace = app.add_subcommand("trace", "posterior mean space snapshot per checkpoint");
  std::vector<std::string> trace_ckpts;
  trace->add_option("checkpoints", trace_ckpts, "checkpoint files")->required();
  trace_flags.attach(trace);

  auto* report = app.add_subcommand("report", "aggregate NLL and active units across run directories");
  std::vector<std::string> report_runs;
  report->add_option("runs", report_runs, "run directories")->required();
  report_flags.attach(report);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      RunConfig base;
      if (preset == "paper") base.synth = SyntheticSpec::paper();
      const RunConfig cfg = synth_flags.resolve(base);
      const Dataset ds = cmd_synth(cfg);
      std::printf("wrote %zu/%zu/%zu sequences (vocab %zu) to %s\n", ds.train.sequences.size(),
                  ds.valid.sequences.size(), ds.test.sequences.size(), ds.vocab_size, cfg.data_dir.c_str());
    } else if (*train) {
      const RunConfig cfg = train_flags.resolve(RunConfig{});
      std::signal(SIGINT, on_sigint);
      const auto runs = cmd_train(cfg, resume, &g_stop);
      for (const auto& run : runs) {
        std::printf("%s: %s after %zu epochs\n", run.dir.c_str(), run.finished ? "finished" : "interrupted",
                    run.history.size());
        if (!run.history.empty()) print_metrics(run.history.back());
      }
      if (g_stop.load()) return 130;
    } else if (*eval) {
      RunConfig base = load_checkpoint(eval_ckpt).config();
      const RunConfig cfg = eval_flags.resolve(base);
      const EvalSummary s = cmd_eval(eval_ckpt, cfg, eval_split, eval_report);
      auto line = [](const char* name, const MetricSummary& m) {
        std::printf("%-9s mean %.6f  variance %.3g\n", name, m.mean, m.variance);
      };
      line("iw_nll", s.iw_nll);
      line("neg_elbo", s.neg_elbo);
      line("kl", s.kl);
      line("mi", s.mi);
      line("au", s.au);
    } else if (*trace) {
      RunConfig base = load_checkpoint(trace_ckpts.front()).config();
      const RunConfig cfg = trace_flags.resolve(base);
      std::vector<fs::path> paths(trace_ckpts.begin(), trace_ckpts.end());
      for (const auto& p : cmd_trace(paths, cfg, cfg.out_dir)) std::printf("wrote %s\n", p.c_str());
    } else if (*report) {
      const RunConfig cfg = report_flags.resolve(RunConfig{});
      std::vector<fs::path> dirs(report_runs.begin(), report_runs.end());
      const auto rows = cmd_report(dirs, cfg.out_dir);
      for (const auto& r : rows) std::printf("%s  nll %.4f  au %.2f  mi %.4f\n", r.run.c_str(), r.iw_nll, r.au, r.mi);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
