#pragma once

// Experiment commands behind the CLI: synth, train, eval, trace and report.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "lagvae/checkpoint.hpp"
#include "lagvae/config.hpp"
#include "lagvae/data.hpp"
#include "lagvae/errors.hpp"
#include "lagvae/eval.hpp"
#include "lagvae/train.hpp"
#include "lagvae/vae.hpp"

namespace lagvae {

namespace fs = std::filesystem;

inline Dataset cmd_synth(const RunConfig& cfg) {
  cfg.synth.validate();
  Dataset ds = generate_synthetic(cfg.synth);
  save_dataset(ds, cfg.data_dir);
  // Provenance: every generator setting, seed included, in config syntax.
  const fs::path path = fs::path(cfg.data_dir) / "provenance.txt";
  auto out = open_for_write(path);
  for (const auto& k : config_keys())
    if (k.name.starts_with("synth.")) out << k.name << " = " << k.get(cfg) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
  return ds;
}

inline void check_vocab(const RunConfig& cfg, const Dataset& ds) {
  if (cfg.model.vocab != ds.vocab_size)
    throw ValidationError("model.vocab = " + std::to_string(cfg.model.vocab) + " but the dataset in " + cfg.data_dir +
                          " has vocabulary " + std::to_string(ds.vocab_size));
}

inline fs::path run_directory(const RunConfig& cfg, std::uint64_t seed) {
  return fs::path(cfg.out_dir) / ("seed_" + std::to_string(seed));
}

struct RunOutcome {
  fs::path dir;
  bool finished = false;
  std::vector<MetricsRecord> history;
};

// Trains one seed into `dir`. With `resume`, continues from dir/ckpt/latest.bin
// when it exists. A raised `stop` flag checkpoints the exact position and returns.
inline RunOutcome train_run(const RunConfig& cfg, const Dataset& ds, const fs::path& dir, bool resume,
                            const std::atomic<bool>* stop = nullptr) {
  const fs::path ckpt_dir = dir / "ckpt";
  const fs::path latest = ckpt_dir / "latest.bin";
  fs::create_directories(ckpt_dir);

  VaeModel model(cfg.model);
  model.initialize(cfg.init_spec(), cfg.train.seed);
  Trainer trainer(model, ds, cfg.train);
  if (resume && fs::exists(latest)) {
    const Checkpoint ck = load_checkpoint(latest);
    if (ck.config_digest != config_digest(cfg))
      throw ValidationError("configuration differs from the one that wrote " + latest.string() +
                            "; refusing to resume");
    restore(trainer, ck);
  } else {
    save_config(cfg, dir / "config.txt");
    if (cfg.checkpoint_every > 0) save_checkpoint(capture(trainer, cfg), ckpt_dir / "epoch_0.bin");
  }

  trainer.on_epoch_end([&](const MetricsRecord& rec, Trainer& t) {
    write_metrics_csv(t.history(), dir / "metrics.csv");
    const Checkpoint ck = capture(t, cfg);
    if (cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0)
      save_checkpoint(ck, ckpt_dir / ("epoch_" + std::to_string(rec.epoch) + ".bin"));
    save_checkpoint(ck, latest);
  });

  RunOutcome out;
  out.dir = dir;
  out.finished = trainer.run(stop);
  save_checkpoint(capture(trainer, cfg), latest);
  if (out.finished) save_checkpoint(capture(trainer, cfg), ckpt_dir / "final.bin");
  write_metrics_csv(trainer.history(), dir / "metrics.csv");
  out.history = trainer.history();
  return out;
}

// One run per seed, seeds train.seed .. train.seed + seeds - 1.
inline std::vector<RunOutcome> cmd_train(const RunConfig& cfg, bool resume = false,
                                         const std::atomic<bool>* stop = nullptr) {
  cfg.validate();
  const Dataset ds = load_dataset(cfg.data_dir);
  check_vocab(cfg, ds);
  std::vector<RunOutcome> runs;
  for (std::size_t s = 0; s < cfg.seeds; ++s) {
    RunConfig one = cfg;
    one.train.seed = cfg.train.seed + s;
    one.seeds = 1;
    runs.push_back(train_run(one, ds, run_directory(cfg, one.train.seed), resume, stop));
    if (stop && stop->load()) break;
  }
  return runs;
}

// ---------------------------------------------------------------------------
// Evaluation

struct MetricSummary {
  double mean = 0.0;
  double variance = 0.0;  // unbiased; 0 for a single repeat
};

inline MetricSummary summarize(std::span<const double> v) {
  MetricSummary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x / static_cast<double>(v.size());
  if (v.size() > 1) {
    for (double x : v) s.variance += (x - s.mean) * (x - s.mean);
    s.variance /= static_cast<double>(v.size() - 1);
  }
  return s;
}

struct EvalSummary {
  std::vector<EvalReport> repeats;
  MetricSummary iw_nll, neg_elbo, kl, mi, au;
};

inline VaeModel model_from_checkpoint(const Checkpoint& ck) {
  VaeModel model(ck.config().model);
  load_params(model, ck.params);
  return model;
}

// Repeat r draws from the stream named eval/final/<r> of `seed`.
inline EvalSummary evaluate_repeated(const VaeModel& model, std::span<const Sequence> split, const EvalOptions& opt,
                                     std::size_t repeats, std::uint64_t seed) {
  EvalSummary out;
  std::vector<double> iw, ne, kl, mi, au;
  for (std::size_t r = 0; r < repeats; ++r) {
    RandomStream stream = RandomStream::derive(seed, "eval/final/" + std::to_string(r));
    out.repeats.push_back(evaluate(model, split, opt, stream));
    const auto& e = out.repeats.back();
    iw.push_back(e.iw_nll);
    ne.push_back(e.neg_elbo);
    kl.push_back(e.kl);
    mi.push_back(e.mi.mi);
    au.push_back(static_cast<double>(e.au.count));
  }
  out.iw_nll = summarize(iw);
  out.neg_elbo = summarize(ne);
  out.kl = summarize(kl);
  out.mi = summarize(mi);
  out.au = summarize(au);
  return out;
}

inline constexpr const char* kEvalHeader = "repeat,iw_nll,neg_elbo,kl,mi,au";

inline void write_eval_csv(const EvalSummary& s, const fs::path& path) {
  auto out = open_for_write(path);
  out << kEvalHeader << '\n';
  for (std::size_t r = 0; r < s.repeats.size(); ++r) {
    const auto& e = s.repeats[r];
    out << r << ',' << format_double(e.iw_nll) << ',' << format_double(e.neg_elbo) << ',' << format_double(e.kl)
        << ',' << format_double(e.mi.mi) << ',' << e.au.count << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

// Evaluates a checkpoint on one split of `cfg.data_dir`; writes eval.csv into `out_dir` when given.
inline EvalSummary cmd_eval(const fs::path& checkpoint, const RunConfig& cfg, std::string_view split_name = "test",
                            const fs::path& out_dir = {}) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const VaeModel model = model_from_checkpoint(ck);
  const Dataset ds = load_dataset(cfg.data_dir);
  if (ds.vocab_size != model.vocab())
    throw ValidationError("checkpoint vocabulary " + std::to_string(model.vocab()) + " does not match dataset " +
                          std::to_string(ds.vocab_size));
  EvalOptions opt;
  opt.iw_samples = cfg.eval_iw_samples;
  opt.mi_z_per_x = cfg.eval_mi_z_per_x;
  EvalSummary s = evaluate_repeated(model, ds.split(split_name).sequences, opt, cfg.eval_repeats, cfg.train.seed);
  if (!out_dir.empty()) write_eval_csv(s, out_dir / "eval.csv");
  return s;
}

// ---------------------------------------------------------------------------
// Posterior-mean traces

// One snapshot CSV and SVG per checkpoint, named after the checkpoint file.
inline std::vector<fs::path> cmd_trace(std::span<const fs::path> checkpoints, const RunConfig& cfg,
                                       const fs::path& out_dir) {
  for (const auto& p : checkpoints)
    if (!fs::exists(p)) throw IoError("checkpoint not found: " + p.string());
  const Dataset ds = load_dataset(cfg.data_dir);
  const RiemannGrid grid = cfg.grid();
  std::vector<fs::path> written;
  for (const auto& p : checkpoints) {
    const Checkpoint ck = load_checkpoint(p);
    const VaeModel model = model_from_checkpoint(ck);
    if (model.latent_dim() != 1)
      throw CapabilityError(p.string() + ": posterior mean space needs a scalar latent, model has " +
                            std::to_string(model.latent_dim()) + " dimensions");
    const auto points = mean_space_snapshot(model, ds.valid.sequences, cfg.snapshot_points, grid);
    const std::string label = p.stem().string();
    const fs::path csv = out_dir / ("snapshot_" + label + ".csv");
    write_snapshot_csv(points, csv);
    write_snapshot_svg(points, label, out_dir / ("snapshot_" + label + ".svg"));
    written.push_back(csv);
  }
  return written;
}

// ---------------------------------------------------------------------------
// Cross-run report

struct RunSummary {
  std::string run;
  double iw_nll = std::numeric_limits<double>::quiet_NaN();
  double neg_elbo = 0.0;
  double kl = 0.0;
  double mi = 0.0;
  double au = 0.0;
};

// Uses eval.csv when the run has one, otherwise the last metrics row.
inline RunSummary summarize_run(const fs::path& dir) {
  RunSummary s;
  s.run = dir.string();
  if (fs::exists(dir / "eval.csv")) {
    const auto rows = detail::read_csv(dir / "eval.csv", kEvalHeader);
    if (rows.empty()) throw ParseError((dir / "eval.csv").string() + ": no rows");
    std::vector<double> iw, ne, kl, mi, au;
    for (const auto& f : rows) {
      iw.push_back(detail::parse_double(f[1]));
      ne.push_back(detail::parse_double(f[2]));
      kl.push_back(detail::parse_double(f[3]));
      mi.push_back(detail::parse_double(f[4]));
      au.push_back(detail::parse_double(f[5]));
    }
    s.iw_nll = summarize(iw).mean, s.neg_elbo = summarize(ne).mean, s.kl = summarize(kl).mean;
    s.mi = summarize(mi).mean, s.au = summarize(au).mean;
    return s;
  }
  const fs::path metrics = dir / "metrics.csv";
  if (!fs::exists(metrics)) throw IoError("run directory " + dir.string() + " has neither eval.csv nor metrics.csv");
  const auto history = read_metrics_csv(metrics);
  if (history.empty()) throw ParseError(metrics.string() + ": no epochs recorded");
  const auto& last = history.back();
  s.iw_nll = last.iw_nll, s.neg_elbo = last.neg_elbo, s.kl = last.kl, s.mi = last.mi;
  s.au = static_cast<double>(last.au);
  return s;
}

inline std::vector<RunSummary> cmd_report(std::span<const fs::path> run_dirs, const fs::path& out_dir) {
  std::vector<RunSummary> rows;
  for (const auto& d : run_dirs) rows.push_back(summarize_run(d));
  auto out = open_for_write(out_dir / "report.csv");
  out << "run,iw_nll,neg_elbo,kl,mi,au\n";
  std::vector<ScatterPoint> points;
  for (const auto& r : rows) {
    out << r.run << ',' << format_double(r.iw_nll) << ',' << format_double(r.neg_elbo) << ',' << format_double(r.kl)
        << ',' << format_double(r.mi) << ',' << format_double(r.au) << '\n';
    const double nll = std::isnan(r.iw_nll) ? r.neg_elbo : r.iw_nll;
    points.push_back({r.au, nll});
  }
  if (!out) throw IoError("write failed for " + (out_dir / "report.csv").string());
  write_scatter_svg(points, {"NLL vs active units", "active units", "NLL (nats)", false, false},
                    out_dir / "nll_vs_au.svg");
  return rows;
}

}  // namespace lagvae
