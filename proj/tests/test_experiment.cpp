#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

using namespace lagvae;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lagvae_test_experiment_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig tiny_run(const fs::path& root) {
  RunConfig cfg;
  cfg.synth.n_train = 60;
  cfg.synth.n_valid = 20;
  cfg.synth.n_test = 20;
  cfg.synth.vocab = 20;
  cfg.synth.hidden = 8;
  cfg.synth.embed = 8;
  cfg.synth.length = 5;
  cfg.model.vocab = 20;
  cfg.model.embed = cfg.model.enc_hidden = cfg.model.dec_hidden = 8;
  cfg.train.batch_size = 20;
  cfg.train.max_epochs = 3;
  cfg.train.monitor_iw_samples = 5;
  cfg.train.seed = 11;
  cfg.eval_iw_samples = 10;
  cfg.snapshot_points = 5;
  cfg.grid_low = -10.0;
  cfg.grid_high = 10.0;
  cfg.grid_stride = 0.05;
  cfg.data_dir = (root / "data").string();
  cfg.out_dir = (root / "runs").string();
  return cfg;
}

Trainer make_trainer(VaeModel& model, const Dataset& ds, const RunConfig& cfg) {
  model.initialize(cfg.init_spec(), cfg.train.seed);
  return Trainer(model, ds, cfg.train);
}

void expect_same_history(const std::vector<MetricsRecord>& a, const std::vector<MetricsRecord>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].neg_elbo, b[i].neg_elbo) << "epoch " << a[i].epoch;
    EXPECT_EQ(a[i].kl, b[i].kl);
    EXPECT_EQ(a[i].iw_nll, b[i].iw_nll);
    EXPECT_EQ(a[i].mi, b[i].mi);
    EXPECT_EQ(a[i].au, b[i].au);
    EXPECT_EQ(a[i].lr, b[i].lr);
    EXPECT_EQ(a[i].aggressive, b[i].aggressive);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, SerializationRoundTrips) {
  RunConfig cfg = tiny_run("/tmp/x");
  cfg.train.mode = TrainMode::AggressiveAnnealing;
  cfg.train.inner.policy = InnerPolicy::Budget;
  cfg.train.inner.budget = 30;
  cfg.train.anneal.unit = AnnealUnit::Iteration;
  cfg.train.optimizer = OptimizerKind::Adam;
  cfg.train.enc_lr = 0.1 + 0.2;
  cfg.model.enc_head_bias = true;
  cfg.synth.means = {{-1.5, 0.25}, {3.0, 1.0 / 3.0}};
  cfg.init = "offset";
  const std::string text = serialize_config(cfg);
  const RunConfig back = parse_config(text);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(back.train.enc_lr, cfg.train.enc_lr);
  EXPECT_EQ(back.synth.means, cfg.synth.means);
  EXPECT_TRUE(back.model.enc_head_bias);
  EXPECT_EQ(back.train.mode, TrainMode::AggressiveAnnealing);
  EXPECT_EQ(config_digest(back), config_digest(cfg));
}

TEST(Config, CommentsAndWhitespace) {
  const RunConfig cfg = parse_config("# header\n\n  train.batch_size =  7   # trailing\ntrain.mode=beta\n");
  EXPECT_EQ(cfg.train.batch_size, 7u);
  EXPECT_EQ(cfg.train.mode, TrainMode::Beta);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  try {
    parse_config("train.batch_size = 4\ntrain.bogus = 1\n", {}, "run.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("run.cfg:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("train.bogus"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_config("train.batch_size 4\n"), ConfigError);
  EXPECT_THROW(parse_config("train.batch_size = four\n"), ConfigError);
  EXPECT_THROW(parse_config("model.enc_head_bias = maybe\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/run.cfg"), IoError);
}

TEST(Config, UnknownModeListsValidModes) {
  try {
    parse_config("train.mode = fancy\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* m : {"basic", "aggressive", "annealing", "beta", "aggressive+annealing"})
      EXPECT_NE(msg.find(m), std::string::npos) << msg;
  }
}

TEST(Config, DigestTracksTrainingKeysOnly) {
  const RunConfig base = tiny_run("/tmp/x");
  RunConfig eval_only = base;
  eval_only.eval_iw_samples = 77;
  eval_only.out_dir = "elsewhere";
  EXPECT_EQ(config_digest(eval_only), config_digest(base));
  RunConfig trained = base;
  trained.train.dec_lr = 0.5;
  EXPECT_NE(config_digest(trained), config_digest(base));
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, EncodingRoundTripsBitwise) {
  const fs::path root = scratch_dir("encode");
  RunConfig cfg = tiny_run(root);
  cfg.train.optimizer = OptimizerKind::Adam;
  cfg.train.enc_lr = cfg.train.dec_lr = 0.01;
  const Dataset ds = generate_synthetic(cfg.synth);
  VaeModel model(cfg.model);
  Trainer trainer = make_trainer(model, ds, cfg);
  for (int i = 0; i < 4; ++i) trainer.step();
  const Checkpoint ck = capture(trainer, cfg);
  const std::string bytes = encode_checkpoint(ck);
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(back), bytes);
  ASSERT_EQ(back.params.size(), ck.params.size());
  for (std::size_t i = 0; i < ck.params.size(); ++i) EXPECT_EQ(back.params[i].values, ck.params[i].values);
  EXPECT_EQ(back.config_digest, config_digest(cfg));
  EXPECT_EQ(serialize_config(back.config()), serialize_config(cfg));

  save_checkpoint(ck, root / "a.bin");
  EXPECT_EQ(read_file(root / "a.bin"), bytes);
  EXPECT_FALSE(fs::exists(root / "a.bin.tmp"));
  fs::remove_all(root);
}

TEST(Checkpoint, FormatErrors) {
  const fs::path root = scratch_dir("format");
  const RunConfig cfg = tiny_run(root);
  const Dataset ds = generate_synthetic(cfg.synth);
  VaeModel model(cfg.model);
  Trainer trainer = make_trainer(model, ds, cfg);
  const std::string bytes = encode_checkpoint(capture(trainer, cfg));

  std::string version = bytes;
  version[12] = 2;  // version word follows the 8-byte magic and the byte-order marker
  EXPECT_THROW(decode_checkpoint(version), MigrationError);
  std::string swapped = bytes;
  std::swap(swapped[8], swapped[11]);
  std::swap(swapped[9], swapped[10]);
  EXPECT_THROW(decode_checkpoint(swapped), MigrationError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), ParseError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), ParseError);
  EXPECT_THROW(decode_checkpoint(bytes + "junk"), ParseError);
  EXPECT_THROW(load_checkpoint(root / "absent.bin"), IoError);
  fs::remove_all(root);
}

TEST(Checkpoint, ShapeMismatchIsValidationError) {
  const RunConfig cfg = tiny_run("/tmp/x");
  const VaeModel model(cfg.model);
  RunConfig wider = cfg;
  wider.model.dec_hidden = 9;
  VaeModel other(wider.model);
  EXPECT_THROW(load_params(other, capture_params(model)), ValidationError);
}

TEST(Checkpoint, MidEpochResumeIsBitwiseIdentical) {
  const RunConfig cfg = [] {
    RunConfig c = tiny_run("/tmp/x");
    c.train.mode = TrainMode::Aggressive;
    c.train.inner.policy = InnerPolicy::Budget;
    c.train.inner.budget = 3;
    return c;
  }();
  const Dataset ds = generate_synthetic(cfg.synth);

  VaeModel straight_model(cfg.model);
  Trainer straight = make_trainer(straight_model, ds, cfg);
  straight.run();

  VaeModel first_model(cfg.model);
  Trainer first = make_trainer(first_model, ds, cfg);
  for (int i = 0; i < 5; ++i) first.step();  // 3 batches per epoch: stops inside epoch 2
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(capture(first, cfg)));

  VaeModel resumed_model(cfg.model);
  resumed_model.initialize(InitSpec::offset(), 999);  // overwritten by the restore
  Trainer resumed(resumed_model, ds, cfg.train);
  restore(resumed, ck);
  resumed.run();

  expect_same_history(straight.history(), resumed.history());
  const auto a = capture_params(straight_model), b = capture_params(resumed_model);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].values, b[i].values) << a[i].name;
}

// ---------------------------------------------------------------------------
// Commands

TEST(Commands, SynthIsReproducibleAndRecordsProvenance) {
  const fs::path root = scratch_dir("synth");
  RunConfig cfg = tiny_run(root);
  cfg.data_dir = (root / "nested" / "data").string();
  cmd_synth(cfg);
  const std::string first = read_file(fs::path(cfg.data_dir) / "train.txt");
  cmd_synth(cfg);
  EXPECT_EQ(read_file(fs::path(cfg.data_dir) / "train.txt"), first);
  const std::string prov = read_file(fs::path(cfg.data_dir) / "provenance.txt");
  EXPECT_NE(prov.find("synth.seed = " + std::to_string(cfg.synth.seed)), std::string::npos) << prov;
  EXPECT_NE(prov.find("synth.vocab = 20"), std::string::npos) << prov;
  const RunConfig replay = parse_config(prov);
  EXPECT_EQ(generate_synthetic(replay.synth).train.sequences, load_dataset(cfg.data_dir).train.sequences);
  fs::remove_all(root);
}

TEST(Commands, InterruptedTrainingResumesToIdenticalMetrics) {
  const fs::path root = scratch_dir("resume");
  RunConfig cfg = tiny_run(root);
  cmd_synth(cfg);

  RunConfig straight = cfg;
  straight.out_dir = (root / "straight").string();
  const auto full = cmd_train(straight);
  ASSERT_EQ(full.size(), 1u);
  ASSERT_TRUE(full[0].finished);

  RunConfig again = cfg;
  again.out_dir = (root / "again").string();
  cmd_train(again);
  EXPECT_EQ(read_file(fs::path(again.out_dir) / "seed_11" / "metrics.csv"),
            read_file(fs::path(straight.out_dir) / "seed_11" / "metrics.csv"));

  // A pre-raised stop flag interrupts after the first generator update.
  std::atomic<bool> stop{true};
  const auto cut = cmd_train(cfg, false, &stop);
  ASSERT_FALSE(cut[0].finished);
  EXPECT_TRUE(cut[0].history.empty());
  const auto rest = cmd_train(cfg, true);
  ASSERT_TRUE(rest[0].finished);
  expect_same_history(rest[0].history, full[0].history);
  EXPECT_EQ(read_file(fs::path(cfg.out_dir) / "seed_11" / "metrics.csv"),
            read_file(fs::path(straight.out_dir) / "seed_11" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "seed_11" / "ckpt" / "final.bin"));
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "seed_11" / "ckpt" / "epoch_2.bin"));

  RunConfig changed = cfg;
  changed.train.dec_lr = 0.5;
  EXPECT_THROW(cmd_train(changed, true), ValidationError);
  fs::remove_all(root);
}

TEST(Commands, SeedBatchWritesOneDirectoryPerSeed) {
  const fs::path root = scratch_dir("seeds");
  RunConfig cfg = tiny_run(root);
  cfg.train.max_epochs = 1;
  cfg.seeds = 5;
  cmd_synth(cfg);
  const auto runs = cmd_train(cfg);
  ASSERT_EQ(runs.size(), 5u);
  for (std::uint64_t s = 11; s < 16; ++s)
    EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / ("seed_" + std::to_string(s)) / "metrics.csv")) << s;
  EXPECT_NE(runs[0].history[0].neg_elbo, runs[1].history[0].neg_elbo);
  fs::remove_all(root);
}

TEST(Commands, VocabularyMismatchFailsBeforeTraining) {
  const fs::path root = scratch_dir("vocab");
  RunConfig cfg = tiny_run(root);
  cmd_synth(cfg);
  cfg.model.vocab = 25;
  EXPECT_THROW(cmd_train(cfg), ValidationError);
  EXPECT_FALSE(fs::exists(fs::path(cfg.out_dir)));
  fs::remove_all(root);
}

TEST(Commands, EvalTraceAndReport) {
  const fs::path root = scratch_dir("eval");
  RunConfig cfg = tiny_run(root);
  cfg.train.max_epochs = 2;
  cfg.eval_repeats = 3;
  cmd_synth(cfg);
  cmd_train(cfg);
  const fs::path run = fs::path(cfg.out_dir) / "seed_11";
  const fs::path final_ck = run / "ckpt" / "final.bin";

  const EvalSummary a = cmd_eval(final_ck, cfg, "test", run);
  const EvalSummary b = cmd_eval(final_ck, cfg, "test");
  ASSERT_EQ(a.repeats.size(), 3u);
  EXPECT_EQ(a.iw_nll.mean, b.iw_nll.mean);
  EXPECT_EQ(a.iw_nll.variance, b.iw_nll.variance);
  EXPECT_NE(a.repeats[0].iw_nll, a.repeats[1].iw_nll);
  EXPECT_TRUE(fs::exists(run / "eval.csv"));

  const std::vector<fs::path> ckpts{run / "ckpt" / "epoch_0.bin", run / "ckpt" / "epoch_1.bin",
                                    run / "ckpt" / "epoch_2.bin", final_ck};
  const fs::path trace_dir = root / "trace";
  const auto written = cmd_trace(ckpts, cfg, trace_dir);
  ASSERT_EQ(written.size(), 4u);
  for (const auto& p : written) EXPECT_EQ(read_snapshot_csv(p).size(), 5u);
  EXPECT_TRUE(fs::exists(trace_dir / "snapshot_epoch_0.svg"));

  const std::vector<fs::path> missing{run / "ckpt" / "epoch_0.bin", run / "ckpt" / "epoch_99.bin"};
  EXPECT_THROW(cmd_trace(missing, cfg, root / "trace2"), IoError);
  EXPECT_FALSE(fs::exists(root / "trace2"));

  const std::vector<fs::path> runs{run};
  const auto rows = cmd_report(runs, root / "report");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(rows[0].iw_nll, a.iw_nll.mean, 1e-12);
  EXPECT_TRUE(fs::exists(root / "report" / "nll_vs_au.svg"));
  fs::remove_all(root);
}

TEST(Commands, EvalRejectsFutureCheckpointVersion) {
  const fs::path root = scratch_dir("version");
  RunConfig cfg = tiny_run(root);
  cmd_synth(cfg);
  const Dataset ds = load_dataset(cfg.data_dir);
  VaeModel model(cfg.model);
  Trainer trainer = make_trainer(model, ds, cfg);
  std::string bytes = encode_checkpoint(capture(trainer, cfg));
  bytes[12] = 9;
  std::ofstream(root / "future.bin", std::ios::binary) << bytes;
  EXPECT_THROW(cmd_eval(root / "future.bin", cfg), MigrationError);
  fs::remove_all(root);
}
