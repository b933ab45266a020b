#pragma once

// Run configuration: a flat `key = value` text format driven by one key table.
// The same table feeds the command-line flags.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lagvae/data.hpp"
#include "lagvae/errors.hpp"
#include "lagvae/eval.hpp"
#include "lagvae/nn.hpp"
#include "lagvae/random.hpp"
#include "lagvae/train.hpp"
#include "lagvae/vae.hpp"

namespace lagvae {

struct RunConfig {
  SyntheticSpec synth = SyntheticSpec::small();
  VaeConfig model;
  std::string init = "default";  // default | offset
  TrainConfig train;
  std::string data_dir = "data";
  std::string out_dir = "runs";
  std::size_t seeds = 1;             // multi-seed batch: seeds train.seed, train.seed + 1, ...
  std::size_t checkpoint_every = 1;  // epochs
  std::size_t eval_iw_samples = 500;
  std::size_t eval_repeats = 1;
  std::size_t eval_mi_z_per_x = 1;
  std::size_t snapshot_points = 500;
  double grid_low = -20.0;
  double grid_high = 20.0;
  double grid_stride = 0.01;

  InitSpec init_spec() const {
    if (init == "default") return InitSpec::text_default();
    if (init == "offset") return InitSpec::offset();
    throw ConfigError("unknown init '" + init + "' (expected default or offset)");
  }

  RiemannGrid grid() const { return RiemannGrid::make(grid_low, grid_high, grid_stride); }

  void validate() const {
    synth.validate();
    model.validate();
    train.validate();
    (void)init_spec();
    (void)grid();
    if (seeds < 1) throw ConfigError("seeds must be at least 1");
    if (eval_repeats < 1) throw ConfigError("eval_repeats must be at least 1");
    if (eval_mi_z_per_x < 1) throw ConfigError("eval_mi_z_per_x must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Value codecs

namespace detail {

inline std::string trim(std::string_view s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string_view::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return std::string(s.substr(a, b - a + 1));
}

inline double to_double(const std::string& key, const std::string& s) {
  if (s.empty()) throw ConfigError(key + ": empty value");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw ConfigError(key + ": '" + s + "' is not a number");
  return v;
}

template <class Int>
Int to_int(const std::string& key, const std::string& s) {
  Int v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
  return v;
}

inline bool to_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": '" + s + "' is not a boolean");
}

inline std::vector<double> to_doubles(const std::string& key, const std::string& s, char sep) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) out.push_back(to_double(key, trim(part)));
  return out;
}

inline UniformRange to_range(const std::string& key, const std::string& s) {
  const auto v = to_doubles(key, s, ',');
  if (v.size() != 2) throw ConfigError(key + ": expected 'low,high'");
  return {v[0], v[1]};
}

inline std::string from_range(UniformRange r) { return format_double(r.low) + "," + format_double(r.high); }

inline std::vector<std::array<double, 2>> to_means(const std::string& key, const std::string& s) {
  std::vector<std::array<double, 2>> out;
  std::stringstream ss(s);
  std::string pair;
  while (std::getline(ss, pair, ';')) {
    const auto v = to_doubles(key, trim(pair), ',');
    if (v.size() != 2) throw ConfigError(key + ": expected 'x,y;x,y;...'");
    out.push_back({v[0], v[1]});
  }
  return out;
}

inline std::string from_means(const std::vector<std::array<double, 2>>& means) {
  std::string out;
  for (std::size_t i = 0; i < means.size(); ++i)
    out += (i ? ";" : "") + format_double(means[i][0]) + "," + format_double(means[i][1]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Key table

struct ConfigKey {
  std::string name;
  std::string help;
  bool affects_training;  // part of the digest checked on resume
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto size_key = [&k](std::string name, std::string help, bool training, auto member) {
      k.push_back({name, std::move(help), training,
                   [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
                   [member, name](RunConfig& c, const std::string& v) { member(c) = detail::to_int<std::size_t>(name, v); }});
    };
    auto double_key = [&k](std::string name, std::string help, bool training, auto member) {
      k.push_back({name, std::move(help), training,
                   [member](const RunConfig& c) { return lagvae::format_double(member(const_cast<RunConfig&>(c))); },
                   [member, name](RunConfig& c, const std::string& v) { member(c) = detail::to_double(name, v); }});
    };
    auto text_key = [&k](std::string name, std::string help, bool training, auto get, auto set) {
      k.push_back({std::move(name), std::move(help), training, get, set});
    };

    // Synthetic data
    size_key("synth.n_train", "training sequences", true, [](RunConfig& c) -> auto& { return c.synth.n_train; });
    size_key("synth.n_valid", "validation sequences", true, [](RunConfig& c) -> auto& { return c.synth.n_valid; });
    size_key("synth.n_test", "test sequences", true, [](RunConfig& c) -> auto& { return c.synth.n_test; });
    size_key("synth.length", "sequence length", true, [](RunConfig& c) -> auto& { return c.synth.length; });
    size_key("synth.vocab", "vocabulary size", true, [](RunConfig& c) -> auto& { return c.synth.vocab; });
    size_key("synth.hidden", "generator LSTM hidden units", true, [](RunConfig& c) -> auto& { return c.synth.hidden; });
    size_key("synth.embed", "generator embedding size", true, [](RunConfig& c) -> auto& { return c.synth.embed; });
    double_key("synth.variance", "mixture component variance", true,
               [](RunConfig& c) -> auto& { return c.synth.variance; });
    text_key(
        "synth.means", "mixture means as x,y;x,y;...", true,
        [](const RunConfig& c) { return detail::from_means(c.synth.means); },
        [](RunConfig& c, const std::string& v) { c.synth.means = detail::to_means("synth.means", v); });
    text_key(
        "synth.lstm_init", "generator LSTM init range low,high", true,
        [](const RunConfig& c) { return detail::from_range(c.synth.lstm_init); },
        [](RunConfig& c, const std::string& v) { c.synth.lstm_init = detail::to_range("synth.lstm_init", v); });
    text_key(
        "synth.latent_to_vocab_init", "init range of the latent-to-vocabulary weights low,high", true,
        [](const RunConfig& c) { return detail::from_range(c.synth.latent_to_vocab_init); },
        [](RunConfig& c, const std::string& v) {
          c.synth.latent_to_vocab_init = detail::to_range("synth.latent_to_vocab_init", v);
        });
    text_key(
        "synth.seed", "data generation seed", true, [](const RunConfig& c) { return std::to_string(c.synth.seed); },
        [](RunConfig& c, const std::string& v) { c.synth.seed = detail::to_int<std::uint64_t>("synth.seed", v); });

    // Model
    size_key("model.vocab", "model vocabulary (must match the data)", true,
             [](RunConfig& c) -> auto& { return c.model.vocab; });
    size_key("model.embed", "embedding size", true, [](RunConfig& c) -> auto& { return c.model.embed; });
    size_key("model.enc_hidden", "encoder hidden units", true, [](RunConfig& c) -> auto& { return c.model.enc_hidden; });
    size_key("model.dec_hidden", "decoder hidden units", true, [](RunConfig& c) -> auto& { return c.model.dec_hidden; });
    size_key("model.latent", "latent dimension", true, [](RunConfig& c) -> auto& { return c.model.latent; });
    double_key("model.dropout_in", "decoder input dropout", true,
               [](RunConfig& c) -> auto& { return c.model.dropout_in; });
    double_key("model.dropout_out", "decoder output dropout", true,
               [](RunConfig& c) -> auto& { return c.model.dropout_out; });
    text_key(
        "model.enc_head_bias", "trainable bias on the encoder head: true or false", true,
        [](const RunConfig& c) { return std::string(c.model.enc_head_bias ? "true" : "false"); },
        [](RunConfig& c, const std::string& v) { c.model.enc_head_bias = detail::to_bool("model.enc_head_bias", v); });
    text_key(
        "model.init", "parameter initialization: default or offset", true,
        [](const RunConfig& c) { return c.init; }, [](RunConfig& c, const std::string& v) { c.init = v; });

    // Training
    text_key(
        "train.mode", "basic | aggressive | annealing | beta | aggressive+annealing", true,
        [](const RunConfig& c) { return std::string(to_string(c.train.mode)); },
        [](RunConfig& c, const std::string& v) { c.train.mode = parse_train_mode(v); });
    double_key("train.beta", "constant KL weight in beta mode", true, [](RunConfig& c) -> auto& { return c.train.beta; });
    double_key("train.anneal_start", "initial KL weight when annealing", true,
               [](RunConfig& c) -> auto& { return c.train.anneal.start; });
    double_key("train.anneal_end", "final KL weight when annealing", true,
               [](RunConfig& c) -> auto& { return c.train.anneal.end; });
    double_key("train.anneal_span", "annealing length in anneal_unit", true,
               [](RunConfig& c) -> auto& { return c.train.anneal.span; });
    text_key(
        "train.anneal_unit", "epoch or iteration", true,
        [](const RunConfig& c) { return std::string(c.train.anneal.unit == AnnealUnit::Epoch ? "epoch" : "iteration"); },
        [](RunConfig& c, const std::string& v) {
          if (v == "epoch") c.train.anneal.unit = AnnealUnit::Epoch;
          else if (v == "iteration") c.train.anneal.unit = AnnealUnit::Iteration;
          else throw ConfigError("train.anneal_unit: expected epoch or iteration, got '" + v + "'");
        });
    text_key(
        "train.inner_policy", "convergence or budget", true,
        [](const RunConfig& c) {
          return std::string(c.train.inner.policy == InnerPolicy::Convergence ? "convergence" : "budget");
        },
        [](RunConfig& c, const std::string& v) {
          if (v == "convergence") c.train.inner.policy = InnerPolicy::Convergence;
          else if (v == "budget") c.train.inner.policy = InnerPolicy::Budget;
          else throw ConfigError("train.inner_policy: expected convergence or budget, got '" + v + "'");
        });
    size_key("train.inner_patience", "non-improving inner updates before stopping", true,
             [](RunConfig& c) -> auto& { return c.train.inner.patience; });
    size_key("train.inner_budget", "inner updates per generator update under the budget policy", true,
             [](RunConfig& c) -> auto& { return c.train.inner.budget; });
    size_key("train.inner_max_iterations", "cap on inner updates under the convergence policy", true,
             [](RunConfig& c) -> auto& { return c.train.inner.max_iterations; });
    double_key("train.enc_lr", "inference network learning rate", true,
               [](RunConfig& c) -> auto& { return c.train.enc_lr; });
    double_key("train.dec_lr", "generator learning rate", true, [](RunConfig& c) -> auto& { return c.train.dec_lr; });
    text_key(
        "train.optimizer", "sgd or adam", true,
        [](const RunConfig& c) { return std::string(c.train.optimizer == OptimizerKind::Sgd ? "sgd" : "adam"); },
        [](RunConfig& c, const std::string& v) {
          if (v == "sgd") c.train.optimizer = OptimizerKind::Sgd;
          else if (v == "adam") c.train.optimizer = OptimizerKind::Adam;
          else throw ConfigError("train.optimizer: expected sgd or adam, got '" + v + "'");
        });
    double_key("train.adam_beta1", "adam first-moment decay", true,
               [](RunConfig& c) -> auto& { return c.train.adam.beta1; });
    double_key("train.adam_beta2", "adam second-moment decay", true,
               [](RunConfig& c) -> auto& { return c.train.adam.beta2; });
    double_key("train.adam_eps", "adam epsilon", true, [](RunConfig& c) -> auto& { return c.train.adam.eps; });
    double_key("train.clip_norm", "global gradient norm clip, 0 disables", true,
               [](RunConfig& c) -> auto& { return c.train.clip_norm; });
    double_key("train.decay_factor", "learning rate decay factor", true,
               [](RunConfig& c) -> auto& { return c.train.decay.factor; });
    size_key("train.decay_patience", "epochs without improvement before decay", true,
             [](RunConfig& c) -> auto& { return c.train.decay.patience; });
    size_key("train.max_decays", "decays before training terminates", true,
             [](RunConfig& c) -> auto& { return c.train.decay.max_decays; });
    size_key("train.batch_size", "minibatch size", true, [](RunConfig& c) -> auto& { return c.train.batch_size; });
    size_key("train.max_epochs", "epoch limit", true, [](RunConfig& c) -> auto& { return c.train.max_epochs; });
    text_key(
        "train.seed", "master seed of the run", true, [](const RunConfig& c) { return std::to_string(c.train.seed); },
        [](RunConfig& c, const std::string& v) { c.train.seed = detail::to_int<std::uint64_t>("train.seed", v); });
    size_key("train.monitor_iw_samples", "IW samples per example in per-epoch monitoring, 0 skips", true,
             [](RunConfig& c) -> auto& { return c.train.monitor_iw_samples; });
    size_key("train.monitor_examples", "validation examples used for monitoring, 0 uses all", true,
             [](RunConfig& c) -> auto& { return c.train.monitor_examples; });
    size_key("train.mi_z_per_x", "latent samples per example in the MI estimate", true,
             [](RunConfig& c) -> auto& { return c.train.mi_z_per_x; });

    // Runtime and evaluation
    text_key(
        "data_dir", "dataset directory", false, [](const RunConfig& c) { return c.data_dir; },
        [](RunConfig& c, const std::string& v) { c.data_dir = v; });
    text_key(
        "out_dir", "output directory", false, [](const RunConfig& c) { return c.out_dir; },
        [](RunConfig& c, const std::string& v) { c.out_dir = v; });
    size_key("seeds", "number of consecutive seeds to train", false, [](RunConfig& c) -> auto& { return c.seeds; });
    size_key("checkpoint_every", "epochs between checkpoints, 0 keeps only the final one", false,
             [](RunConfig& c) -> auto& { return c.checkpoint_every; });
    size_key("eval.iw_samples", "IW samples per example in final evaluation", false,
             [](RunConfig& c) -> auto& { return c.eval_iw_samples; });
    size_key("eval.repeats", "evaluation repeats with distinct seeds", false,
             [](RunConfig& c) -> auto& { return c.eval_repeats; });
    size_key("eval.mi_z_per_x", "latent samples per example in the final MI estimate", false,
             [](RunConfig& c) -> auto& { return c.eval_mi_z_per_x; });
    size_key("eval.snapshot_points", "examples per posterior-mean snapshot", false,
             [](RunConfig& c) -> auto& { return c.snapshot_points; });
    double_key("eval.grid_low", "lower end of the posterior-mean grid", false,
               [](RunConfig& c) -> auto& { return c.grid_low; });
    double_key("eval.grid_high", "upper end of the posterior-mean grid", false,
               [](RunConfig& c) -> auto& { return c.grid_high; });
    double_key("eval.grid_stride", "posterior-mean grid spacing", false,
               [](RunConfig& c) -> auto& { return c.grid_stride; });
    return k;
  }();
  return keys;
}

inline const ConfigKey* find_config_key(std::string_view name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

inline void set_config_value(RunConfig& cfg, std::string_view key, const std::string& value) {
  const ConfigKey* k = find_config_key(key);
  if (!k) throw ConfigError("unknown config key '" + std::string(key) + "'");
  k->set(cfg, value);
}

// Applies `key = value` lines on top of `cfg`. '#' starts a comment.
inline RunConfig parse_config(std::string_view text, RunConfig cfg = {}, std::string_view origin = "<config>") {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = std::string(origin) + ":" + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    try {
      set_config_value(cfg, detail::trim(std::string_view(body).substr(0, eq)),
                       detail::trim(std::string_view(body).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base), path.string());
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

inline void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  out << serialize_config(cfg);
  if (!out) throw IoError("write failed for " + path.string());
}

// FNV-1a over the serialized training-relevant keys.
inline std::uint64_t config_digest(const RunConfig& cfg) {
  std::string text;
  for (const auto& k : config_keys())
    if (k.affects_training) text += k.name + "=" + k.get(cfg) + "\n";
  return fnv1a(text);
}

}  // namespace lagvae
