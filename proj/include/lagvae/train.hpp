#pragma once

// Training: basic, aggressive, annealed and beta-weighted VAE optimization.
//
// An epoch is one pass of generator updates over the shuffled training split.
// While the aggressive flag is set, each generator update is preceded by an
// inner loop of inference-only updates on freshly sampled minibatches.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lagvae/data.hpp"
#include "lagvae/errors.hpp"
#include "lagvae/eval.hpp"
#include "lagvae/random.hpp"
#include "lagvae/tensor.hpp"
#include "lagvae/vae.hpp"

namespace lagvae {

enum class TrainMode { Basic, Aggressive, Annealing, Beta, AggressiveAnnealing };

inline constexpr std::string_view kTrainModeNames = "basic, aggressive, annealing, beta, aggressive+annealing";

inline std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Basic: return "basic";
    case TrainMode::Aggressive: return "aggressive";
    case TrainMode::Annealing: return "annealing";
    case TrainMode::Beta: return "beta";
    case TrainMode::AggressiveAnnealing: return "aggressive+annealing";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  for (TrainMode m : {TrainMode::Basic, TrainMode::Aggressive, TrainMode::Annealing, TrainMode::Beta,
                      TrainMode::AggressiveAnnealing})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown training mode '" + std::string(s) + "'; valid modes: " + std::string(kTrainModeNames));
}

inline bool uses_aggressive(TrainMode m) { return m == TrainMode::Aggressive || m == TrainMode::AggressiveAnnealing; }
inline bool uses_annealing(TrainMode m) { return m == TrainMode::Annealing || m == TrainMode::AggressiveAnnealing; }

enum class AnnealUnit { Epoch, Iteration };

struct AnnealSchedule {
  double start = 0.1;
  double end = 1.0;
  double span = 10.0;  // epochs or generator updates, per `unit`
  AnnealUnit unit = AnnealUnit::Epoch;
};

enum class InnerPolicy { Convergence, Budget };

struct InnerLoopConfig {
  InnerPolicy policy = InnerPolicy::Convergence;
  std::size_t patience = 10;         // non-improving updates tolerated
  std::size_t budget = 10;           // updates per generator step under Budget
  std::size_t max_iterations = 100;  // hard cap under Convergence
};

enum class OptimizerKind { Sgd, Adam };

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct LrDecayConfig {
  double factor = 0.5;
  std::size_t patience = 2;  // epochs without validation improvement
  std::size_t max_decays = 5;
};

struct TrainConfig {
  TrainMode mode = TrainMode::Basic;
  double beta = 1.0;  // constant KL weight in beta mode
  AnnealSchedule anneal;
  InnerLoopConfig inner;
  double enc_lr = 1.0;
  double dec_lr = 1.0;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  AdamSettings adam;
  double clip_norm = 5.0;  // 0 disables clipping
  LrDecayConfig decay;
  std::size_t batch_size = 50;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  // Per-epoch validation monitoring.
  std::size_t monitor_iw_samples = 50;  // 0 skips IW-NLL
  std::size_t monitor_examples = 0;     // 0 uses the whole validation split
  std::size_t mi_z_per_x = 1;

  void validate() const {
    if (!(enc_lr > 0.0) || !(dec_lr > 0.0)) throw ConfigError("TrainConfig: learning rates must be positive");
    if (inner.patience < 1) throw ConfigError("TrainConfig: inner patience must be at least 1");
    if (inner.policy == InnerPolicy::Budget && inner.budget < 1)
      throw ConfigError("TrainConfig: inner budget must be at least 1");
    if (inner.max_iterations < 1) throw ConfigError("TrainConfig: inner max_iterations must be at least 1");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("TrainConfig: beta must lie in (0, 1]");
    if (!(anneal.span > 0.0)) throw ConfigError("TrainConfig: anneal span must be positive");
    if (!(anneal.start >= 0.0 && anneal.start <= 1.0 && anneal.end > 0.0 && anneal.end <= 1.0))
      throw ConfigError("TrainConfig: anneal weights must lie in [0, 1]");
    if (!(decay.factor > 0.0 && decay.factor < 1.0)) throw ConfigError("TrainConfig: decay factor must lie in (0, 1)");
    if (decay.patience < 1) throw ConfigError("TrainConfig: decay patience must be at least 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch size must be positive");
    if (max_epochs < 1) throw ConfigError("TrainConfig: max epochs must be positive");
    if (!(clip_norm >= 0.0)) throw ConfigError("TrainConfig: clip norm must be non-negative");
    if (mi_z_per_x < 1) throw ConfigError("TrainConfig: mi_z_per_x must be at least 1");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0))
      throw ConfigError("TrainConfig: invalid adam settings");
  }
};

struct TrainState {
  std::size_t epoch = 0;   // completed epochs
  std::size_t cursor = 0;  // next batch of `order`
  std::vector<std::vector<std::size_t>> order;  // batches of the current epoch; empty between epochs
  std::uint64_t generator_updates = 0;
  std::uint64_t inference_updates = 0;
  std::uint64_t epoch_generator_updates = 0;
  std::uint64_t epoch_inference_updates = 0;
  bool aggressive = false;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t stale_epochs = 0;
  std::size_t decay_count = 0;
  std::vector<double> mi_history;
  double kl_weight = 1.0;
  double enc_lr = 1.0;
  double dec_lr = 1.0;
  bool finished = false;
};

// ---------------------------------------------------------------------------
// Schedules

// `epoch` may be fractional; `iteration` counts generator updates.
inline double kl_weight(const TrainConfig& cfg, double epoch, std::uint64_t iteration) {
  if (cfg.mode == TrainMode::Beta) return cfg.beta;
  if (!uses_annealing(cfg.mode)) return 1.0;
  const double t = cfg.anneal.unit == AnnealUnit::Epoch ? epoch : static_cast<double>(iteration);
  const double progress = std::min(1.0, std::max(0.0, t / cfg.anneal.span));
  return cfg.anneal.start + (cfg.anneal.end - cfg.anneal.start) * progress;
}

// Appends `mi` to the history and latches the flag off once MI stops rising.
inline bool update_aggressive_flag(TrainState& state, double mi) {
  if (state.aggressive && !state.mi_history.empty() && !(mi > state.mi_history.back())) state.aggressive = false;
  state.mi_history.push_back(mi);
  return state.aggressive;
}

struct LrStep {
  double enc_lr = 0.0;
  double dec_lr = 0.0;
  bool decayed = false;
  bool terminate = false;
};

inline LrStep lr_schedule_step(TrainState& state, const LrDecayConfig& cfg, double val_loss) {
  LrStep out;
  if (val_loss < state.best_val_loss) {
    state.best_val_loss = val_loss;
    state.stale_epochs = 0;
  } else if (++state.stale_epochs >= cfg.patience && state.decay_count < cfg.max_decays) {
    state.enc_lr *= cfg.factor;
    state.dec_lr *= cfg.factor;
    ++state.decay_count;
    state.stale_epochs = 0;
    out.decayed = true;
  }
  out.enc_lr = state.enc_lr;
  out.dec_lr = state.dec_lr;
  out.terminate = state.decay_count >= cfg.max_decays;
  return out;
}

// ---------------------------------------------------------------------------
// Inner-loop stopping rule

class InnerLoopMonitor {
 public:
  explicit InnerLoopMonitor(const InnerLoopConfig& cfg) : cfg_(cfg) {}

  // Records the ELBO of one completed update; true while the loop should go on.
  bool observe(double elbo) {
    ++updates_;
    if (cfg_.policy == InnerPolicy::Budget) return updates_ < cfg_.budget;
    if (elbo > best_) {
      best_ = elbo;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return stale_ < cfg_.patience && updates_ < cfg_.max_iterations;
  }

  std::size_t updates() const { return updates_; }

 private:
  InnerLoopConfig cfg_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t stale_ = 0;
  std::size_t updates_ = 0;
};

// ---------------------------------------------------------------------------
// Optimizers

// Scales gradients so their joint L2 norm is at most `max_norm`; returns the norm before scaling.
inline double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.data()->grad) g *= s;
  }
  return norm;
}

struct OptimizerState {
  std::uint64_t steps = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Descent on the loss for one parameter group. step() consumes and clears the gradients.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<ModelParam> params, AdamSettings adam = {}, double clip_norm = 0.0)
      : kind_(kind), params_(std::move(params)), adam_(adam), clip_norm_(clip_norm) {
    if (kind_ == OptimizerKind::Adam) {
      for (const auto& p : params_) {
        state_.first_moment.emplace_back(p.tensor.size(), 0.0);
        state_.second_moment.emplace_back(p.tensor.size(), 0.0);
      }
    }
  }

  void step(double lr) {
    for (const auto& p : params_)
      for (double g : p.tensor.grad())
        if (!std::isfinite(g)) throw TrainingAborted("non-finite gradient in parameter " + p.name);
    if (clip_norm_ > 0.0) {
      std::vector<Tensor> ts;
      for (const auto& p : params_) ts.push_back(p.tensor);
      clip_grad_norm(ts, clip_norm_);
    }
    ++state_.steps;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor t = params_[i].tensor;
      auto value = t.mutable_values();
      const auto grad = t.grad();
      if (kind_ == OptimizerKind::Sgd) {
        if (grad.empty()) continue;
        for (std::size_t j = 0; j < value.size(); ++j) value[j] -= lr * grad[j];
      } else {
        auto& m = state_.first_moment[i];
        auto& v = state_.second_moment[i];
        const double c1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(state_.steps));
        const double c2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(state_.steps));
        for (std::size_t j = 0; j < value.size(); ++j) {
          const double g = grad.empty() ? 0.0 : grad[j];
          m[j] = adam_.beta1 * m[j] + (1.0 - adam_.beta1) * g;
          v[j] = adam_.beta2 * v[j] + (1.0 - adam_.beta2) * g * g;
          value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + adam_.eps);
        }
      }
    }
    zero_grad();
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  OptimizerKind kind() const { return kind_; }
  const std::vector<ModelParam>& params() const { return params_; }
  const OptimizerState& state() const { return state_; }
  void restore(OptimizerState s) {
    if (kind_ == OptimizerKind::Adam && (s.first_moment.size() != params_.size() || s.second_moment.size() != params_.size()))
      throw ValidationError("optimizer state does not match parameter group");
    state_ = std::move(s);
  }

 private:
  OptimizerKind kind_;
  std::vector<ModelParam> params_;
  AdamSettings adam_;
  double clip_norm_;
  OptimizerState state_;
};

inline std::vector<ModelParam> params_with_role(const VaeModel& model, ParamRole role) {
  std::vector<ModelParam> out;
  for (auto& p : model.parameters())
    if (p.role == role) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

struct TrainerStreams {
  RandomStream shuffle;
  RandomStream dropout;
  RandomStream reparam;

  static TrainerStreams derive(std::uint64_t seed) {
    return {RandomStream::derive(seed, "shuffle"), RandomStream::derive(seed, "dropout"),
            RandomStream::derive(seed, "reparam")};
  }
};

class Trainer {
 public:
  using EpochCallback = std::function<void(const MetricsRecord&, Trainer&)>;

  Trainer(VaeModel& model, const Dataset& data, TrainConfig cfg)
      : model_(model),
        data_(data),
        cfg_(validated(cfg)),
        streams_(TrainerStreams::derive(cfg_.seed)),
        enc_opt_(cfg_.optimizer, params_with_role(model, ParamRole::Inference), cfg_.adam, cfg_.clip_norm),
        dec_opt_(cfg_.optimizer, params_with_role(model, ParamRole::Generator), cfg_.adam, cfg_.clip_norm) {
    if (data.vocab_size != model.vocab())
      throw ValidationError("dataset vocabulary " + std::to_string(data.vocab_size) + " does not match model vocabulary " +
                            std::to_string(model.vocab()));
    if (data.train.sequences.empty()) throw InputError("training split is empty");
    if (data.valid.sequences.empty()) throw InputError("validation split is empty");
    model_.set_requires_grad(ParamRole::Inference, true);
    model_.set_requires_grad(ParamRole::Generator, true);
    state_.aggressive = uses_aggressive(cfg_.mode);
    state_.enc_lr = cfg_.enc_lr;
    state_.dec_lr = cfg_.dec_lr;
    state_.kl_weight = current_kl_weight();
  }

  void on_epoch_end(EpochCallback cb) { epoch_callback_ = std::move(cb); }

  // Trains until termination or until `stop` becomes true, checked after every
  // generator update. Returns true when training finished.
  bool run(const std::atomic<bool>* stop = nullptr) {
    while (!state_.finished) {
      step();
      if (stop && stop->load()) return state_.finished;
    }
    return true;
  }

  // One generator update, preceded by the inner loop while aggressive. Closes
  // the epoch after its last batch. Returns false once training has finished.
  bool step() {
    if (state_.finished) return false;
    if (state_.order.empty()) {
      state_.order = batch_indices(data_.train.sequences.size(), cfg_.batch_size, &streams_.shuffle);
      state_.cursor = 0;
      state_.epoch_generator_updates = 0;
      state_.epoch_inference_updates = 0;
    }
    const Batch batch = make_batch(data_.train.sequences, state_.order[state_.cursor]);
    if (state_.aggressive) {
      aggressive_inner_loop();
      generator_step(batch);
    } else {
      joint_step(batch);
    }
    if (++state_.cursor == state_.order.size()) finish_epoch();
    return !state_.finished;
  }

  // Inference-only updates on fresh minibatches until the stopping rule fires.
  std::size_t aggressive_inner_loop() {
    if (!state_.aggressive) throw ContractError("aggressive_inner_loop: aggressive flag is off");
    InnerLoopMonitor monitor(cfg_.inner);
    const FreezeGuard freeze(model_, ParamRole::Generator);
    bool more = true;
    while (more) {
      const Batch batch = make_batch(data_.train.sequences, random_minibatch());
      const double loss = descend(batch, enc_opt_, state_.enc_lr, nullptr, 0.0);
      ++state_.inference_updates;
      ++state_.epoch_inference_updates;
      more = monitor.observe(-loss);
    }
    return monitor.updates();
  }

  // Generator-only update.
  void generator_step(const Batch& batch) {
    const FreezeGuard freeze(model_, ParamRole::Inference);
    descend(batch, dec_opt_, state_.dec_lr, nullptr, 0.0);
    count_generator_update();
  }

  // Simultaneous update of both networks.
  void joint_step(const Batch& batch) {
    descend(batch, enc_opt_, state_.enc_lr, &dec_opt_, state_.dec_lr);
    ++state_.inference_updates;
    ++state_.epoch_inference_updates;
    count_generator_update();
  }

  const TrainConfig& config() const { return cfg_; }
  const TrainState& state() const { return state_; }
  TrainState& mutable_state() { return state_; }
  const std::vector<MetricsRecord>& history() const { return history_; }
  std::vector<MetricsRecord>& mutable_history() { return history_; }
  TrainerStreams& streams() { return streams_; }
  Optimizer& encoder_optimizer() { return enc_opt_; }
  Optimizer& decoder_optimizer() { return dec_opt_; }
  VaeModel& model() { return model_; }

 private:
  // Clears requires_grad on one role for the guard's lifetime.
  class FreezeGuard {
   public:
    FreezeGuard(const VaeModel& model, ParamRole role) : model_(model), role_(role) {
      model_.set_requires_grad(role_, false);
    }
    ~FreezeGuard() { model_.set_requires_grad(role_, true); }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

   private:
    const VaeModel& model_;
    ParamRole role_;
  };

  static const TrainConfig& validated(const TrainConfig& cfg) {
    cfg.validate();
    return cfg;
  }

  double epoch_progress() const {
    const double per_epoch =
        std::ceil(static_cast<double>(data_.train.sequences.size()) / static_cast<double>(cfg_.batch_size));
    return static_cast<double>(state_.generator_updates) / per_epoch;
  }

  double current_kl_weight() const { return kl_weight(cfg_, epoch_progress(), state_.generator_updates); }

  void count_generator_update() {
    ++state_.generator_updates;
    ++state_.epoch_generator_updates;
    state_.kl_weight = current_kl_weight();
  }

  // Floyd's sampling of batch_size distinct training indices.
  std::vector<std::size_t> random_minibatch() {
    const std::size_t n = data_.train.sequences.size();
    const std::size_t k = std::min(cfg_.batch_size, n);
    std::vector<std::size_t> picked;
    picked.reserve(k);
    for (std::size_t j = n - k; j < n; ++j) {
      const std::size_t t = streams_.shuffle.index(j + 1);
      picked.push_back(std::find(picked.begin(), picked.end(), t) == picked.end() ? t : j);
    }
    return picked;
  }

  // Forward, backward and update of one or two parameter groups. Returns the
  // minibatch loss, i.e. the weighted negative ELBO.
  double descend(const Batch& batch, Optimizer& first, double first_lr, Optimizer* second, double second_lr) {
    Tape tape;
    ElboTerms terms;
    {
      TapeScope scope(tape);
      terms = elbo_terms(model_, batch, state_.kl_weight, streams_.reparam, DecodeMode{&streams_.dropout});
    }
    const double loss = terms.loss.item();
    if (!std::isfinite(loss)) abort_non_finite(terms);
    tape.backward(terms.loss);
    first.step(first_lr);
    if (second) second->step(second_lr);
    return loss;
  }

  [[noreturn]] void abort_non_finite(const ElboTerms& terms) const {
    const ElboBreakdown b = terms.mean();
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "non-finite loss: epoch=%zu batch=%zu generator_updates=%llu inference_updates=%llu "
                  "aggressive=%d kl_weight=%.17g enc_lr=%.17g dec_lr=%.17g reconstruction=%.17g kl=%.17g",
                  state_.epoch, state_.cursor, static_cast<unsigned long long>(state_.generator_updates),
                  static_cast<unsigned long long>(state_.inference_updates), state_.aggressive ? 1 : 0,
                  state_.kl_weight, state_.enc_lr, state_.dec_lr, b.reconstruction, b.kl);
    throw TrainingAborted(buf);
  }

  void finish_epoch() {
    RandomStream eval_stream = RandomStream::derive(cfg_.seed, "eval/epoch/" + std::to_string(state_.epoch + 1));
    EvalOptions opt;
    opt.iw_samples = cfg_.monitor_iw_samples;
    opt.mi_z_per_x = cfg_.mi_z_per_x;
    opt.max_examples = cfg_.monitor_examples;
    const EvalReport report = evaluate(model_, data_.valid.sequences, opt, eval_stream);

    MetricsRecord rec;
    rec.epoch = state_.epoch + 1;
    rec.neg_elbo = report.neg_elbo;
    rec.kl = report.kl;
    rec.iw_nll = report.iw_nll;
    rec.mi = report.mi.mi;
    rec.au = report.au.count;
    rec.lr = state_.dec_lr;
    rec.kl_weight = state_.kl_weight;
    rec.aggressive = state_.aggressive;
    if (!std::isfinite(rec.neg_elbo)) throw TrainingAborted("non-finite validation loss after epoch " + std::to_string(rec.epoch));

    if (state_.aggressive) update_aggressive_flag(state_, rec.mi);
    const LrStep lr = lr_schedule_step(state_, cfg_.decay, rec.neg_elbo);
    ++state_.epoch;
    state_.order.clear();
    state_.cursor = 0;
    state_.finished = lr.terminate || state_.epoch >= cfg_.max_epochs;
    history_.push_back(rec);
    if (epoch_callback_) epoch_callback_(rec, *this);
  }

  VaeModel& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  TrainerStreams streams_;
  Optimizer enc_opt_;
  Optimizer dec_opt_;
  TrainState state_;
  std::vector<MetricsRecord> history_;
  EpochCallback epoch_callback_;
};

struct TrainResult {
  std::vector<MetricsRecord> history;
  TrainState state;
};

inline TrainResult train(VaeModel& model, const Dataset& data, const TrainConfig& cfg) {
  Trainer trainer(model, data, cfg);
  trainer.run();
  return {trainer.history(), trainer.state()};
}

}  // namespace lagvae
