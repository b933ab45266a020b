#pragma once

// Sequence VAE: LSTM inference network q(z|x) with a diagonal-Gaussian head,
// LSTM generator p(x|z) conditioned on z through its initial hidden state and
// through concatenation with every input embedding, and a N(0, I) prior.
//
// The generator reads a begin-of-sequence token first and is scored on an
// end-of-sequence prediction after the last token. Both sentinels use id
// `vocab`: it is an extra input row of the decoder embedding and an extra
// output class of the decoder projection.

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "lagvae/data.hpp"
#include "lagvae/errors.hpp"
#include "lagvae/nn.hpp"
#include "lagvae/random.hpp"
#include "lagvae/tensor.hpp"

namespace lagvae {

inline constexpr double kLog2Pi = 1.8378770664093454836;

struct VaeConfig {
  std::size_t vocab = 200;  // data vocabulary, without sentinels
  std::size_t embed = 50;
  std::size_t enc_hidden = 50;
  std::size_t dec_hidden = 50;
  std::size_t latent = 1;
  double dropout_in = 0.5;   // decoder input embeddings
  double dropout_out = 0.5;  // decoder hidden states before the vocabulary projection
  bool enc_head_bias = false;  // true adds a trainable bias to the encoder head

  void validate() const {
    if (vocab < 1 || embed < 1 || enc_hidden < 1 || dec_hidden < 1 || latent < 1)
      throw ConfigError("VaeConfig: all sizes must be positive");
    if (!(dropout_in >= 0.0 && dropout_in < 1.0) || !(dropout_out >= 0.0 && dropout_out < 1.0))
      throw ConfigError("VaeConfig: dropout rates must lie in [0, 1)");
  }
};

enum class ParamRole { Generator, Inference };

struct ModelParam {
  std::string name;
  std::string group;
  ParamRole role;
  Tensor tensor;
};

class VaeModel {
  VaeConfig cfg_;

 public:
  explicit VaeModel(const VaeConfig& cfg)
      : cfg_(validated(cfg)),
        enc_embed(cfg.vocab, cfg.embed),
        enc_lstm(cfg.embed, cfg.enc_hidden),
        enc_head(cfg.enc_hidden, 2 * cfg.latent),
        dec_embed(cfg.vocab + 1, cfg.embed),
        dec_lstm(cfg.embed + cfg.latent, cfg.dec_hidden),
        dec_init(cfg.latent, cfg.dec_hidden),
        dec_out(cfg.dec_hidden, cfg.vocab + 1) {}

  const VaeConfig& config() const { return cfg_; }
  std::size_t latent_dim() const { return cfg_.latent; }
  std::size_t vocab() const { return cfg_.vocab; }
  int bos() const { return static_cast<int>(cfg_.vocab); }
  int eos() const { return static_cast<int>(cfg_.vocab); }

  // Inference network (phi).
  Embedding enc_embed;
  LstmParams enc_lstm;
  Linear enc_head;  // final hidden state -> [mean; log-variance]

  // Generator (theta).
  Embedding dec_embed;
  LstmParams dec_lstm;
  Linear dec_init;  // z -> initial hidden state
  Linear dec_out;   // hidden -> vocabulary logits (+ end token)

  // Fixed order; checkpoints and initialization depend on it.
  std::vector<ModelParam> parameters() const {
    using R = ParamRole;
    std::vector<ModelParam> all{
        {"enc.embed", "embedding", R::Inference, enc_embed.weight},
        {"enc.lstm.w_ih", "lstm", R::Inference, enc_lstm.w_ih},
        {"enc.lstm.w_hh", "lstm", R::Inference, enc_lstm.w_hh},
        {"enc.lstm.bias", "lstm", R::Inference, enc_lstm.bias},
        {"enc.head.weight", "linear", R::Inference, enc_head.weight},
        {"enc.head.bias", "linear", R::Inference, enc_head.bias},
        {"dec.embed", "embedding", R::Generator, dec_embed.weight},
        {"dec.lstm.w_ih", "lstm", R::Generator, dec_lstm.w_ih},
        {"dec.lstm.w_hh", "lstm", R::Generator, dec_lstm.w_hh},
        {"dec.lstm.bias", "lstm", R::Generator, dec_lstm.bias},
        {"dec.init.weight", "linear", R::Generator, dec_init.weight},
        {"dec.init.bias", "linear", R::Generator, dec_init.bias},
        {"dec.out.weight", "linear", R::Generator, dec_out.weight},
        {"dec.out.bias", "linear", R::Generator, dec_out.bias},
    };
    if (!cfg_.enc_head_bias) std::erase_if(all, [](const ModelParam& p) { return p.name == "enc.head.bias"; });
    return all;
  }

  std::vector<Tensor> parameters(ParamRole role) const {
    std::vector<Tensor> out;
    for (const auto& p : parameters())
      if (p.role == role) out.push_back(p.tensor);
    return out;
  }

  void set_requires_grad(ParamRole role, bool on) const {
    for (auto& t : parameters(role)) t.set_requires_grad(on);
  }

  void initialize(const InitSpec& spec, std::uint64_t seed) const {
    std::vector<NamedParam> named;
    for (const auto& p : parameters()) named.push_back({p.name, p.group, p.tensor});
    init_params(named, spec, seed);
  }

  // Independent copy of every parameter value.
  VaeModel clone() const {
    VaeModel copy(cfg_);
    const auto src = parameters();
    const auto dst = copy.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      Tensor t = dst[i].tensor;
      std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), t.mutable_values().begin());
      t.set_requires_grad(src[i].tensor.requires_grad());
    }
    return copy;
  }

 private:
  static const VaeConfig& validated(const VaeConfig& cfg) {
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Inference network

struct GaussianParams {
  std::vector<double> mean;
  std::vector<double> logvar;

  std::size_t dim() const { return mean.size(); }
};

// Batched diagonal-Gaussian posterior; both tensors are [B×D].
struct Posterior {
  Tensor mean;
  Tensor logvar;

  GaussianParams row(std::size_t b) const {
    const std::size_t D = mean.cols();
    const auto m = mean.values().subspan(b * D, D);
    const auto l = logvar.values().subspan(b * D, D);
    return {{m.begin(), m.end()}, {l.begin(), l.end()}};
  }
};

inline void check_tokens(const VaeModel& model, const Batch& batch) {
  for (std::size_t i = 0; i < batch.tokens.size(); ++i)
    if (batch.tokens[i] < 0 || static_cast<std::size_t>(batch.tokens[i]) >= model.vocab())
      throw IndexError("token id " + std::to_string(batch.tokens[i]) + " outside vocabulary of size " +
                       std::to_string(model.vocab()));
}

inline Posterior encode(const VaeModel& model, const Batch& batch) {
  if (batch.size() == 0 || batch.max_len == 0) throw InputError("encode: empty input");
  check_tokens(model, batch);
  const std::size_t B = batch.size(), D = model.latent_dim();
  LstmState state = LstmState::zeros(B, model.enc_lstm.hidden());
  std::vector<int> ids(B);
  std::vector<char> active(B);
  for (std::size_t t = 0; t < batch.max_len; ++t) {
    bool all_active = true;
    for (std::size_t b = 0; b < B; ++b) {
      ids[b] = batch.token(b, t);
      active[b] = t < batch.lengths[b];
      all_active = all_active && active[b];
    }
    LstmState next = lstm_step(model.enc_lstm, model.enc_embed.lookup(ids), state);
    if (all_active) {
      state = std::move(next);
    } else {
      state = {select_rows(active, next.h, state.h), select_rows(active, next.c, state.c)};
    }
  }
  const Tensor head = model.enc_head(state.h);
  return {slice_cols(head, 0, D), slice_cols(head, D, D)};
}

inline GaussianParams encode(const VaeModel& model, const Sequence& x) {
  if (x.empty()) throw InputError("encode: empty sequence");
  NoGradScope no_grad;
  return encode(model, make_batch(x)).row(0);
}

// z = mean + exp(logvar / 2) * noise.
inline Tensor reparam_sample(const Tensor& mean, const Tensor& logvar, const Tensor& noise) {
  if (mean.shape() != logvar.shape() || mean.shape() != noise.shape())
    throw DimensionError("reparam_sample: shapes " + to_string(mean.shape()) + ", " + to_string(logvar.shape()) +
                         ", " + to_string(noise.shape()) + " differ");
  return mean + exp(scale(logvar, 0.5)) * noise;
}

inline std::vector<double> reparam_sample(const GaussianParams& q, std::span<const double> noise) {
  if (noise.size() != q.dim()) throw DimensionError("reparam_sample: noise dimension does not match posterior");
  std::vector<double> z(q.dim());
  for (std::size_t d = 0; d < z.size(); ++d) z[d] = q.mean[d] + std::exp(0.5 * q.logvar[d]) * noise[d];
  return z;
}

// Standard-normal noise of the given shape.
inline Tensor normal_noise(std::size_t rows, std::size_t cols, RandomStream& stream) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = stream.normal();
  return Tensor::matrix(rows, cols, std::move(v));
}

// KL(q || N(0, I)) per row: 0.5 * sum(mean^2 + exp(logvar) - 1 - logvar) -> [B].
inline Tensor kl_to_prior(const Tensor& mean, const Tensor& logvar) {
  const double D = static_cast<double>(mean.cols());
  return affine(row_sum(square(mean) + exp(logvar) - logvar), 0.5, -0.5 * D);
}

inline double kl_to_prior(const GaussianParams& q) {
  double kl = 0.0;
  for (std::size_t d = 0; d < q.dim(); ++d)
    kl += q.mean[d] * q.mean[d] + std::exp(q.logvar[d]) - 1.0 - q.logvar[d];
  return 0.5 * kl;
}

// log N(z; mean, diag(exp(logvar))).
inline double log_normal_diag(std::span<const double> z, std::span<const double> mean, std::span<const double> logvar) {
  double acc = 0.0;
  for (std::size_t d = 0; d < z.size(); ++d) {
    const double dev = z[d] - mean[d];
    acc += dev * dev * std::exp(-logvar[d]) + logvar[d] + kLog2Pi;
  }
  return -0.5 * acc;
}

inline double log_standard_normal(std::span<const double> z) {
  double acc = 0.0;
  for (double v : z) acc += v * v + kLog2Pi;
  return -0.5 * acc;
}

// ---------------------------------------------------------------------------
// Generator

// Dropout is active only when `dropout` is set; evaluation passes none.
struct DecodeMode {
  RandomStream* dropout = nullptr;
};

// log p(x|z) for every row of the batch -> [B]. z is [B×D].
inline Tensor decode_logprob(const VaeModel& model, const Batch& batch, const Tensor& z, DecodeMode mode = {}) {
  const std::size_t B = batch.size(), D = model.latent_dim();
  if (z.rank() != 2 || z.rows() != B || z.cols() != D)
    throw DimensionError("decode_logprob: latent " + to_string(z.shape()) + " does not match batch " +
                         std::to_string(B) + " and latent dimension " + std::to_string(D));
  check_tokens(model, batch);
  const auto& cfg = model.config();
  auto drop = [&mode](const Tensor& x, double rate) {
    return mode.dropout ? dropout(x, rate, true, *mode.dropout) : x;
  };

  LstmState state{model.dec_init(z), Tensor::zeros({B, model.dec_lstm.hidden()})};
  std::vector<int> inputs(B, model.bos());
  std::vector<int> targets(B);
  std::vector<double> weights(B);
  Tensor total;
  for (std::size_t t = 0; t <= batch.max_len; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t len = batch.lengths[b];
      targets[b] = t < len ? batch.token(b, t) : (t == len ? model.eos() : 0);
      weights[b] = t <= len ? 1.0 : 0.0;
    }
    const Tensor emb = drop(model.dec_embed.lookup(inputs), cfg.dropout_in);
    state = lstm_step(model.dec_lstm, concat_cols(emb, z), state);
    const Tensor hidden = drop(state.h, cfg.dropout_out);
    const Tensor step = log_softmax_pick(model.dec_out(hidden), targets, weights);
    total = total.defined() ? total + step : step;
    for (std::size_t b = 0; b < B; ++b) inputs[b] = t < batch.max_len ? batch.token(b, t) : 0;
  }
  return total;
}

inline double decode_logprob(const VaeModel& model, const Sequence& x, std::span<const double> z) {
  if (z.size() != model.latent_dim()) throw DimensionError("decode_logprob: latent dimension mismatch");
  NoGradScope no_grad;
  return decode_logprob(model, make_batch(x), Tensor::matrix(1, z.size(), {z.begin(), z.end()})).item();
}

// log p(x|z_k) for each row of z_rows ([K×D], row-major), evaluated in chunks.
inline std::vector<double> decode_logprob_many(const VaeModel& model, const Sequence& x,
                                               std::span<const double> z_rows, std::size_t chunk = 512) {
  const std::size_t D = model.latent_dim();
  if (z_rows.size() % D != 0) throw DimensionError("decode_logprob_many: latent rows not a multiple of D");
  const std::size_t K = z_rows.size() / D;
  NoGradScope no_grad;
  std::vector<double> out;
  out.reserve(K);
  for (std::size_t start = 0; start < K; start += chunk) {
    const std::size_t n = std::min(chunk, K - start);
    const std::vector<std::size_t> ids(n, 0);
    const Batch batch = make_batch(std::span<const Sequence>(&x, 1), ids);
    const auto zs = z_rows.subspan(start * D, n * D);
    const Tensor lp = decode_logprob(model, batch, Tensor::matrix(n, D, {zs.begin(), zs.end()}));
    out.insert(out.end(), lp.values().begin(), lp.values().end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// ELBO

struct ElboBreakdown {
  double reconstruction = 0.0;  // nats
  double kl = 0.0;              // nats
  double objective = 0.0;       // reconstruction - beta * kl
  double beta = 1.0;
};

// Batched single-sample ELBO with the tensors kept for differentiation.
struct ElboTerms {
  Posterior q;
  Tensor z;
  Tensor reconstruction;  // [B]
  Tensor kl;              // [B]
  Tensor loss;            // scalar: mean over the batch of beta * kl - reconstruction
  double beta = 1.0;

  ElboBreakdown mean() const {
    ElboBreakdown out;
    const double n = static_cast<double>(reconstruction.size());
    for (double v : reconstruction.values()) out.reconstruction += v / n;
    for (double v : kl.values()) out.kl += v / n;
    out.beta = beta;
    out.objective = out.reconstruction - beta * out.kl;
    return out;
  }
};

inline ElboTerms elbo_terms(const VaeModel& model, const Batch& batch, double beta, const Tensor& noise,
                            DecodeMode mode = {}) {
  ElboTerms terms;
  terms.beta = beta;
  terms.q = encode(model, batch);
  terms.z = reparam_sample(terms.q.mean, terms.q.logvar, noise);
  terms.reconstruction = decode_logprob(model, batch, terms.z, mode);
  terms.kl = kl_to_prior(terms.q.mean, terms.q.logvar);
  terms.loss = mean(affine(terms.kl, beta) - terms.reconstruction);
  return terms;
}

inline ElboTerms elbo_terms(const VaeModel& model, const Batch& batch, double beta, RandomStream& noise_stream,
                            DecodeMode mode = {}) {
  return elbo_terms(model, batch, beta, normal_noise(batch.size(), model.latent_dim(), noise_stream), mode);
}

inline ElboBreakdown elbo(const VaeModel& model, const Sequence& x, double beta, std::span<const double> noise) {
  if (noise.size() != model.latent_dim()) throw DimensionError("elbo: noise dimension mismatch");
  NoGradScope no_grad;
  const ElboTerms terms =
      elbo_terms(model, make_batch(x), beta, Tensor::matrix(1, noise.size(), {noise.begin(), noise.end()}));
  return terms.mean();
}

}  // namespace lagvae
