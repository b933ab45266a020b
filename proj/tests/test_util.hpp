#pragma once

#include <cmath>
#include <vector>

#include "lagvae/lagvae.hpp"

namespace lagvae::testing {

// Tiny model with parameters spread wide enough that gradients are not vanishing.
inline VaeModel tiny_model(std::size_t vocab = 5, std::size_t latent = 1, std::uint64_t seed = 7,
                           double spread = 0.5) {
  VaeConfig cfg;
  cfg.vocab = vocab;
  cfg.embed = 3;
  cfg.enc_hidden = 4;
  cfg.dec_hidden = 4;
  cfg.latent = latent;
  cfg.dropout_in = 0.0;
  cfg.dropout_out = 0.0;
  VaeModel model(cfg);
  model.initialize({{{"embedding", {-spread, spread}}, {"lstm", {-spread, spread}}, {"linear", {-spread, spread}}}},
                   seed);
  return model;
}

inline void zero(Tensor t) {
  for (double& v : t.mutable_values()) v = 0.0;
}

// Zeroes every weight through which z reaches the decoder.
inline void cut_z_pathway(const VaeModel& model) {
  zero(model.dec_init.weight);
  Tensor w = model.dec_lstm.w_ih;
  const std::size_t cols = w.cols(), D = model.latent_dim();
  auto v = w.mutable_values();
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = cols - D; c < cols; ++c) v[r * cols + c] = 0.0;
}

// Makes q(z|x) the standard normal for every x.
inline void prior_encoder(const VaeModel& model) {
  zero(model.enc_head.weight);
  zero(model.enc_head.bias);
}

inline std::vector<Tensor> all_tensors(const VaeModel& model) {
  std::vector<Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

inline Sequence random_sequence(std::size_t length, std::size_t vocab, RandomStream& rng) {
  Sequence s(length);
  for (int& t : s) t = static_cast<int>(rng.index(vocab));
  return s;
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
  MeanSe r;
  const double n = static_cast<double>(v.size());
  for (double x : v) r.mean += x / n;
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.se = std::sqrt(ss / (n - 1.0) / n);
  return r;
}

// Exact log p(x) and posterior moments by quadrature for a scalar-latent model.
struct GridMarginal {
  double log_px = 0.0;
  double posterior_mean = 0.0;
  std::vector<double> log_post;  // normalized log density at the grid points
};

inline GridMarginal grid_marginal(const VaeModel& model, const Sequence& x, const RiemannGrid& grid) {
  const auto post = grid_posterior([&](std::span<const double> z) { return decode_logprob_many(model, x, z); }, grid);
  GridMarginal out;
  out.log_px = post.log_evidence;
  out.posterior_mean = post.mean;
  out.log_post.resize(post.weights.size());
  for (std::size_t i = 0; i < post.weights.size(); ++i) out.log_post[i] = std::log(post.weights[i] / grid.stride);
  return out;
}

}  // namespace lagvae::testing
