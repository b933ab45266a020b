#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"

using namespace lagvae;
using lagvae::testing::mean_se;
using lagvae::testing::random_sequence;
using lagvae::testing::tiny_model;
using lagvae::testing::zero;
using lagvae::testing::cut_z_pathway;

namespace {

// Per-step log-probabilities by explicit normalization of the decoder logits.
double explicit_logprob(const VaeModel& model, const Sequence& x, std::span<const double> z) {
  NoGradScope off;
  const Tensor zt = Tensor::matrix(1, z.size(), {z.begin(), z.end()});
  LstmState state{model.dec_init(zt), Tensor::zeros({1, model.dec_lstm.hidden()})};
  int input = model.bos();
  double total = 0.0;
  for (std::size_t t = 0; t <= x.size(); ++t) {
    const std::vector<int> ids{input};
    state = lstm_step(model.dec_lstm, concat_cols(model.dec_embed.lookup(ids), zt), state);
    const Tensor logits = model.dec_out(state.h);
    const int target = t < x.size() ? x[t] : model.eos();
    double norm = 0.0;
    for (double l : logits.values()) norm += std::exp(l);
    total += std::log(std::exp(logits[static_cast<std::size_t>(target)]) / norm);
    if (t < x.size()) input = x[t];
  }
  return total;
}

}  // namespace

TEST(Model, ParameterPartitionIsDisjoint) {
  const VaeModel model = tiny_model();
  std::size_t inference = 0, generator = 0;
  for (const auto& p : model.parameters()) {
    (p.role == ParamRole::Inference ? inference : generator) += 1;
    EXPECT_EQ(p.name.rfind(p.role == ParamRole::Inference ? "enc." : "dec.", 0), 0u) << p.name;
  }
  EXPECT_GT(inference, 0u);
  EXPECT_GT(generator, 0u);
  const auto enc = model.parameters(ParamRole::Inference);
  for (const auto& d : model.parameters(ParamRole::Generator))
    for (const auto& e : enc) EXPECT_NE(d.id(), e.id());
}

TEST(Encode, ZeroHeadGivesStandardNormal) {
  const VaeModel model = tiny_model(5, 2);
  zero(model.enc_head.weight);
  zero(model.enc_head.bias);
  RandomStream rng(1);
  for (int i = 0; i < 5; ++i) {
    const auto q = encode(model, random_sequence(1 + i, 5, rng));
    for (std::size_t d = 0; d < 2; ++d) {
      EXPECT_EQ(q.mean[d], 0.0);
      EXPECT_EQ(q.logvar[d], 0.0);
    }
  }
}

TEST(Encode, OffsetInitGivesNonNegativeMeans) {
  VaeConfig cfg;
  cfg.vocab = 20;
  VaeModel model(cfg);
  model.initialize(InitSpec::offset(), 3);
  RandomStream rng(2);
  for (int i = 0; i < 20; ++i) EXPECT_GE(encode(model, random_sequence(10, 20, rng)).mean[0], 0.0);
}

TEST(Encode, DistinctInputsDistinctMeans) {
  const VaeModel model = tiny_model();
  const auto a = encode(model, Sequence{0, 1, 2});
  const auto b = encode(model, Sequence{4, 3, 2});
  EXPECT_NE(a.mean[0], b.mean[0]);
}

TEST(Encode, Errors) {
  const VaeModel model = tiny_model();
  EXPECT_THROW(encode(model, Sequence{}), InputError);
  EXPECT_THROW(encode(model, Sequence{1, 5}), IndexError);
}

TEST(Encode, HeadBiasIsOptIn) {
  VaeConfig cfg;
  cfg.vocab = 5;
  const VaeModel linear_head(cfg);
  cfg.enc_head_bias = true;
  const VaeModel affine_head(cfg);
  auto has_bias = [](const VaeModel& m) {
    for (const auto& p : m.parameters())
      if (p.name == "enc.head.bias") return true;
    return false;
  };
  EXPECT_FALSE(has_bias(linear_head));
  EXPECT_TRUE(has_bias(affine_head));
  EXPECT_EQ(affine_head.parameters().size(), linear_head.parameters().size() + 1);
}

TEST(Reparam, DeterministicCases) {
  const GaussianParams q{{0.5, -1.0}, {0.3, 0.0}};
  const auto z0 = reparam_sample(q, std::vector<double>{0.0, 0.0});
  EXPECT_EQ(z0[0], 0.5);
  EXPECT_EQ(z0[1], -1.0);
  const auto z1 = reparam_sample(q, std::vector<double>{0.0, 1.0});
  EXPECT_EQ(z1[1], 0.0);
  EXPECT_THROW(reparam_sample(q, std::vector<double>{1.0}), DimensionError);
}

TEST(Reparam, MonteCarloMean) {
  const GaussianParams q{{0.7, -2.0}, {0.5, -1.0}};
  RandomStream rng(3);
  std::vector<std::vector<double>> draws(2);
  for (int i = 0; i < 100000; ++i) {
    const std::vector<double> eps{rng.normal(), rng.normal()};
    const auto z = reparam_sample(q, eps);
    draws[0].push_back(z[0]);
    draws[1].push_back(z[1]);
  }
  for (std::size_t d = 0; d < 2; ++d) {
    const auto m = mean_se(draws[d]);
    EXPECT_LT(std::abs(m.mean - q.mean[d]), 3.0 * m.se);
  }
}

TEST(Kl, ClosedFormCases) {
  EXPECT_EQ(kl_to_prior(GaussianParams{{0.0}, {0.0}}), 0.0);
  EXPECT_NEAR(kl_to_prior(GaussianParams{{1.0}, {0.0}}), 0.5, 1e-12);
  // Tensor and scalar forms agree.
  const Tensor kl = kl_to_prior(Tensor::matrix(1, 2, {0.4, -1.1}), Tensor::matrix(1, 2, {0.2, -0.6}));
  EXPECT_NEAR(kl.item(), kl_to_prior(GaussianParams{{0.4, -1.1}, {0.2, -0.6}}), 1e-14);
}

TEST(Kl, NonNegativeAndZeroOnlyAtPrior) {
  for (double m = -2.0; m <= 2.0; m += 0.25)
    for (double lv = -2.0; lv <= 2.0; lv += 0.25) {
      const double kl = kl_to_prior(GaussianParams{{m}, {lv}});
      EXPECT_GE(kl, 0.0);
      const bool at_prior = std::abs(m) < 1e-12 && std::abs(lv) < 1e-12;
      if (at_prior)
        EXPECT_EQ(kl, 0.0);
      else
        EXPECT_GT(kl, 0.0);
    }
}

TEST(Kl, MatchesMonteCarloOnRandomPosteriors) {
  RandomStream rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t D = 1 + rng.index(3);
    GaussianParams q;
    for (std::size_t d = 0; d < D; ++d) {
      q.mean.push_back(rng.uniform(-2.0, 2.0));
      q.logvar.push_back(rng.uniform(-2.0, 1.0));
    }
    // 10^5 draws as antithetic pairs; the standard error is over pair means.
    auto log_ratio = [&](std::span<const double> eps) {
      const auto z = reparam_sample(q, eps);
      return log_normal_diag(z, q.mean, q.logvar) - log_standard_normal(z);
    };
    std::vector<double> est(50000);
    std::vector<double> eps(D), flipped(D);
    for (double& e : est) {
      for (std::size_t d = 0; d < D; ++d) flipped[d] = -(eps[d] = rng.normal());
      e = 0.5 * (log_ratio(eps) + log_ratio(flipped));
    }
    const auto m = mean_se(est);
    EXPECT_LT(std::abs(m.mean - kl_to_prior(q)), 3.0 * m.se) << "trial " << trial;
  }
}

TEST(Decode, UniformLogits) {
  const VaeModel model = tiny_model(7);
  zero(model.dec_out.weight);
  zero(model.dec_out.bias);
  const Sequence x{1, 2, 3, 4};
  const double z[1] = {0.3};
  // T tokens plus the end token, each over V + 1 outcomes.
  EXPECT_NEAR(decode_logprob(model, x, z), -5.0 * std::log(8.0), 1e-12);
}

TEST(Decode, BlockedLatentPathway) {
  const VaeModel model = tiny_model(7);
  cut_z_pathway(model);
  const Sequence x{6, 0, 3};
  const double a[1] = {-2.0}, b[1] = {3.5};
  EXPECT_EQ(decode_logprob(model, x, a), decode_logprob(model, x, b));
}

TEST(Decode, MatchesExplicitSoftmax) {
  RandomStream rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const VaeModel model = tiny_model(6, 2, 100 + trial, 1.0);
    const Sequence x = random_sequence(1 + rng.index(6), 6, rng);
    const std::vector<double> z{rng.normal(), rng.normal()};
    const double got = decode_logprob(model, x, z);
    EXPECT_NEAR(got, explicit_logprob(model, x, z), 1e-10);
    EXPECT_LE(got, 0.0);
  }
}

TEST(Decode, StepProbabilitiesSumToOne) {
  const VaeModel model = tiny_model(6, 1, 9, 1.0);
  // The first-step distribution over every outcome, including the end token.
  const Tensor zt = Tensor::matrix(1, 1, {0.8});
  const std::vector<int> bos{model.bos()};
  const LstmState s = lstm_step(model.dec_lstm, concat_cols(model.dec_embed.lookup(bos), zt),
                                {model.dec_init(zt), Tensor::zeros({1, model.dec_lstm.hidden()})});
  const Tensor logits = model.dec_out(s.h);
  double total = 0.0;
  for (int c = 0; c <= 6; ++c) {
    const std::vector<int> t{c};
    const std::vector<double> w{1.0};
    total += std::exp(log_softmax_pick(logits, t, w).item());
  }
  EXPECT_NEAR(total, 1.0, 1e-10);
}

TEST(Decode, Errors) {
  const VaeModel model = tiny_model();
  const double z[1] = {0.0};
  EXPECT_THROW(decode_logprob(model, Sequence{7}, z), IndexError);
  const double z2[2] = {0.0, 1.0};
  EXPECT_THROW(decode_logprob(model, Sequence{1}, z2), DimensionError);
}

TEST(Elbo, BetaRecomposition) {
  const VaeModel model = tiny_model();
  const Sequence x{0, 4, 2};
  const double eps[1] = {0.37};
  const auto full = elbo(model, x, 1.0, eps);
  const auto weak = elbo(model, x, 0.2, eps);
  EXPECT_EQ(weak.reconstruction, full.reconstruction);
  EXPECT_EQ(weak.kl, full.kl);
  EXPECT_NEAR(weak.objective, weak.reconstruction - 0.2 * weak.kl, 1e-14);
  EXPECT_EQ(weak.beta, 0.2);
  EXPECT_GE(full.kl, 0.0);
}

TEST(Elbo, PriorPosteriorAndBlindDecoderIsExact) {
  const VaeModel model = tiny_model();
  zero(model.enc_head.weight);
  cut_z_pathway(model);
  const Sequence x{3, 1};
  const double eps[1] = {1.3};
  const auto e = elbo(model, x, 1.0, eps);
  EXPECT_EQ(e.kl, 0.0);
  const auto grid = lagvae::testing::grid_marginal(model, x, RiemannGrid::make(-10.0, 10.0, 0.01));
  EXPECT_NEAR(e.objective, grid.log_px, 1e-9);
}

TEST(Elbo, GapEqualsPosteriorDivergence) {
  // log p(x) - E_q[ELBO] = KL(q || p(z|x)), all computed by quadrature except the ELBO.
  const RiemannGrid grid = RiemannGrid::make(-10.0, 10.0, 0.01);
  RandomStream rng(6);
  for (int trial = 0; trial < 4; ++trial) {
    const VaeModel model = tiny_model(8, 1, 40 + trial, 1.0);
    const Sequence x = random_sequence(1 + rng.index(5), 8, rng);
    const auto exact = lagvae::testing::grid_marginal(model, x, grid);
    const auto q = encode(model, x);
    double kl_post = 0.0;
    for (std::size_t i = 0; i < grid.abscissae.size(); ++i) {
      const double z = grid.abscissae[i];
      const double lq = log_normal_diag(std::span<const double>(&z, 1), q.mean, q.logvar);
      kl_post += grid.stride * std::exp(lq) * (lq - exact.log_post[i]);
    }
    std::vector<double> samples(20000);
    for (double& s : samples) {
      const double eps = rng.normal();
      s = elbo(model, x, 1.0, std::span<const double>(&eps, 1)).objective;
    }
    const auto m = mean_se(samples);
    EXPECT_LT(std::abs(exact.log_px - m.mean - kl_post), 3.0 * m.se) << "trial " << trial;
  }
}

TEST(Elbo, PaddedBatchMatchesPerExample) {
  const VaeModel model = tiny_model(6, 2, 11, 1.0);
  RandomStream rng(7);
  std::vector<Sequence> seqs;
  for (std::size_t len : {3u, 1u, 6u, 4u}) seqs.push_back(random_sequence(len, 6, rng));
  const std::vector<std::size_t> ids{0, 1, 2, 3};
  const Batch batch = make_batch(seqs, ids);
  const Tensor noise = normal_noise(4, 2, rng);
  NoGradScope off;
  const ElboTerms terms = elbo_terms(model, batch, 1.0, noise);
  for (std::size_t b = 0; b < 4; ++b) {
    const std::vector<double> eps{noise.at(b, 0), noise.at(b, 1)};
    const auto single = elbo(model, seqs[b], 1.0, eps);
    EXPECT_NEAR(terms.reconstruction[b], single.reconstruction, 1e-10);
    EXPECT_NEAR(terms.kl[b], single.kl, 1e-10);
  }
}

TEST(Elbo, FullGradientCheck) {
  const VaeModel model = tiny_model(7, 1, 13, 0.5);
  RandomStream rng(8);
  std::vector<Sequence> seqs;
  for (std::size_t len : {4u, 2u, 5u}) seqs.push_back(random_sequence(len, 7, rng));
  const std::vector<std::size_t> ids{0, 1, 2};
  const Batch batch = make_batch(seqs, ids);
  const Tensor noise = normal_noise(3, 1, rng);
  auto params = lagvae::testing::all_tensors(model);
  auto f = [&] { return elbo_terms(model, batch, 1.0, noise).loss; };
  EXPECT_LT(grad_check(f, params, 1e-5), 1e-4);
  // A small floor exposes relative errors on small gradients too.
  EXPECT_LT(grad_check(f, params, 1e-5, 1e-3), 1e-4);
}
