#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "lagvae/errors.hpp"
#include "lagvae/random.hpp"
#include "lagvae/tensor.hpp"

namespace lagvae {

struct Embedding {
  Tensor weight;  // [V×E]

  Embedding() = default;
  Embedding(std::size_t vocab, std::size_t dim) : weight(Tensor::zeros({vocab, dim})) {}

  std::size_t vocab() const { return weight.rows(); }
  std::size_t dim() const { return weight.cols(); }
  Tensor lookup(std::span<const int> ids) const { return gather_rows(weight, ids); }
};

struct Linear {
  Tensor weight;  // [out×in]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : weight(Tensor::zeros({out, in})), bias(Tensor::zeros({out})) {}

  std::size_t in() const { return weight.cols(); }
  std::size_t out() const { return weight.rows(); }
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

// Single-layer LSTM. Gate blocks are stacked in the order input, forget, cell, output.
struct LstmParams {
  Tensor w_ih;  // [4H×E]
  Tensor w_hh;  // [4H×H]
  Tensor bias;  // [4H]

  LstmParams() = default;
  LstmParams(std::size_t input, std::size_t hidden)
      : w_ih(Tensor::zeros({4 * hidden, input})),
        w_hh(Tensor::zeros({4 * hidden, hidden})),
        bias(Tensor::zeros({4 * hidden})) {}

  std::size_t hidden() const { return w_hh.cols(); }
  std::size_t input() const { return w_ih.cols(); }
};

struct LstmState {
  Tensor h;  // [B×H]
  Tensor c;  // [B×H]

  static LstmState zeros(std::size_t batch, std::size_t hidden) {
    return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
  }
};

inline LstmState lstm_step(const LstmParams& p, const Tensor& input, const LstmState& state) {
  const std::size_t H = p.hidden();
  if (input.rank() != 2 || input.cols() != p.input())
    throw DimensionError("lstm_step: input " + to_string(input.shape()) + " does not match input size " +
                         std::to_string(p.input()));
  if (state.h.shape() != Shape{input.rows(), H} || state.c.shape() != state.h.shape())
    throw DimensionError("lstm_step: state " + to_string(state.h.shape()) + " does not match batch " +
                         std::to_string(input.rows()) + " and hidden " + std::to_string(H));
  const Tensor gates = linear(input, p.w_ih, p.bias) + linear(state.h, p.w_hh);
  const Tensor i = sigmoid(slice_cols(gates, 0, H));
  const Tensor f = sigmoid(slice_cols(gates, H, H));
  const Tensor g = tanh(slice_cols(gates, 2 * H, H));
  const Tensor o = sigmoid(slice_cols(gates, 3 * H, H));
  const Tensor c = f * state.c + i * g;
  return {o * tanh(c), c};
}

// Runs one sequence from `initial` and returns the hidden state after each step.
inline std::vector<Tensor> lstm_unroll(const LstmParams& p, std::span<const int> tokens, const Embedding& embedding,
                                       const LstmState& initial) {
  std::vector<Tensor> hidden;
  if (tokens.empty()) return hidden;
  LstmState state = initial;
  hidden.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    state = lstm_step(p, embedding.lookup(tokens.subspan(t, 1)), state);
    hidden.push_back(state.h);
  }
  return hidden;
}

// Inverted dropout: survivors are scaled by 1/(1 - rate) so the expectation is unchanged.
inline Tensor dropout(const Tensor& x, double rate, bool training, RandomStream& stream) {
  if (!(rate >= 0.0) || rate >= 1.0) throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = stream.uniform() >= rate ? keep_scale : 0.0;
  return x * Tensor(x.shape(), std::move(mask));
}

// ---------------------------------------------------------------------------
// Initialization

struct UniformRange {
  double low = 0.0;
  double high = 0.0;
};

// Uniform initialization range per parameter group.
struct InitSpec {
  std::map<std::string, UniformRange> groups;

  void validate() const {
    for (const auto& [name, range] : groups)
      if (!(range.low < range.high))
        throw ConfigError("InitSpec: group '" + name + "' needs low < high, got [" + std::to_string(range.low) +
                          ", " + std::to_string(range.high) + "]");
  }

  // LSTM and affine weights U(-0.01, 0.01), embeddings U(-0.1, 0.1).
  static InitSpec text_default() {
    return {{{"embedding", {-0.1, 0.1}}, {"lstm", {-0.01, 0.01}}, {"linear", {-0.01, 0.01}}}};
  }

  // Offset initialization: everything positive, so an all-positive encoder.
  static InitSpec offset() { return {{{"embedding", {0.0, 0.2}}, {"lstm", {0.04, 0.06}}, {"linear", {0.04, 0.06}}}}; }
};

struct NamedParam {
  std::string name;
  std::string group;  // InitSpec group
  Tensor tensor;
};

// Fills every parameter from its group's range. Parameters are visited in the
// given order with one stream, so the result is a pure function of the seed.
inline void init_params(std::span<NamedParam> params, const InitSpec& spec, std::uint64_t seed) {
  spec.validate();
  for (const auto& p : params)
    if (!spec.groups.contains(p.group))
      throw ConfigError("init_params: no range for group '" + p.group + "' (parameter " + p.name + ")");
  RandomStream stream = RandomStream::derive(seed, "init");
  for (auto& p : params) {
    const UniformRange range = spec.groups.at(p.group);
    Tensor t = p.tensor;
    for (double& v : t.mutable_values()) v = stream.uniform(range.low, range.high);
  }
}

}  // namespace lagvae
