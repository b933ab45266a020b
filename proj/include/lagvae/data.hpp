#pragma once

// Token-sequence datasets: the latent-conditioned LSTM synthetic generator,
// the plain-text split format, and padded minibatches.
//
// Split file format:
//   line 1:   <vocab_size> <example_count>
//   line 2..: one example per line, space-separated decimal token ids
// Every line, including the last, ends with '\n'.

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lagvae/errors.hpp"
#include "lagvae/nn.hpp"
#include "lagvae/random.hpp"
#include "lagvae/tensor.hpp"

namespace lagvae {

using Sequence = std::vector<int>;

// Generator-side provenance of one synthetic example.
struct LatentDraw {
  int component = 0;
  std::array<double, 2> z{};
};

struct Split {
  std::vector<Sequence> sequences;
  std::vector<LatentDraw> latents;  // empty unless generated

  std::size_t size() const { return sequences.size(); }
  bool empty() const { return sequences.empty(); }
};

struct Dataset {
  std::size_t vocab_size = 0;
  Split train;
  Split valid;
  Split test;

  const Split& split(std::string_view name) const {
    if (name == "train") return train;
    if (name == "valid" || name == "validation") return valid;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + std::string(name) + "' (expected train, valid or test)");
  }
};

struct SyntheticSpec {
  std::vector<std::array<double, 2>> means{{-2.0, -2.0}, {-2.0, 2.0}, {2.0, -2.0}, {2.0, 2.0}};
  double variance = 1.0;
  std::size_t hidden = 100;
  std::size_t embed = 100;
  UniformRange lstm_init{-1.0, 1.0};
  UniformRange latent_to_vocab_init{-5.0, 5.0};
  std::size_t n_train = 16000;
  std::size_t n_valid = 2000;
  std::size_t n_test = 2000;
  std::size_t length = 10;
  std::size_t vocab = 1000;
  std::uint64_t seed = 783435;

  static SyntheticSpec paper() { return {}; }

  // Reduced preset for quick runs and CI.
  static SyntheticSpec small() {
    SyntheticSpec spec;
    spec.n_train = 4000;
    spec.n_valid = 500;
    spec.n_test = 500;
    spec.vocab = 200;
    return spec;
  }

  void validate() const {
    if (means.empty()) throw ConfigError("SyntheticSpec: at least one mixture component is required");
    if (!(variance >= 0.0)) throw ConfigError("SyntheticSpec: variance must be non-negative");
    if (n_train == 0 || n_valid == 0 || n_test == 0) throw ConfigError("SyntheticSpec: split counts must be positive");
    if (vocab < 2) throw ConfigError("SyntheticSpec: vocabulary must have at least 2 tokens");
    if (length < 1) throw ConfigError("SyntheticSpec: length must be at least 1");
    if (hidden == 0 || embed == 0) throw ConfigError("SyntheticSpec: generator sizes must be positive");
    if (!(lstm_init.low < lstm_init.high) || !(latent_to_vocab_init.low < latent_to_vocab_init.high))
      throw ConfigError("SyntheticSpec: init ranges need low < high");
  }
};

namespace detail {

// Generator network: h0 = A z + a, tokens sampled from softmax(W [h_t; z] + b).
struct SyntheticGenerator {
  Embedding embed;  // row `vocab` is the begin-of-sequence input
  LstmParams lstm;
  Linear init;       // z -> h0
  Linear out;        // [h; z] -> vocab

  explicit SyntheticGenerator(const SyntheticSpec& spec)
      : embed(spec.vocab + 1, spec.embed),
        lstm(spec.embed, spec.hidden),
        init(2, spec.hidden),
        out(spec.hidden + 2, spec.vocab) {
    RandomStream stream = RandomStream::derive(spec.seed, "generator");
    auto fill = [&stream](Tensor t, UniformRange r) {
      for (double& v : t.mutable_values()) v = stream.uniform(r.low, r.high);
    };
    for (const Tensor& t : {embed.weight, lstm.w_ih, lstm.w_hh, lstm.bias, init.weight, init.bias, out.bias})
      fill(t, spec.lstm_init);
    Tensor w = out.weight;
    auto values = w.mutable_values();
    const std::size_t cols = out.in();
    for (std::size_t r = 0; r < out.out(); ++r)
      for (std::size_t c = 0; c < cols; ++c)
        values[r * cols + c] = c < spec.hidden ? stream.uniform(spec.lstm_init.low, spec.lstm_init.high)
                                               : stream.uniform(spec.latent_to_vocab_init.low,
                                                                spec.latent_to_vocab_init.high);
  }
};

inline std::size_t sample_categorical(std::span<const double> logits, RandomStream& stream) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) total += std::exp(l - peak);
  double u = stream.uniform() * total;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    u -= std::exp(logits[i] - peak);
    if (u < 0.0) return i;
  }
  return logits.size() - 1;
}

}  // namespace detail

// Samples the latent-conditioned LSTM dataset. Generator weights are drawn once
// from the spec seed; examples are generated in blocks, train first.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  NoGradScope no_grad;
  const detail::SyntheticGenerator gen(spec);
  RandomStream stream = RandomStream::derive(spec.seed, "sample");
  const std::size_t total = spec.n_train + spec.n_valid + spec.n_test;

  std::vector<LatentDraw> latents(total);
  const double sd = std::sqrt(spec.variance);
  for (auto& draw : latents) {
    draw.component = static_cast<int>(stream.index(spec.means.size()));
    const auto& mu = spec.means[static_cast<std::size_t>(draw.component)];
    draw.z = {mu[0] + sd * stream.normal(), mu[1] + sd * stream.normal()};
  }

  std::vector<Sequence> sequences(total);
  constexpr std::size_t block = 512;
  for (std::size_t start = 0; start < total; start += block) {
    const std::size_t n = std::min(block, total - start);
    std::vector<double> zv(n * 2);
    for (std::size_t i = 0; i < n; ++i) {
      zv[2 * i] = latents[start + i].z[0];
      zv[2 * i + 1] = latents[start + i].z[1];
    }
    const Tensor z = Tensor::matrix(n, 2, std::move(zv));
    LstmState state{gen.init(z), Tensor::zeros({n, spec.hidden})};
    std::vector<int> input(n, static_cast<int>(spec.vocab));
    for (std::size_t t = 0; t < spec.length; ++t) {
      state = lstm_step(gen.lstm, gen.embed.lookup(input), state);
      const Tensor logits = gen.out(concat_cols(state.h, z));
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = logits.values().subspan(i * spec.vocab, spec.vocab);
        input[i] = static_cast<int>(detail::sample_categorical(row, stream));
        sequences[start + i].push_back(input[i]);
      }
    }
  }

  Dataset ds;
  ds.vocab_size = spec.vocab;
  auto take = [&](Split& split, std::size_t begin, std::size_t count) {
    split.sequences.assign(sequences.begin() + static_cast<std::ptrdiff_t>(begin),
                           sequences.begin() + static_cast<std::ptrdiff_t>(begin + count));
    split.latents.assign(latents.begin() + static_cast<std::ptrdiff_t>(begin),
                         latents.begin() + static_cast<std::ptrdiff_t>(begin + count));
  };
  take(ds.train, 0, spec.n_train);
  take(ds.valid, spec.n_train, spec.n_valid);
  take(ds.test, spec.n_train + spec.n_valid, spec.n_test);
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_split(const Split& split, std::size_t vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << vocab << ' ' << split.size() << '\n';
  for (const auto& seq : split.sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

struct LoadedSplit {
  std::size_t vocab = 0;
  Split split;
};

inline LoadedSplit load_split(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  const std::string where = path.string();

  auto parse_uint = [&where](std::string_view field, std::size_t line_no) {
    std::size_t value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc() || ptr != field.data() + field.size())
      throw ParseError(where + ":" + std::to_string(line_no) + ": expected a non-negative integer, got '" +
                       std::string(field) + "'");
    return value;
  };
  auto split_fields = [](std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t pos = 0;
    while (pos < line.size()) {
      while (pos < line.size() && line[pos] == ' ') ++pos;
      if (pos == line.size()) break;
      const std::size_t end = std::min(line.find(' ', pos), line.size());
      fields.push_back(line.substr(pos, end - pos));
      pos = end;
    }
    return fields;
  };

  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find('\n', pos);
    if (end == std::string::npos)
      throw ParseError(where + ":" + std::to_string(lines.size() + 1) + ": truncated line (missing newline)");
    lines.emplace_back(text.data() + pos, end - pos);
    pos = end + 1;
  }
  if (lines.empty()) throw ParseError(where + ":1: missing header line");

  const auto header = split_fields(lines[0]);
  if (header.size() != 2) throw ParseError(where + ":1: header must be '<vocab_size> <example_count>'");
  LoadedSplit result;
  result.vocab = parse_uint(header[0], 1);
  const std::size_t count = parse_uint(header[1], 1);
  if (result.vocab == 0) throw ValidationError(where + ":1: vocabulary size must be positive");
  if (lines.size() - 1 != count)
    throw ParseError(where + ": header announces " + std::to_string(count) + " examples, found " +
                     std::to_string(lines.size() - 1) + " (truncated or padded file)");

  result.split.sequences.reserve(count);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto fields = split_fields(lines[i]);
    if (fields.empty()) throw ParseError(where + ":" + std::to_string(i + 1) + ": empty example (record " +
                                         std::to_string(i - 1) + ")");
    Sequence seq;
    seq.reserve(fields.size());
    for (auto field : fields) {
      const std::size_t id = parse_uint(field, i + 1);
      if (id >= result.vocab)
        throw ValidationError(where + ": record " + std::to_string(i - 1) + " (line " + std::to_string(i + 1) +
                              ") has token id " + std::to_string(id) + " >= vocabulary size " +
                              std::to_string(result.vocab));
      seq.push_back(static_cast<int>(id));
    }
    result.split.sequences.push_back(std::move(seq));
  }
  return result;
}

inline const char* split_file_name(std::string_view split) {
  if (split == "train") return "train.txt";
  if (split == "valid") return "valid.txt";
  return "test.txt";
}

// Writes train.txt, valid.txt and test.txt into `dir`, creating it if needed.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_split(ds.train, ds.vocab_size, dir / "train.txt");
  save_split(ds.valid, ds.vocab_size, dir / "valid.txt");
  save_split(ds.test, ds.vocab_size, dir / "test.txt");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  auto train = load_split(dir / "train.txt");
  auto valid = load_split(dir / "valid.txt");
  auto test = load_split(dir / "test.txt");
  if (train.vocab != valid.vocab || train.vocab != test.vocab)
    throw ValidationError("dataset " + dir.string() + ": splits disagree on vocabulary size");
  ds.vocab_size = train.vocab;
  ds.train = std::move(train.split);
  ds.valid = std::move(valid.split);
  ds.test = std::move(test.split);
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

// Right-padded token matrix. mask[b, t] is 1 for real tokens and 0 for padding.
struct Batch {
  std::vector<std::size_t> ids;  // example indices within the split
  std::size_t max_len = 0;
  std::vector<int> tokens;       // [B×max_len], padding is 0
  std::vector<std::size_t> lengths;
  std::vector<double> mask;      // [B×max_len]

  std::size_t size() const { return ids.size(); }
  int token(std::size_t b, std::size_t t) const { return tokens[b * max_len + t]; }
};

inline Batch make_batch(std::span<const Sequence> sequences, std::span<const std::size_t> ids) {
  Batch batch;
  batch.ids.assign(ids.begin(), ids.end());
  for (std::size_t id : ids) {
    if (id >= sequences.size()) throw IndexError("make_batch: example " + std::to_string(id) + " out of range");
    if (sequences[id].empty()) throw InputError("make_batch: example " + std::to_string(id) + " is empty");
    batch.max_len = std::max(batch.max_len, sequences[id].size());
  }
  const std::size_t B = ids.size();
  batch.tokens.assign(B * batch.max_len, 0);
  batch.mask.assign(B * batch.max_len, 0.0);
  batch.lengths.resize(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& seq = sequences[ids[b]];
    batch.lengths[b] = seq.size();
    for (std::size_t t = 0; t < seq.size(); ++t) {
      batch.tokens[b * batch.max_len + t] = seq[t];
      batch.mask[b * batch.max_len + t] = 1.0;
    }
  }
  return batch;
}

inline Batch make_batch(const Sequence& sequence) {
  const std::size_t id = 0;
  return make_batch(std::span<const Sequence>(&sequence, 1), std::span<const std::size_t>(&id, 1));
}

// Example indices grouped into batches; the last batch may be short. With a
// stream the order is a Fisher-Yates shuffle drawn from it.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                           RandomStream* shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle)
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle->index(i)]);
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t start = 0; start < n; start += batch_size)
    groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                        order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch_size)));
  return groups;
}

inline std::vector<Batch> batches(const Split& split, std::size_t batch_size,
                                  std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  std::optional<RandomStream> stream;
  if (shuffle_seed) stream.emplace(*shuffle_seed);
  std::vector<Batch> out;
  for (const auto& group : batch_indices(split.size(), batch_size, stream ? &*stream : nullptr))
    out.push_back(make_batch(split.sequences, group));
  return out;
}

}  // namespace lagvae
