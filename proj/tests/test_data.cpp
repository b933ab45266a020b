#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "test_util.hpp"

using namespace lagvae;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lagvae_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

SyntheticSpec tiny_spec() {
  SyntheticSpec spec = SyntheticSpec::small();
  spec.n_train = 300;
  spec.n_valid = 40;
  spec.n_test = 30;
  spec.vocab = 50;
  spec.hidden = 16;
  spec.embed = 8;
  return spec;
}

// Upper quantile of chi-square with `df` degrees of freedom (Wilson-Hilferty),
// for a standard-normal quantile `zq`.
double chi_square_quantile(double df, double zq) {
  const double a = 2.0 / (9.0 * df);
  return df * std::pow(1.0 - a + zq * std::sqrt(a), 3.0);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

}  // namespace

TEST(Synthetic, PresetCounts) {
  const SyntheticSpec paper = SyntheticSpec::paper();
  EXPECT_EQ(paper.n_train, 16000u);
  EXPECT_EQ(paper.n_valid, 2000u);
  EXPECT_EQ(paper.n_test, 2000u);
  EXPECT_EQ(paper.vocab, 1000u);
  EXPECT_EQ(paper.length, 10u);
  EXPECT_EQ(paper.hidden, 100u);
  EXPECT_EQ(paper.embed, 100u);
  EXPECT_EQ(paper.means.size(), 4u);
  EXPECT_EQ(paper.variance, 1.0);

  const Dataset ds = generate_synthetic(SyntheticSpec::small());
  EXPECT_EQ(ds.train.size(), 4000u);
  EXPECT_EQ(ds.valid.size(), 500u);
  EXPECT_EQ(ds.test.size(), 500u);
  for (const Split* s : {&ds.train, &ds.valid, &ds.test})
    for (const auto& seq : s->sequences) {
      ASSERT_EQ(seq.size(), 10u);
      for (int t : seq) ASSERT_TRUE(t >= 0 && t < 200);
    }
}

TEST(Synthetic, PaperPresetShape) {
  const Dataset ds = generate_synthetic(SyntheticSpec::paper());
  EXPECT_EQ(ds.train.size(), 16000u);
  EXPECT_EQ(ds.valid.size(), 2000u);
  EXPECT_EQ(ds.test.size(), 2000u);
  EXPECT_EQ(ds.vocab_size, 1000u);
  for (const auto& seq : ds.test.sequences) {
    ASSERT_EQ(seq.size(), 10u);
    for (int t : seq) ASSERT_TRUE(t >= 0 && t < 1000);
  }
}

TEST(Synthetic, BitwiseReproducible) {
  const Dataset a = generate_synthetic(tiny_spec());
  const Dataset b = generate_synthetic(tiny_spec());
  EXPECT_EQ(a.train.sequences, b.train.sequences);
  EXPECT_EQ(a.test.sequences, b.test.sequences);
  SyntheticSpec other = tiny_spec();
  other.seed += 1;
  EXPECT_NE(generate_synthetic(other).train.sequences, a.train.sequences);
}

TEST(Synthetic, DegenerateMixtureHasOneConditional) {
  SyntheticSpec spec = tiny_spec();
  spec.means = {{0.0, 0.0}};
  spec.variance = 0.0;
  const Dataset a = generate_synthetic(spec), b = generate_synthetic(spec);
  std::map<int, int> ua, ub;
  for (const auto& s : a.train.sequences)
    for (int t : s) ++ua[t];
  for (const auto& s : b.train.sequences)
    for (int t : s) ++ub[t];
  EXPECT_EQ(ua, ub);
  for (const auto& d : a.train.latents) {
    EXPECT_EQ(d.z[0], 0.0);
    EXPECT_EQ(d.z[1], 0.0);
  }
}

TEST(Synthetic, ComponentFrequenciesUniform) {
  const Dataset ds = generate_synthetic(SyntheticSpec::small());
  std::vector<double> counts(4, 0.0);
  double n = 0.0;
  for (const Split* s : {&ds.train, &ds.valid, &ds.test})
    for (const auto& d : s->latents) {
      counts[static_cast<std::size_t>(d.component)] += 1.0;
      n += 1.0;
    }
  const double se = std::sqrt(0.25 * 0.75 / n);
  for (double c : counts) EXPECT_LT(std::abs(c / n - 0.25), 3.0 * se);
}

TEST(Synthetic, UnigramsDependOnComponent) {
  // Chi-square test of homogeneity on the component x token contingency table.
  const Dataset ds = generate_synthetic(SyntheticSpec::small());
  const std::size_t V = ds.vocab_size;
  std::vector<std::vector<double>> table(4, std::vector<double>(V, 0.0));
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    for (int t : ds.train.sequences[i])
      table[static_cast<std::size_t>(ds.train.latents[i].component)][static_cast<std::size_t>(t)] += 1.0;
  std::vector<double> rows(4, 0.0), cols(V, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < V; ++c) {
      rows[r] += table[r][c];
      cols[c] += table[r][c];
      total += table[r][c];
    }
  double stat = 0.0;
  std::size_t used_cols = 0;
  for (std::size_t c = 0; c < V; ++c) {
    if (cols[c] == 0.0) continue;
    ++used_cols;
    for (std::size_t r = 0; r < 4; ++r) {
      const double expected = rows[r] * cols[c] / total;
      stat += (table[r][c] - expected) * (table[r][c] - expected) / expected;
    }
  }
  const double df = 3.0 * static_cast<double>(used_cols - 1);
  EXPECT_GT(stat, chi_square_quantile(df, 3.09));  // p < 0.001
}

TEST(Persistence, RoundTrip) {
  const fs::path dir = scratch_dir("roundtrip");
  const Dataset ds = generate_synthetic(tiny_spec());
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.vocab_size, ds.vocab_size);
  EXPECT_EQ(back.train.sequences, ds.train.sequences);
  EXPECT_EQ(back.valid.sequences, ds.valid.sequences);
  EXPECT_EQ(back.test.sequences, ds.test.sequences);
  fs::remove_all(dir);
}

TEST(Persistence, TruncatedFileIsParseError) {
  const fs::path dir = scratch_dir("truncated");
  save_dataset(generate_synthetic(tiny_spec()), dir);
  const auto size = fs::file_size(dir / "valid.txt");
  fs::resize_file(dir / "valid.txt", size / 2);
  EXPECT_THROW(load_dataset(dir), ParseError);
  write_text(dir / "valid.txt", "50 2\n1 2 3\n");
  EXPECT_THROW(load_dataset(dir), ParseError);
  write_text(dir / "valid.txt", "");
  EXPECT_THROW(load_dataset(dir), ParseError);
  fs::remove_all(dir);
}

TEST(Persistence, OutOfVocabularyNamesRecord) {
  const fs::path dir = scratch_dir("oov");
  save_dataset(generate_synthetic(tiny_spec()), dir);
  write_text(dir / "test.txt", "50 3\n1 2\n3 4\n5 50 6\n");
  try {
    load_dataset(dir);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("record 2"), std::string::npos) << msg;
  }
  fs::remove_all(dir);
}

TEST(Persistence, MissingFileIsIoError) {
  const fs::path dir = scratch_dir("missing");
  EXPECT_THROW(load_dataset(dir), IoError);
  fs::remove_all(dir);
}

TEST(Batches, SizesAndCoverage) {
  Split split;
  for (int i = 0; i < 10; ++i) split.sequences.push_back(Sequence{i % 5, 1, 2});
  const auto groups = batch_indices(10, 3, nullptr);
  ASSERT_EQ(groups.size(), 4u);
  EXPECT_EQ(groups[0].size(), 3u);
  EXPECT_EQ(groups[1].size(), 3u);
  EXPECT_EQ(groups[2].size(), 3u);
  EXPECT_EQ(groups[3].size(), 1u);

  RandomStream rng(3);
  const auto shuffled = batch_indices(10, 3, &rng);
  std::vector<int> seen(10, 0);
  for (const auto& g : shuffled)
    for (std::size_t id : g) ++seen[id];
  for (int s : seen) EXPECT_EQ(s, 1);

  const auto a = batches(split, 3, 17), b = batches(split, 3, 17);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].ids, b[i].ids);
  EXPECT_THROW(batch_indices(10, 0, nullptr), ConfigError);
  EXPECT_TRUE(batches(Split{}, 3).empty());
}

TEST(Batches, EqualLengthsGiveFullMasks) {
  Split split;
  for (int i = 0; i < 7; ++i) split.sequences.push_back(Sequence{1, 2, 3, 4});
  for (const auto& b : batches(split, 3))
    for (double m : b.mask) EXPECT_EQ(m, 1.0);
}

TEST(Batches, PaddingIsMasked) {
  const std::vector<Sequence> seqs{{1, 2, 3}, {4}};
  const std::vector<std::size_t> ids{0, 1};
  const Batch b = make_batch(seqs, ids);
  EXPECT_EQ(b.max_len, 3u);
  const std::vector<double> mask{1, 1, 1, 1, 0, 0};
  EXPECT_EQ(b.mask, mask);
  EXPECT_EQ(b.lengths, (std::vector<std::size_t>{3, 1}));
}

TEST(Batches, PaddedLossEqualsSumOfExampleLosses) {
  const VaeModel model = lagvae::testing::tiny_model(6, 1, 21, 1.0);
  std::vector<Sequence> seqs{{0, 1, 2, 3, 4}, {5}, {2, 2, 2}};
  const std::vector<std::size_t> ids{0, 1, 2};
  const Tensor z = Tensor::matrix(3, 1, {0.4, -1.2, 2.0});
  NoGradScope off;
  const Tensor batched = decode_logprob(model, make_batch(seqs, ids), z);
  double total = 0.0, reference = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    total += batched[b];
    const double zb[1] = {z[b]};
    reference += decode_logprob(model, seqs[b], zb);
  }
  EXPECT_NEAR(total, reference, 1e-10);
}
