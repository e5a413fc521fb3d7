#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_support.hpp"

using namespace mcr;
using namespace mcr::testutil;

namespace {

SynthWorldConfig small(double gap, double sigma, std::uint64_t seed = 0) {
  SynthWorldConfig c;
  c.n_items = 300;
  c.modality_gap_magnitude = gap;
  c.observation_noise_sigma = sigma;
  c.seed = seed;
  return c;
}

std::vector<double> paired_cosines(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  std::vector<double> out;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.dim(); ++k) s += static_cast<double>(a.row(i)[k]) * b.row(i)[k];
    out.push_back(s);
  }
  return out;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

TEST(Synth, ZeroGapZeroNoiseGivesIdenticalModalities) {
  auto c = small(0.0, 0.0);
  c.spaces = {{"only", {"a", "b"}}};
  const auto w = generate_world(c);
  EXPECT_TRUE(w.at("only", "a") == w.at("only", "b"));
}

TEST(Synth, NoiselessPairCosineIsConstant) {
  for (double gap : {0.1, 0.5, 2.0}) {
    const auto w = generate_world(small(gap, 0.0));
    const auto cos = paired_cosines(w.at("base", "x"), w.at("base", "y"));
    const auto [lo, hi] = std::minmax_element(cos.begin(), cos.end());
    EXPECT_LT(*hi - *lo, 1e-6) << gap;
  }
}

TEST(Synth, LargerGapLowersMeanPairCosine) {
  double previous = 2.0;
  for (double gap : {0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0}) {
    const auto w = generate_world(small(gap, 0.02));
    const double m = mean_of(paired_cosines(w.at("leaf1", "x"), w.at("leaf1", "z")));
    EXPECT_LT(m, previous) << gap;
    previous = m;
  }
}

TEST(Synth, NoiselessPairCosineMatchesOffsetGeometry) {
  // Unit signal plus two orthogonal-to-frame offsets of norm g at angle theta:
  // cos = (1 + g^2 cos theta) / (1 + g^2).
  const double g = 0.5;
  const auto w = generate_world(small(g, 0.0));
  const Vector& a = w.offsets.at({"base", "x"});
  const Vector& b = w.offsets.at({"base", "y"});
  const double expected = (1.0 + a.dot(b)) / (1.0 + g * g);
  EXPECT_NEAR(paired_cosines(w.at("base", "x"), w.at("base", "y"))[0], expected, 1e-6);
}

TEST(Synth, FramesOrthonormalAndOffsetsOrthogonalWithConfiguredNorm) {
  const auto w = generate_world(small(0.7, 0.02));
  for (const auto& [space, q] : w.frames) {
    EXPECT_LT((q.transpose() * q - Matrix::Identity(16, 16)).cwiseAbs().maxCoeff(), 1e-12) << space;
  }
  for (const auto& [key, off] : w.offsets) {
    EXPECT_NEAR(off.norm(), 0.7, 1e-12);
    EXPECT_LT((w.frames.at(key.first).transpose() * off).cwiseAbs().maxCoeff(), 1e-12);
  }
  for (Eigen::Index i = 0; i < w.latents.rows(); ++i) EXPECT_NEAR(w.latents.row(i).norm(), 1.0, 1e-12);
}

TEST(Synth, EveryModalityDerivesFromTheSharedLatents) {
  const auto w = generate_world(small(0.5, 0.0));
  for (const auto& [key, m] : w.embeddings) {
    Matrix back = m.to_matrix() * w.frames.at(key.first);
    normalize_rows_inplace(back);
    EXPECT_LT((back - w.latents).cwiseAbs().maxCoeff(), 1e-5) << key.first << "." << key.second;
  }
}

TEST(Synth, DefaultWorldOracleRecallWithinEachSpace) {
  const auto w = make_fourmodality_scenario(SynthWorldConfig{});
  EXPECT_GE(oracle_retrieval(w, {"base", "x"}, {"base", "y"}).r_at.at(1), 0.99);
  EXPECT_GE(oracle_retrieval(w, {"leaf1", "x"}, {"leaf1", "z"}).r_at.at(1), 0.99);
  EXPECT_GE(oracle_retrieval(w, {"leaf2", "y"}, {"leaf2", "w"}).r_at.at(1), 0.99);
}

TEST(Synth, NoiselessOracleIsPerfectWithinAndAcrossSpaces) {
  const auto w = generate_world(small(0.5, 0.0));
  EXPECT_EQ(oracle_retrieval(w, {"base", "x"}, {"base", "y"}).map, 1.0);
  EXPECT_EQ(oracle_retrieval(w, {"leaf1", "x"}, {"base", "x"}).map, 1.0);
  EXPECT_EQ(oracle_retrieval(w, {"leaf1", "z"}, {"leaf2", "w"}).map, 1.0);
}

TEST(Synth, HeavyNoiseDrivesOracleTowardRandom) {
  double previous = 1.1;
  for (double sigma : {0.02, 0.1, 0.3, 1.0, 3.0}) {
    auto c = small(0.5, sigma);
    c.n_items = 1000;
    const double m = oracle_retrieval(generate_world(c), {"base", "x"}, {"base", "y"}).map;
    EXPECT_LT(m, previous) << sigma;
    previous = m;
  }
  EXPECT_LT(previous, random_ranking_map(1000) + 5.0 * random_ranking_map_stderr(1000, 1000));
}

TEST(Synth, RawCrossSpaceRetrievalIsNearRandom) {
  // Shared latents leak a world-specific bias through the random frame product, so
  // individual worlds scatter wider than the sampling error; no world gets real retrieval.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = small(0.5, 0.02, seed);
    c.n_items = 500;
    const auto w = make_fourmodality_scenario(c);
    const auto r = retrieval_eval(w.at("leaf1", "z"), w.at("base", "y"), identity_ground_truth(500));
    EXPECT_LT(r.map, 2.0 * random_ranking_map(500)) << seed;
    EXPECT_LT(r.r_at.at(1), 0.02) << seed;
  }
}

TEST(Synth, DeterministicPerSeed) {
  const auto a = generate_world(small(0.5, 0.02, 9));
  const auto b = generate_world(small(0.5, 0.02, 9));
  const auto c = generate_world(small(0.5, 0.02, 10));
  for (const auto& [key, m] : a.embeddings) {
    EXPECT_TRUE(m == b.embeddings.at(key));
    EXPECT_FALSE(m == c.embeddings.at(key));
  }
}

TEST(Synth, FourModalityLayout) {
  const auto w = make_fourmodality_scenario(small(0.5, 0.02));
  EXPECT_EQ(w.embeddings.size(), 6u);
  for (const auto& [key, m] : w.embeddings) {
    EXPECT_EQ(m.rows(), 300u);
    EXPECT_EQ(m.dim(), 32u);
    EXPECT_TRUE(m.normalized());
  }
  EXPECT_THROW(w.at("base", "z"), Error);
}

TEST(Synth, RejectsInvalidConfigs) {
  auto bad = [](auto edit) {
    auto c = small(0.5, 0.02);
    edit(c);
    return c;
  };
  EXPECT_THROW(generate_world(bad([](auto& c) { c.embed_dim = 8; })), ConfigError);
  EXPECT_THROW(generate_world(bad([](auto& c) { c.embed_dim = 16; })), ConfigError);
  EXPECT_NO_THROW(generate_world(bad([](auto& c) {
    c.embed_dim = 16;
    c.modality_gap_magnitude = 0.0;
  })));
  EXPECT_THROW(generate_world(bad([](auto& c) { c.n_items = 0; })), ConfigError);
  EXPECT_THROW(generate_world(bad([](auto& c) { c.latent_dim = 0; })), ConfigError);
  EXPECT_THROW(generate_world(bad([](auto& c) { c.modality_gap_magnitude = -0.1; })), ConfigError);
  EXPECT_THROW(generate_world(bad([](auto& c) { c.observation_noise_sigma = -1.0; })), ConfigError);
  EXPECT_THROW(generate_world(bad([](auto& c) { c.spaces.clear(); })), ConfigError);
  EXPECT_THROW(generate_world(bad([](auto& c) { c.spaces.push_back({"base", {"q"}}); })), ConfigError);
  EXPECT_THROW(generate_world(bad([](auto& c) { c.spaces.push_back({"empty", {}}); })), ConfigError);
}

TEST(Synth, WritesSixEmbeddingFilesAndGroundTruth) {
  TempDir dir;
  const auto w = make_fourmodality_scenario(small(0.5, 0.02, 4));
  const auto files = write_world(w, dir.path());
  ASSERT_EQ(files.size(), 7u);
  for (const auto& [key, m] : w.embeddings) {
    auto [loaded, manifest] = load_embeddings(embedding_file(dir.path(), key));
    EXPECT_TRUE(loaded == m);
    EXPECT_EQ(manifest.space_id, key.first);
    EXPECT_EQ(manifest.modality, key.second);
  }
  const Matrix gt = load_ground_truth(dir / "ground_truth.gt1");
  EXPECT_EQ(gt, w.latents.cast<float>().cast<double>());
}

TEST(Synth, GroundTruthRejectsMalformedFiles) {
  TempDir dir;
  save_ground_truth(Matrix::Ones(3, 2), dir / "ok.gt1");
  EXPECT_EQ(load_ground_truth(dir / "ok.gt1"), Matrix::Ones(3, 2));
  EXPECT_THROW(load_ground_truth(dir / "absent.gt1"), Error);
  {
    std::ofstream os(dir / "magic.gt1", std::ios::binary);
    os << "GT2xxxxxxxx";
  }
  EXPECT_THROW(load_ground_truth(dir / "magic.gt1"), FormatError);
  std::filesystem::resize_file(dir / "ok.gt1", 15);
  EXPECT_THROW(load_ground_truth(dir / "ok.gt1"), FormatError);
}
