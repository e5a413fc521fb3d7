#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "test_support.hpp"

using namespace mcr;
using namespace mcr::testutil;

namespace {

bool params_identical(const ProjectorParams& a, const ProjectorParams& b) {
  bool same = true;
  visit_parameter_pairs(a, b, [&](const std::string&, auto x, auto y, bool) {
    for (std::size_t i = 0; i < x.size(); ++i) same = same && x[i] == y[i];
  });
  for (std::size_t i = 0; i < a.f_m.blocks.size(); ++i) {
    same = same && a.f_m.blocks[i].bn.running_mean == b.f_m.blocks[i].bn.running_mean &&
           a.f_m.blocks[i].bn.running_var == b.f_m.blocks[i].bn.running_var;
  }
  return same;
}

// Step-by-step reference for one f_m pass, written with explicit loops.
Matrix naive_mlp(const MlpParams& p, const Matrix& x, bool train) {
  Matrix h = x;
  for (const auto& b : p.blocks) {
    const auto rows = h.rows();
    const auto out = b.linear.weight.rows();
    Matrix z(rows, out);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index o = 0; o < out; ++o) {
        double s = b.linear.bias(o);
        for (Eigen::Index k = 0; k < h.cols(); ++k) s += h(i, k) * b.linear.weight(o, k);
        z(i, o) = s;
      }
    for (Eigen::Index o = 0; o < out; ++o) {
      double mean = b.bn.running_mean(o), var = b.bn.running_var(o);
      if (train) {
        mean = 0.0;
        for (Eigen::Index i = 0; i < rows; ++i) mean += z(i, o) / static_cast<double>(rows);
        var = 0.0;
        for (Eigen::Index i = 0; i < rows; ++i) var += (z(i, o) - mean) * (z(i, o) - mean) / static_cast<double>(rows);
      }
      for (Eigen::Index i = 0; i < rows; ++i) {
        double y = (z(i, o) - mean) / std::sqrt(var + b.bn.epsilon) * b.bn.gamma(o) + b.bn.beta(o);
        if (b.activation) y = std::max(y, 0.0);
        z(i, o) = y;
      }
    }
    h = z;
  }
  return h;
}

}  // namespace

TEST(Projector, InitIsDeterministic) {
  const auto arch = ProjectorArch::for_dims(16, 12);
  EXPECT_TRUE(params_identical(init_projector(arch, 7), init_projector(arch, 7)));
  EXPECT_FALSE(params_identical(init_projector(arch, 7), init_projector(arch, 8)));
}

TEST(Projector, DefaultLayoutHasFourMlpLinearLayers) {
  const ProjectorArch arch;
  const auto pp = init_projector(arch, 0);
  ASSERT_EQ(pp.f_l.size(), 1u);
  EXPECT_EQ(pp.f_l[0].weight.rows(), 512);
  EXPECT_EQ(pp.f_l[0].weight.cols(), 512);
  ASSERT_EQ(pp.f_m.blocks.size(), 4u);
  const std::vector<std::pair<Eigen::Index, Eigen::Index>> dims{{512, 1024}, {1024, 512}, {512, 1024}, {1024, 512}};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(pp.f_m.blocks[i].linear.weight.cols(), dims[i].first);
    EXPECT_EQ(pp.f_m.blocks[i].linear.weight.rows(), dims[i].second);
  }
  // Inner blocks end in ReLU; the head does not by default.
  EXPECT_TRUE(pp.f_m.blocks[0].activation);
  EXPECT_TRUE(pp.f_m.blocks[2].activation);
  EXPECT_FALSE(pp.f_m.blocks[3].activation);
  arch.validate();
}

TEST(Projector, InitialWeightsRespectFanInBound) {
  const auto pp = init_projector(ProjectorArch{}, 3);
  const double bound = 1.0 / std::sqrt(512.0);
  EXPECT_NEAR(bound, 0.0442, 1e-4);
  EXPECT_LE(pp.f_l[0].weight.cwiseAbs().maxCoeff(), bound);
  EXPECT_LE(pp.f_m.blocks[0].linear.weight.cwiseAbs().maxCoeff(), bound);
  EXPECT_LE(pp.f_m.blocks[1].linear.weight.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(1024.0));
  EXPECT_EQ(pp.f_l[0].bias.cwiseAbs().maxCoeff(), 0.0);
  for (const auto& b : pp.f_m.blocks) {
    EXPECT_EQ(b.bn.gamma, Vector::Ones(b.bn.gamma.size()));
    EXPECT_EQ(b.bn.running_var, Vector::Ones(b.bn.gamma.size()));
    EXPECT_EQ(b.bn.running_mean.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(b.bn.beta.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(Projector, StageCountControlsLinearLayers) {
  auto arch = ProjectorArch::for_dims(8, 8);
  for (std::size_t s = 0; s <= 5; ++s) {
    arch.fm_stages = s;
    EXPECT_EQ(init_projector(arch, 0).f_m.blocks.size(), s == 0 ? 1u : 2 * s);
  }
  arch.fm_stages = 6;
  EXPECT_THROW(arch.validate(), ConfigError);
  arch.fm_stages = 2;
  arch.fl_depth = 0;
  EXPECT_THROW(init_projector(arch, 0), ConfigError);
  arch.fl_depth = 3;
  EXPECT_EQ(init_projector(arch, 0).f_l.size(), 3u);
}

TEST(ForwardLinear, IdentityAndScalarAffine) {
  Rng rng(1);
  const Matrix x = random_matrix(rng, 5, 4);
  const LinearParams id{Matrix::Identity(4, 4), Vector::Zero(4)};
  EXPECT_EQ(forward_linear(id, x), x);

  LinearParams p{Matrix::Constant(1, 1, 2.0), Vector::Constant(1, 1.0)};
  EXPECT_DOUBLE_EQ(forward_linear(p, Matrix::Constant(1, 1, 3.0))(0, 0), 7.0);
}

TEST(ForwardLinear, MatchesNaiveLoop) {
  Rng rng(2);
  const Matrix x = random_matrix(rng, 4, 8);
  const LinearParams p{random_matrix(rng, 5, 8), random_matrix(rng, 5, 1).col(0)};
  const Matrix y = forward_linear(p, x);
  for (int i = 0; i < 4; ++i)
    for (int o = 0; o < 5; ++o) {
      double s = p.bias(o);
      for (int k = 0; k < 8; ++k) s += x(i, k) * p.weight(o, k);
      EXPECT_NEAR(y(i, o), s, 1e-6);
    }
  EXPECT_THROW(forward_linear(p, random_matrix(rng, 4, 7)), ShapeError);
}

TEST(ForwardMlp, EvalIdentityConfigurationIsRectifier) {
  MlpParams p;
  MlpBlock b;
  b.linear = {Matrix::Identity(3, 3), Vector::Zero(3)};
  b.bn = {Vector::Ones(3), Vector::Zero(3), Vector::Zero(3), Vector::Constant(3, 1.0 - 1e-5)};
  b.activation = true;
  p.blocks.push_back(b);
  Matrix x(2, 3);
  x << -1.0, 2.0, 0.5, 3.0, -0.25, -4.0;
  const Matrix y = forward_mlp(p, x);
  EXPECT_TRUE(y.isApprox(x.cwiseMax(0.0), 1e-12));
}

TEST(ForwardMlp, IdenticalRowsNormalizeToBeta) {
  Rng rng(3);
  auto pp = init_projector(ProjectorArch::for_dims(4, 4), 1);
  pp.f_m.blocks.resize(1);
  pp.f_m.blocks[0].activation = false;
  pp.f_m.blocks[0].bn.beta = Vector::Constant(pp.f_m.blocks[0].bn.beta.size(), 0.25);
  Matrix x(2, 4);
  x.row(0) = random_matrix(rng, 1, 4);
  x.row(1) = x.row(0);
  const Matrix y = forward_mlp(pp.f_m, x, Mode::train);
  ASSERT_TRUE(y.allFinite());
  EXPECT_LT((y.array() - 0.25).abs().maxCoeff(), 1e-12);
}

TEST(ForwardMlp, TrainModeNeedsTwoRows) {
  auto pp = init_projector(ProjectorArch::for_dims(4, 4), 1);
  Rng rng(4);
  EXPECT_THROW(forward_mlp(pp.f_m, random_matrix(rng, 1, 4), Mode::train), ShapeError);
  EXPECT_NO_THROW(forward_mlp(pp.f_m, random_matrix(rng, 1, 4), Mode::eval));
}

TEST(ForwardMlp, MatchesStepByStepReimplementation) {
  Rng rng(5);
  auto arch = ProjectorArch::for_dims(6, 5);
  arch.final_activation = true;
  auto pp = init_projector(arch, 9);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& b : pp.f_m.blocks) {
    for (Eigen::Index i = 0; i < b.bn.gamma.size(); ++i) {
      b.bn.gamma(i) = u(rng);
      b.bn.beta(i) = u(rng) - 1.0;
      b.bn.running_mean(i) = u(rng) - 1.0;
      b.bn.running_var(i) = u(rng);
    }
  }
  const Matrix x = random_matrix(rng, 7, 6);
  EXPECT_LT((forward_mlp(pp.f_m, x) - naive_mlp(pp.f_m, x, false)).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_LT((forward_mlp_pure(pp.f_m, x, Mode::train) - naive_mlp(pp.f_m, x, true)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(ForwardMlp, RunningStatisticsFollowMomentumRule) {
  Rng rng(6);
  auto pp = init_projector(ProjectorArch::for_dims(3, 3), 2);
  pp.f_m.blocks.resize(1);
  const Matrix x = random_matrix(rng, 10, 3);
  const Matrix z = forward_linear(pp.f_m.blocks[0].linear, x);
  const auto before = pp.f_m.blocks[0].linear.weight;
  forward_mlp(pp.f_m, x, Mode::train);
  const auto& bn = pp.f_m.blocks[0].bn;
  for (Eigen::Index o = 0; o < 3; ++o) {
    const double mean = z.col(o).mean();
    const double unbiased = (z.col(o).array() - mean).square().sum() / 9.0;
    EXPECT_NEAR(bn.running_mean(o), 0.1 * mean, 1e-12);
    EXPECT_NEAR(bn.running_var(o), 0.9 + 0.1 * unbiased, 1e-12);
  }
  EXPECT_EQ(pp.f_m.blocks[0].linear.weight, before);
}

TEST(ForwardMlp, EvalIsPureAndRectifierNonNegative) {
  Rng rng(7);
  auto arch = ProjectorArch::for_dims(5, 5);
  arch.final_activation = true;
  const auto pp = init_projector(arch, 4);
  const Matrix x = random_matrix(rng, 9, 5);
  const Matrix a = forward_mlp(pp.f_m, x);
  const Matrix b = forward_mlp(pp.f_m, x);
  EXPECT_EQ(a, b);
  EXPECT_GE(a.minCoeff(), 0.0);
}

TEST(ForwardMlp, AffineChainWhenNormalizationAndRectifiersAreBypassed) {
  Rng rng(8);
  auto pp = init_projector(ProjectorArch::for_dims(4, 3), 5);
  Matrix w = Matrix::Identity(4, 4);
  Vector bias = Vector::Zero(4);
  for (auto& b : pp.f_m.blocks) {
    b.activation = false;
    b.bn.running_var.setConstant(1.0 - b.bn.epsilon);
    b.linear.bias = random_matrix(rng, b.linear.bias.size(), 1).col(0);
    bias = b.linear.weight * bias + b.linear.bias;
    w = b.linear.weight * w;
  }
  const Matrix x = random_matrix(rng, 6, 4);
  Matrix expected = x * w.transpose();
  expected.rowwise() += bias.transpose();
  EXPECT_LT((forward_mlp(pp.f_m, x) - expected).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(ProjectPaths, IdentityFlMakesPathsAgree) {
  Rng rng(9);
  auto pp = init_projector(ProjectorArch::for_dims(4, 6), 3);
  pp.f_l[0] = {Matrix::Identity(4, 4), Vector::Zero(4)};
  pp.mode = Mode::eval;
  const Matrix x = random_matrix(rng, 5, 4);
  EXPECT_EQ(project_nonoverlap(pp, x), project_overlap(pp, x));
}

TEST(ProjectPaths, CompositionIsDefinitional) {
  Rng rng(10);
  auto pp = init_projector(ProjectorArch::for_dims(4, 6), 3);
  pp.mode = Mode::eval;
  const Matrix x = random_matrix(rng, 5, 4);
  EXPECT_EQ(project_nonoverlap(pp, x), forward_mlp(pp.f_m, forward_linear(pp.f_l[0], x)));
  const Matrix e = embed_nonoverlap(pp, x);
  for (Eigen::Index i = 0; i < e.rows(); ++i) EXPECT_NEAR(e.row(i).norm(), 1.0, 1e-12);
}

TEST(ProjectPaths, BatchOfOneDependsOnMode) {
  Rng rng(11);
  auto pp = init_projector(ProjectorArch::for_dims(4, 6), 3);
  const Matrix x = random_matrix(rng, 1, 4);
  pp.mode = Mode::train;
  EXPECT_THROW(project_nonoverlap(pp, x), ShapeError);
  pp.mode = Mode::eval;
  EXPECT_EQ(project_nonoverlap(pp, x).rows(), 1);
  EXPECT_THROW(project_overlap(pp, random_matrix(rng, 1, 5)), ShapeError);
}

TEST(Checkpoint, RoundTripPreservesParametersAtFloatPrecision) {
  TempDir dir;
  Rng rng(12);
  auto arch = ProjectorArch::for_dims(6, 4);
  arch.fl_depth = 2;
  arch.fm_stages = 1;
  auto pp = init_projector(arch, 11);
  forward_mlp(pp.f_m, random_matrix(rng, 8, 6), Mode::train);
  save_checkpoint(pp, dir / "p.exp1");
  const auto loaded = load_checkpoint(dir / "p.exp1");
  EXPECT_EQ(describe(loaded.arch), describe(arch));
  EXPECT_EQ(loaded.mode, Mode::eval);
  visit_parameter_pairs(pp, loaded, [&](const std::string& name, auto a, auto b, bool) {
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(static_cast<float>(a[i]), b[i]) << name;
  });
  EXPECT_TRUE(loaded.f_m.blocks[0].bn.running_var.isApprox(pp.f_m.blocks[0].bn.running_var, 1e-6));
}

TEST(Checkpoint, DescriptorDiffNamesChangedFields) {
  auto a = ProjectorArch::for_dims(8, 8);
  auto b = a;
  EXPECT_EQ(descriptor_diff(a, b), "");
  b.fm_stages = 3;
  const auto diff = descriptor_diff(a, b);
  EXPECT_NE(diff.find("fm_stages"), std::string::npos);
  EXPECT_NE(diff.find("fm_linear_layers: expected 4, checkpoint has 6"), std::string::npos);
}

TEST(Checkpoint, RejectsMalformedFiles) {
  TempDir dir;
  auto pp = init_projector(ProjectorArch::for_dims(4, 4), 0);
  const auto path = dir / "p.exp1";
  save_checkpoint(pp, path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});

  auto write = [&](const std::string& b) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << b;
  };
  write(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(path), FormatError);
  write(bytes + "x");
  EXPECT_THROW(load_checkpoint(path), FormatError);
  write("EXP2" + bytes.substr(4));
  EXPECT_THROW(load_checkpoint(path), FormatError);
  auto huge = bytes;
  huge[8] = '\xff';
  huge[9] = '\xff';
  huge[10] = '\xff';
  write(huge);
  EXPECT_THROW(load_checkpoint(path), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "missing.exp1"), Error);
}
