#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "tupe/analysis.hpp"
#include "tupe/rng.hpp"
#include "tupe/vocab.hpp"

namespace tupe {
namespace {

namespace fs = std::filesystem;

std::vector<double> random_values(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(count);
  for (double& x : v) x = rng.normal();
  return v;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tupe_analysis_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig tiny(EncodingVariant v) {
  ModelConfig c;
  c.d = 16;
  c.heads = 4;
  c.layers = 1;
  c.d_ff = 16;
  c.n_max = 12;
  c.vocab_size = 20;
  c.clip = 3;
  c.variant = v;
  c.seed = 5;
  c.init_std = 0.5;
  return c;
}

void scramble(const ModelParams& params, std::uint64_t seed) {
  Rng rng(seed);
  for (NamedParameter p : params.named()) {
    for (double& x : p.tensor.mutable_data()) x += 0.3 * rng.normal();
  }
}

const std::vector<std::vector<int>> kBatch = {
    {kClsId, 5, 9, 12, 7, 4, 19, 11}, {kClsId, 6, 6, 8, 13, 10, 5, 4}, {kClsId, 17, 18, 4, 5, 6, 7, 8}};

// --- Circulant embedding and Toeplitz factorization --------------------------

TEST(Circulant, SingleValue) {
  const std::vector<double> b = {3.5};
  const Eigen::MatrixXd c = embed_circulant(b);
  ASSERT_EQ(c.rows(), 2);
  EXPECT_TRUE((c.array() == 3.5).all());
}

TEST(Circulant, TopLeftBlockIsToeplitz) {
  const std::vector<double> b = {-1.0, 2.0, 5.0};  // b_{-1}, b_0, b_1
  const Eigen::MatrixXd c = embed_circulant(b);
  ASSERT_EQ(c.rows(), 4);
  EXPECT_EQ(c(0, 0), 2.0);
  EXPECT_EQ(c(0, 1), 5.0);
  EXPECT_EQ(c(1, 0), -1.0);
  EXPECT_EQ(c(1, 1), 2.0);
  for (std::size_t n = 1; n <= 9; ++n) {
    const std::vector<double> r = random_values(2 * n - 1, n);
    EXPECT_TRUE((embed_circulant(r).topLeftCorner(n, n).array() == toeplitz_from_values(r).array()).all());
  }
}

TEST(Circulant, EveryRowIsTheRotatedPredecessor) {
  for (std::size_t n : {1u, 4u, 7u}) {
    const Eigen::MatrixXd c = embed_circulant(random_values(2 * n - 1, 10 + n));
    const Eigen::Index m = c.rows();
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index k = 0; k < m; ++k) EXPECT_EQ(c(j, k), c((j + 1) % m, (k + 1) % m));
    }
  }
}

TEST(Toeplitz, ValuesMustHaveOddLength) {
  const std::vector<double> even = {1.0, 2.0};
  EXPECT_THROW(toeplitz_order(even), std::invalid_argument);
  EXPECT_THROW(toeplitz_order(std::span<const double>()), std::invalid_argument);
  const std::vector<double> five(5, 0.0);
  EXPECT_EQ(toeplitz_order(five), 3u);
}

TEST(Toeplitz, ConstantValuesGiveAllOnesMultiple) {
  const std::vector<double> b(9, -2.25);
  const ToeplitzFactorization f = factorize_toeplitz(b);
  const Eigen::MatrixXcd r = f.reconstruct();
  EXPECT_LT((r - Eigen::MatrixXcd::Constant(5, 5, -2.25)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Toeplitz, OneByOne) {
  const std::vector<double> b = {3.0};
  const ToeplitzFactorization f = factorize_toeplitz(b);
  EXPECT_LT(std::abs(f.reconstruct()(0, 0) - 3.0), 1e-12);
}

// Greedy nearest matching: every D entry must pair with a distinct eigenvalue.
double eigen_match_error(const Eigen::VectorXcd& d, Eigen::VectorXcd eig) {
  std::vector<bool> used(eig.size(), false);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    double best = INFINITY;
    Eigen::Index pick = -1;
    for (Eigen::Index k = 0; k < eig.size(); ++k) {
      if (!used[k] && std::abs(d[i] - eig[k]) < best) {
        best = std::abs(d[i] - eig[k]);
        pick = k;
      }
    }
    used[pick] = true;
    worst = std::max(worst, best);
  }
  return worst;
}

TEST(Toeplitz, RandomValuesReconstructAndMatchDenseEigenvalues) {
  for (std::size_t n : {2u, 3u, 4u, 8u}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const std::vector<double> b = random_values(2 * n - 1, 100 * n + seed);
      const ToeplitzFactorization f = factorize_toeplitz(b);
      ASSERT_EQ(f.g.rows(), static_cast<Eigen::Index>(n));
      ASSERT_EQ(f.g.cols(), static_cast<Eigen::Index>(2 * n));
      EXPECT_LT(reconstruction_error(f), 1e-9);
      const Eigen::MatrixXcd c = embed_circulant(b).cast<std::complex<double>>();
      Eigen::ComplexEigenSolver<Eigen::MatrixXcd> solver(c);
      EXPECT_LT(eigen_match_error(f.d, solver.eigenvalues()), 1e-8) << "n=" << n;
    }
  }
}

TEST(Toeplitz, ReconstructionAcrossAllSmallOrders) {
  for (std::size_t n = 1; n <= 16; ++n) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const ToeplitzFactorization f = factorize_toeplitz(random_values(2 * n - 1, 7000 + 131 * n + seed));
      ASSERT_LE(reconstruction_error(f), 1e-9) << "n=" << n << " seed=" << seed;
    }
  }
}

TEST(Toeplitz, BasisRowsAreOrthonormalSlices) {
  const ToeplitzFactorization f = factorize_toeplitz(random_values(11, 3));
  const Eigen::MatrixXcd gram = f.g * f.g.adjoint();
  EXPECT_LT((gram - Eigen::MatrixXcd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-12);
}

// --- Rank and Toeplitz distance -------------------------------------------------

TEST(Rank, CountsSignificantSingularValues) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(8, 3);
  Eigen::MatrixXd b = Eigen::MatrixXd::Random(3, 8);
  EXPECT_EQ(numerical_rank(a * b), 3u);
  EXPECT_EQ(numerical_rank(Eigen::MatrixXd::Identity(5, 5)), 5u);
  EXPECT_EQ(numerical_rank(Eigen::MatrixXd::Zero(4, 4)), 0u);
}

TEST(ToeplitzDistance, ProjectionAveragesDiagonals) {
  Eigen::MatrixXd m(3, 3);
  m << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  const Eigen::MatrixXd p = toeplitz_projection(m);
  EXPECT_DOUBLE_EQ(p(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(p(1, 1), 5.0);
  EXPECT_DOUBLE_EQ(p(0, 1), 4.0);
  EXPECT_DOUBLE_EQ(p(1, 0), 6.0);
  EXPECT_DOUBLE_EQ(p(2, 0), 7.0);
  EXPECT_DOUBLE_EQ(diagonal_deviation(p), 0.0);
  // Off the projection only the main and first diagonals move.
  EXPECT_NEAR(toeplitz_distance(m), std::sqrt(16.0 + 0.0 + 16.0 + 4.0 + 4.0 + 4.0 + 4.0), 1e-12);
}

TEST(ToeplitzDistance, ToeplitzInputHasZeroDistance) {
  const Eigen::MatrixXd t = toeplitz_from_values(random_values(9, 4));
  EXPECT_EQ(diagonal_deviation(t), 0.0);
  EXPECT_LT(toeplitz_distance(t), 1e-14);
}

TEST(ToeplitzDistance, ProjectionIsClosestOnRandomSamples) {
  const Eigen::MatrixXd m = Eigen::MatrixXd::Random(6, 6);
  const Eigen::MatrixXd p = toeplitz_projection(m);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::MatrixXd other = p + 0.1 * toeplitz_from_values(random_values(11, 50 + trial));
    EXPECT_LE((m - p).norm(), (m - other).norm());
  }
}

TEST(Subspace, UntiedSlicesRespectRankBoundAndBiasIsToeplitz) {
  const ModelConfig c = tiny(EncodingVariant::kTupeR);
  const ModelParams p = init_params(c);
  scramble(p, 1);
  const SubspaceReport r = subspace_diagnostics(p, c, 8);
  ASSERT_EQ(r.heads.size(), 4u);
  EXPECT_TRUE(r.ranks_within_bound());
  for (const HeadSubspace& h : r.heads) {
    EXPECT_EQ(h.rank_bound, 4u);
    EXPECT_LE(h.absolute_rank, 4u);
    EXPECT_GT(h.absolute_toeplitz_distance, 0.0);
    ASSERT_TRUE(h.relative_diagonal_deviation.has_value());
    EXPECT_EQ(*h.relative_diagonal_deviation, 0.0);
  }
  const nlohmann::json j = to_json(r);
  EXPECT_EQ(j.at("heads").size(), 4u);
}

TEST(Subspace, AbsoluteVariantsWithoutBiasOmitRelativeFields) {
  const ModelConfig c = tiny(EncodingVariant::kTupeA);
  const SubspaceReport r = subspace_diagnostics(init_params(c), c, 6);
  for (const HeadSubspace& h : r.heads) EXPECT_FALSE(h.relative_diagonal_deviation.has_value());
}

TEST(Subspace, NonUntiedVariantRejected) {
  const ModelConfig c = tiny(EncodingVariant::kAbsBaseline);
  EXPECT_THROW(subspace_diagnostics(init_params(c), c, 6), UnsupportedVariant);
}

// --- Four-term decomposition ------------------------------------------------------

TEST(Decompose, TermsSumToScores) {
  for (EncodingVariant v : {EncodingVariant::kAbsBaseline, EncodingVariant::kBertAd}) {
    const ModelConfig c = tiny(v);
    const ModelParams p = init_params(c);
    scramble(p, 2);
    const CorrelationReport r = decompose_terms(p, c, kBatch);
    EXPECT_EQ(r.items, kBatch.size());
    EXPECT_LT(r.max_item_error, 1e-10) << variant_name(v);
    EXPECT_LT(r.averaged_error, 1e-8) << variant_name(v);
    const Eigen::MatrixXd sum = r.terms.at("ww") + r.terms.at("wp") + r.terms.at("pw") + r.terms.at("pp");
    EXPECT_LT((sum - r.terms.at("full")).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Decompose, ZeroPositionsLeaveOnlyWordTerm) {
  const ModelConfig c = tiny(EncodingVariant::kAbsBaseline);
  ModelParams p = init_params(c);
  scramble(p, 3);
  for (double& x : p.positions.table.mutable_data()) x = 0.0;
  for (double& x : p.positions.ln_bias.mutable_data()) x = 0.0;
  const CorrelationReport r = decompose_terms(p, c, kBatch);
  EXPECT_EQ(r.terms.at("wp").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(r.terms.at("pw").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(r.terms.at("pp").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(r.terms.at("ww").cwiseAbs().maxCoeff(), 0.0);
}

TEST(Decompose, ZeroWordsLeaveOnlyPositionTerm) {
  const ModelConfig c = tiny(EncodingVariant::kAbsBaseline);
  ModelParams p = init_params(c);
  scramble(p, 4);
  for (double& x : p.word_embedding.mutable_data()) x = 0.0;
  const CorrelationReport r = decompose_terms(p, c, kBatch);
  EXPECT_EQ(r.terms.at("ww").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(r.terms.at("wp").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(r.terms.at("pw").cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(r.terms.at("pp").cwiseAbs().maxCoeff(), 0.0);
}

TEST(Decompose, UntiedVariantRejected) {
  const ModelConfig c = tiny(EncodingVariant::kTupeA);
  EXPECT_THROW(decompose_terms(init_params(c), c, kBatch), UnsupportedVariant);
}

TEST(Decompose, StatsDescribeMatrix) {
  Eigen::MatrixXd m(2, 2);
  m << 1, 3, 5, 7;
  const MatrixStats s = matrix_stats(m);
  EXPECT_DOUBLE_EQ(s.mean, 4.0);
  EXPECT_DOUBLE_EQ(s.std, std::sqrt(5.0));
  EXPECT_DOUBLE_EQ(s.row_variance, 1.0);
  EXPECT_DOUBLE_EQ(s.row_mean_std, 2.0);
}

// --- Files ---------------------------------------------------------------------------

TEST(MatrixFiles, CsvRoundTripWithinFormatPrecision) {
  const fs::path dir = temp_dir("csv");
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(5, 7) * 1e3;
  m(0, 0) = 0.0;
  m(1, 1) = -1.234567891234e-12;
  write_matrix_csv(m, dir / "m.csv");
  const Eigen::MatrixXd back = read_matrix_csv(dir / "m.csv");
  ASSERT_EQ(back.rows(), 5);
  ASSERT_EQ(back.cols(), 7);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    EXPECT_LE(std::abs(back(i) - m(i)), 1e-8 * std::abs(m(i)));
  }
  fs::remove_all(dir);
}

TEST(MatrixFiles, RaggedCsvRejected) {
  const fs::path dir = temp_dir("ragged");
  std::ofstream(dir / "bad.csv") << "1,2\n3\n";
  EXPECT_THROW(read_matrix_csv(dir / "bad.csv"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(MatrixFiles, PgmIsMinMaxNormalised) {
  const fs::path dir = temp_dir("pgm");
  Eigen::MatrixXd m(2, 3);
  m << -1, 0, 1, 3, 1, -1;
  write_pgm(m, dir / "m.pgm");
  const Eigen::MatrixXi px = read_pgm(dir / "m.pgm");
  ASSERT_EQ(px.rows(), 2);
  ASSERT_EQ(px.cols(), 3);
  EXPECT_EQ(px(0, 0), 0);
  EXPECT_EQ(px(1, 0), 255);
  EXPECT_EQ(px(0, 2), px(1, 1));
  write_pgm(Eigen::MatrixXd::Constant(2, 2, 4.0), dir / "c.pgm");
  EXPECT_EQ(read_pgm(dir / "c.pgm").maxCoeff(), 0);
  fs::remove_all(dir);
}

TEST(Heatmaps, ExportShapesAndResetRows) {
  const ModelConfig c = tiny(EncodingVariant::kTupeR);
  const ModelParams p = init_params(c);
  const fs::path dir = temp_dir("heat");
  const std::vector<fs::path> files = export_positional_heatmaps(p, c, 9, dir);
  ASSERT_EQ(files.size(), 4u);
  const std::vector<Eigen::MatrixXd> mem = positional_heatmaps(p, c, 9);
  for (std::size_t h = 0; h < 4; ++h) {
    EXPECT_TRUE(fs::exists(dir / ("head_" + std::to_string(h) + ".pgm")));
    const Eigen::MatrixXd m = read_matrix_csv(files[h]);
    ASSERT_EQ(m.rows(), 9);
    ASSERT_EQ(m.cols(), 9);
    EXPECT_LT((m - mem[h]).cwiseAbs().maxCoeff(), 1e-6);
    for (Eigen::Index j = 1; j < 9; ++j) EXPECT_EQ(m(0, j), m(0, 0));
  }
  fs::remove_all(dir);
}

TEST(Heatmaps, RequireUntiedVariant) {
  const ModelConfig c = tiny(EncodingVariant::kT5Rel);
  EXPECT_THROW(positional_heatmaps(init_params(c), c, 5), UnsupportedVariant);
}

TEST(Heatmaps, UnwritableDirectorySurfacesError) {
  const ModelConfig c = tiny(EncodingVariant::kTupeA);
  const fs::path dir = temp_dir("blocked");
  std::ofstream(dir / "file") << "x";
  EXPECT_ANY_THROW(export_positional_heatmaps(init_params(c), c, 5, dir / "file" / "sub"));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace tupe
