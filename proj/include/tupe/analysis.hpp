#pragma once

// Inspection tools: four-term score decomposition, positional heatmaps,
// Toeplitz factorization and rank/subspace diagnostics.

#include <complex>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "tupe/model.hpp"

namespace tupe {

/// The variant cannot feed the requested analysis.
class UnsupportedVariant : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Eigen::MatrixXd to_matrix(const Tensor& t);

// Matrix files -----------------------------------------------------------

/// Comma-separated rows, scientific notation with 9 significant digits.
void write_matrix_csv(const Eigen::MatrixXd& m, const std::filesystem::path& path);
Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path);

/// Binary 8-bit greymap, min-max normalised (a constant matrix maps to 0).
void write_pgm(const Eigen::MatrixXd& m, const std::filesystem::path& path);
/// Pixel values of a P5 file written by write_pgm.
Eigen::MatrixXi read_pgm(const std::filesystem::path& path);

// Four-term decomposition ------------------------------------------------

struct MatrixStats {
  double mean = 0.0;
  double std = 0.0;
  double row_variance = 0.0;  // mean over rows of the within-row variance
  double row_mean_std = 0.0;  // spread of the row means (uniformity score)
};

MatrixStats matrix_stats(const Eigen::MatrixXd& m);

struct CorrelationReport {
  /// Keys "ww", "wp", "pw", "pp" and "full"; each averaged over items and heads.
  std::map<std::string, Eigen::MatrixXd> terms;
  std::map<std::string, MatrixStats> stats;
  /// Largest |sum of terms - scores| over every item and head.
  double max_item_error = 0.0;
  /// Same comparison after averaging.
  double averaged_error = 0.0;
  std::size_t items = 0;
};

/// First-layer four-term expansion over equal-length sequences. Supported for
/// abs (w and p are rebuilt from the two tables) and bert-ad.
CorrelationReport decompose_terms(const ModelParams& params, const ModelConfig& config,
                                  std::span<const std::vector<int>> batch);

nlohmann::json to_json(const CorrelationReport& report);

// Positional heatmaps -------------------------------------------------------

/// Per-head V_final (bias and reset included) for an untied variant.
std::vector<Eigen::MatrixXd> positional_heatmaps(const ModelParams& params,
                                                 const ModelConfig& config, std::size_t n);

/// Writes head_<h>.csv and head_<h>.pgm for every head; returns the CSV paths.
std::vector<std::filesystem::path> export_positional_heatmaps(const ModelParams& params,
                                                              const ModelConfig& config,
                                                              std::size_t n,
                                                              const std::filesystem::path& out_dir);

// Toeplitz structure --------------------------------------------------------

/// b holds b_{-(n-1)} .. b_{n-1}; entry b_k sits at index k + n - 1.
std::size_t toeplitz_order(std::span<const double> b);

/// B[j][k] = b_{k-j}.
Eigen::MatrixXd toeplitz_from_values(std::span<const double> b);

/// 2n x 2n circulant whose top-left n x n block is the Toeplitz matrix of b.
Eigen::MatrixXd embed_circulant(std::span<const double> b);

/// B = G · diag(D) · G* with G[k][j] = e^{iπ(j+1)k/n} / sqrt(2n) (first n
/// rows of the unitary Fourier basis) and D[j] the circulant eigenvalue at
/// frequency j + 1 (mod 2n).
struct ToeplitzFactorization {
  std::size_t n = 0;
  std::vector<double> b;
  Eigen::MatrixXcd g;  // n x 2n
  Eigen::VectorXcd d;  // 2n

  Eigen::MatrixXcd reconstruct() const;
};

/// Raised when a factorization does not reproduce its source matrix.
class FactorizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kToeplitzTolerance = 1e-9;

/// Throws FactorizationError when the reconstruction misses by more than
/// kToeplitzTolerance.
ToeplitzFactorization factorize_toeplitz(std::span<const double> b);

/// Max absolute row sum of B - G·D·G*.
double reconstruction_error(const ToeplitzFactorization& f);

// Rank and subspace diagnostics ---------------------------------------------

inline constexpr double kRankTolerance = 1e-8;

/// Count of singular values at or above tol · σ_max.
std::size_t numerical_rank(const Eigen::MatrixXd& m, double tol = kRankTolerance);

/// Closest Toeplitz matrix in Frobenius norm (every diagonal replaced by its mean).
Eigen::MatrixXd toeplitz_projection(const Eigen::MatrixXd& m);
double toeplitz_distance(const Eigen::MatrixXd& m);
/// Largest |m[i][j] - m[i+1][j+1]|; exactly 0 for a Toeplitz matrix.
double diagonal_deviation(const Eigen::MatrixXd& m);

struct HeadSubspace {
  std::size_t absolute_rank = 0;
  std::size_t rank_bound = 0;  // d / H
  double absolute_toeplitz_distance = 0.0;
  std::optional<double> relative_diagonal_deviation;
  std::optional<double> relative_toeplitz_distance;
};

struct SubspaceReport {
  std::size_t n = 0;
  std::vector<HeadSubspace> heads;

  bool ranks_within_bound() const;
};

/// Diagnostics of the absolute slice (untied correlation before bias and
/// reset) and, when present, the relative-bias component of each head.
SubspaceReport subspace_diagnostics(const ModelParams& params, const ModelConfig& config,
                                    std::size_t n);

nlohmann::json to_json(const SubspaceReport& report);

}  // namespace tupe
