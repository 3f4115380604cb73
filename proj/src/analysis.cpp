#include "tupe/analysis.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace tupe {

namespace fs = std::filesystem;

Eigen::MatrixXd to_matrix(const Tensor& t) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

// Matrix files -----------------------------------------------------------

void write_matrix_csv(const Eigen::MatrixXd& m, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::scientific << std::setprecision(8);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Eigen::MatrixXd read_matrix_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw std::runtime_error(path.string() + ": ragged CSV row " + std::to_string(rows.size() + 1));
    }
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.empty() ? 0 : rows.front().size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

void write_pgm(const Eigen::MatrixXd& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
  const double lo = m.size() ? m.minCoeff() : 0.0;
  const double span = m.size() ? m.maxCoeff() - lo : 0.0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = span > 0.0 ? (m(r, c) - lo) / span : 0.0;
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Eigen::MatrixXi read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || width < 0 || height < 0 || maxval != 255) {
    throw std::runtime_error(path.string() + ": not an 8-bit P5 greymap");
  }
  in.get();
  Eigen::MatrixXi m(height, width);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const int ch = in.get();
      if (ch == std::char_traits<char>::eof()) throw std::runtime_error(path.string() + ": truncated pixels");
      m(r, c) = ch;
    }
  }
  return m;
}

// Four-term decomposition ------------------------------------------------

MatrixStats matrix_stats(const Eigen::MatrixXd& m) {
  MatrixStats s;
  if (m.size() == 0) return s;
  s.mean = m.mean();
  s.std = std::sqrt((m.array() - s.mean).square().mean());
  const Eigen::VectorXd row_means = m.rowwise().mean();
  double within = 0.0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    within += (m.row(r).array() - row_means(r)).square().mean();
  }
  s.row_variance = within / static_cast<double>(m.rows());
  s.row_mean_std = std::sqrt((row_means.array() - row_means.mean()).square().mean());
  return s;
}

namespace {

const char* const kTermKeys[] = {"ww", "wp", "pw", "pp"};

Eigen::MatrixXd head_block(const Eigen::MatrixXd& m, std::size_t h, std::size_t w) {
  return m.middleCols(static_cast<Eigen::Index>(h * w), static_cast<Eigen::Index>(w));
}

}  // namespace

CorrelationReport decompose_terms(const ModelParams& params, const ModelConfig& config,
                                  std::span<const std::vector<int>> batch) {
  const bool four_term = config.variant == EncodingVariant::kBertAd;
  if (config.variant != EncodingVariant::kAbsBaseline && !four_term) {
    throw UnsupportedVariant("decomposition needs an absolute-input variant (abs or bert-ad), got " +
                             std::string(variant_name(config.variant)));
  }
  if (config.layers == 0) throw UnsupportedVariant("decomposition needs at least one layer");
  if (batch.empty()) throw std::invalid_argument("decompose_terms: empty batch");
  const std::size_t n = batch.front().size();
  for (const auto& seq : batch) {
    if (seq.size() != n) throw DimensionError("decompose_terms: sequences must share one length");
  }

  const std::size_t heads = config.heads;
  const std::size_t w = config.head_dim();
  const double s = 1.0 / std::sqrt((four_term ? 4.0 : 1.0) * static_cast<double>(w));
  const AttentionLayerParams& attn = params.layers.front().attn;
  const Eigen::MatrixXd wq = to_matrix(attn.w_q), wk = to_matrix(attn.w_k);
  const Eigen::MatrixXd pq_proj = four_term ? to_matrix(params.projection.u_q) : wq;
  const Eigen::MatrixXd pk_proj = four_term ? to_matrix(params.projection.u_k) : wk;
  const Eigen::MatrixXd p = config.positional
                                ? to_matrix(normalized_positions(params.positions, n))
                                : Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                                        static_cast<Eigen::Index>(config.d));
  const PositionalContext context = build_positional_context(params, config, n);

  CorrelationReport report;
  report.items = batch.size();
  for (const char* key : kTermKeys) report.terms[key] = Eigen::MatrixXd::Zero(n, n);
  report.terms["full"] = Eigen::MatrixXd::Zero(n, n);

  const Eigen::MatrixXd pq = p * pq_proj, pk = p * pk_proj;
  for (const auto& tokens : batch) {
    const Eigen::MatrixXd word = to_matrix(gather_rows(params.word_embedding, tokens));
    const Eigen::MatrixXd wqx = word * wq, wkx = word * wk;
    const ScoreMap full = layer_scores(params, config, 0, embed(params, config, tokens, {}, &context), context);
    for (std::size_t h = 0; h < heads; ++h) {
      const Eigen::MatrixXd qw = head_block(wqx, h, w), kw = head_block(wkx, h, w);
      const Eigen::MatrixXd qp = head_block(pq, h, w), kp = head_block(pk, h, w);
      const Eigen::MatrixXd terms[] = {s * qw * kw.transpose(), s * qw * kp.transpose(),
                                       s * qp * kw.transpose(), s * qp * kp.transpose()};
      const Eigen::MatrixXd scores = to_matrix(full.scores[h]);
      const Eigen::MatrixXd diff = terms[0] + terms[1] + terms[2] + terms[3] - scores;
      report.max_item_error = std::max(report.max_item_error, diff.cwiseAbs().maxCoeff());
      for (int t = 0; t < 4; ++t) report.terms[kTermKeys[t]] += terms[t];
      report.terms["full"] += scores;
    }
  }
  const double count = static_cast<double>(batch.size() * heads);
  for (auto& [key, m] : report.terms) {
    m /= count;
    report.stats[key] = matrix_stats(m);
  }
  const Eigen::MatrixXd sum = report.terms["ww"] + report.terms["wp"] + report.terms["pw"] + report.terms["pp"];
  report.averaged_error = (sum - report.terms["full"]).cwiseAbs().maxCoeff();
  return report;
}

nlohmann::json to_json(const CorrelationReport& report) {
  nlohmann::json j;
  j["items"] = report.items;
  j["max_item_error"] = report.max_item_error;
  j["averaged_error"] = report.averaged_error;
  for (const auto& [key, s] : report.stats) {
    j["stats"][key] = {{"mean", s.mean},
                       {"std", s.std},
                       {"row_variance", s.row_variance},
                       {"uniformity", s.row_mean_std}};
  }
  return j;
}

// Positional heatmaps -------------------------------------------------------

std::vector<Eigen::MatrixXd> positional_heatmaps(const ModelParams& params,
                                                 const ModelConfig& config, std::size_t n) {
  if (!is_tupe_family(config.variant)) {
    throw UnsupportedVariant("positional heatmaps need an untied variant, got " +
                             std::string(variant_name(config.variant)));
  }
  const PositionalCorrelation v = positional_correlation(params, config, n);
  std::vector<Eigen::MatrixXd> out;
  for (const Tensor& h : v.heads) out.push_back(to_matrix(h));
  return out;
}

std::vector<fs::path> export_positional_heatmaps(const ModelParams& params,
                                                 const ModelConfig& config, std::size_t n,
                                                 const fs::path& out_dir) {
  const std::vector<Eigen::MatrixXd> maps = positional_heatmaps(params, config, n);
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (std::size_t h = 0; h < maps.size(); ++h) {
    const std::string stem = "head_" + std::to_string(h);
    write_matrix_csv(maps[h], out_dir / (stem + ".csv"));
    write_pgm(maps[h], out_dir / (stem + ".pgm"));
    written.push_back(out_dir / (stem + ".csv"));
  }
  return written;
}

// Toeplitz structure --------------------------------------------------------

std::size_t toeplitz_order(std::span<const double> b) {
  if (b.size() % 2 == 0) {
    throw std::invalid_argument("Toeplitz values must number 2n - 1, got " + std::to_string(b.size()));
  }
  return (b.size() + 1) / 2;
}

namespace {

// b_k for |k| <= n, with b_{-n} = b_n = b_0.
double b_at(std::span<const double> b, long k, long n) {
  if (k == n || k == -n) k = 0;
  return b[static_cast<std::size_t>(k + n - 1)];
}

}  // namespace

Eigen::MatrixXd toeplitz_from_values(std::span<const double> b) {
  const auto n = static_cast<long>(toeplitz_order(b));
  Eigen::MatrixXd m(n, n);
  for (long j = 0; j < n; ++j) {
    for (long k = 0; k < n; ++k) m(j, k) = b_at(b, k - j, n);
  }
  return m;
}

Eigen::MatrixXd embed_circulant(std::span<const double> b) {
  const auto n = static_cast<long>(toeplitz_order(b));
  Eigen::MatrixXd m(2 * n, 2 * n);
  for (long j = 0; j < 2 * n; ++j) {
    for (long k = 0; k < 2 * n; ++k) {
      const long off = k - j;
      if (off >= -n && off <= n) {
        m(j, k) = b_at(b, off, n);
      } else if (off > n) {
        m(j, k) = b_at(b, off - 2 * n, n);
      } else {
        m(j, k) = b_at(b, off + 2 * n, n);
      }
    }
  }
  return m;
}

Eigen::MatrixXcd ToeplitzFactorization::reconstruct() const {
  return g * d.asDiagonal() * g.adjoint();
}

double reconstruction_error(const ToeplitzFactorization& f) {
  const Eigen::MatrixXcd diff = toeplitz_from_values(f.b).cast<std::complex<double>>() - f.reconstruct();
  return diff.cwiseAbs().rowwise().sum().maxCoeff();
}

ToeplitzFactorization factorize_toeplitz(std::span<const double> b) {
  const std::size_t n = toeplitz_order(b);
  const std::size_t m = 2 * n;
  const Eigen::MatrixXd c = embed_circulant(b);
  const double pi_over_n = std::numbers::pi / static_cast<double>(n);

  ToeplitzFactorization f;
  f.n = n;
  f.b.assign(b.begin(), b.end());
  f.g.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  f.d.resize(static_cast<Eigen::Index>(m));
  const double norm = 1.0 / std::sqrt(static_cast<double>(m));
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t freq = (j + 1) % m;
    std::complex<double> lambda = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
      lambda += c(0, static_cast<Eigen::Index>(r)) *
                std::polar(1.0, pi_over_n * static_cast<double>((freq * r) % m));
    }
    f.d(static_cast<Eigen::Index>(j)) = lambda;
    for (std::size_t k = 0; k < n; ++k) {
      f.g(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) =
          norm * std::polar(1.0, pi_over_n * static_cast<double>(((j + 1) * k) % m));
    }
  }
  const double err = reconstruction_error(f);
  if (!(err <= kToeplitzTolerance)) {
    std::ostringstream msg;
    msg << "Toeplitz factorization of order " << n << " misses by " << err;
    throw FactorizationError(msg.str());
  }
  return f;
}

// Rank and subspace diagnostics ---------------------------------------------

std::size_t numerical_rank(const Eigen::MatrixXd& m, double tol) {
  if (m.size() == 0) return 0;
  const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
  const double top = sv(0);
  if (top == 0.0) return 0;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) >= tol * top ? 1 : 0;
  return rank;
}

Eigen::MatrixXd toeplitz_projection(const Eigen::MatrixXd& m) {
  const Eigen::Index rows = m.rows(), cols = m.cols();
  Eigen::MatrixXd out(rows, cols);
  for (Eigen::Index off = -(rows - 1); off < cols; ++off) {
    double total = 0.0;
    Eigen::Index count = 0;
    for (Eigen::Index r = std::max<Eigen::Index>(0, -off); r < rows && r + off < cols; ++r, ++count) {
      total += m(r, r + off);
    }
    const double mean = count ? total / static_cast<double>(count) : 0.0;
    for (Eigen::Index r = std::max<Eigen::Index>(0, -off); r < rows && r + off < cols; ++r) {
      out(r, r + off) = mean;
    }
  }
  return out;
}

double toeplitz_distance(const Eigen::MatrixXd& m) { return (m - toeplitz_projection(m)).norm(); }

double diagonal_deviation(const Eigen::MatrixXd& m) {
  double worst = 0.0;
  for (Eigen::Index r = 0; r + 1 < m.rows(); ++r) {
    for (Eigen::Index c = 0; c + 1 < m.cols(); ++c) {
      worst = std::max(worst, std::abs(m(r, c) - m(r + 1, c + 1)));
    }
  }
  return worst;
}

bool SubspaceReport::ranks_within_bound() const {
  for (const HeadSubspace& h : heads) {
    if (h.absolute_rank > h.rank_bound) return false;
  }
  return true;
}

SubspaceReport subspace_diagnostics(const ModelParams& params, const ModelConfig& config,
                                    std::size_t n) {
  const VariantTraits traits = variant_traits(config.variant);
  if (!traits.untied_correlation) {
    throw UnsupportedVariant("subspace diagnostics need an untied variant, got " +
                             std::string(variant_name(config.variant)));
  }
  const PositionalCorrelation absolute = compute_untied_correlation(params.positions, params.projection, n);
  SubspaceReport report;
  report.n = n;
  for (std::size_t h = 0; h < absolute.heads.size(); ++h) {
    HeadSubspace head;
    const Eigen::MatrixXd slice = to_matrix(absolute.heads[h]);
    head.absolute_rank = numerical_rank(slice);
    head.rank_bound = config.head_dim();
    head.absolute_toeplitz_distance = toeplitz_distance(slice);
    if (traits.relative_bias) {
      const Eigen::MatrixXd rel = to_matrix(relative_bias_matrix(params.relative_bias, h, n));
      head.relative_diagonal_deviation = diagonal_deviation(rel);
      head.relative_toeplitz_distance = toeplitz_distance(rel);
    }
    report.heads.push_back(head);
  }
  return report;
}

nlohmann::json to_json(const SubspaceReport& report) {
  nlohmann::json j;
  j["n"] = report.n;
  j["ranks_within_bound"] = report.ranks_within_bound();
  j["heads"] = nlohmann::json::array();
  for (const HeadSubspace& h : report.heads) {
    nlohmann::json e{{"absolute_rank", h.absolute_rank},
                     {"rank_bound", h.rank_bound},
                     {"absolute_toeplitz_distance", h.absolute_toeplitz_distance}};
    if (h.relative_diagonal_deviation) e["relative_diagonal_deviation"] = *h.relative_diagonal_deviation;
    if (h.relative_toeplitz_distance) e["relative_toeplitz_distance"] = *h.relative_toeplitz_distance;
    j["heads"].push_back(std::move(e));
  }
  return j;
}

}  // namespace tupe
