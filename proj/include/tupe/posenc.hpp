#pragma once

// Positional parameters and the content-free correlation they produce.
//
// Positions are 0-based: row 0 of the table is the [CLS] slot. Every
// positional score here depends on positions and sequence length only,
// never on token identities.

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tupe/tensor.hpp"

namespace tupe {

/// One learnable vector per position, shared by all heads and layers, with
/// the affine parameters of the layer norm applied whenever it is read.
struct AbsolutePositionTable {
  Tensor table;    // [n_max x d]
  Tensor ln_gain;  // [d]
  Tensor ln_bias;  // [d]

  std::size_t max_length() const { return table.rows(); }
  std::size_t dim() const { return table.cols(); }
};

/// Per-head projections for positions, shared by every layer. Head h owns
/// columns [h*d_h, (h+1)*d_h) of both matrices.
struct PositionalProjection {
  Tensor u_q;  // [d x d]
  Tensor u_k;  // [d x d]
  std::size_t heads = 1;

  std::size_t head_dim() const { return u_q.cols() / heads; }
  Tensor query(std::size_t head) const;
  Tensor key(std::size_t head) const;
};

/// One scalar per head and clipped relative distance, shared by layers.
struct RelativeBiasTable {
  Tensor bias;  // [H x (2t+1)], column = clip(j - i, -t, t) + t
  int clip = 8;
};

/// Vectors whose projected self-correlation gives the [CLS] scalars.
struct ResetParams {
  Tensor p_theta1;  // [1 x d]
  Tensor p_theta2;  // [1 x d]
};

/// Content-free scores, one n x n matrix per head. `parts` keeps the
/// additive pieces ("pos-pos", "rel-bias", "reset-applied") whose sum is
/// `heads`.
struct PositionalCorrelation {
  std::vector<Tensor> heads;
  std::string tag;
  std::map<std::string, std::vector<Tensor>> parts;

  std::size_t length() const { return heads.empty() ? 0 : heads.front().rows(); }
};

int clip_distance(long j_minus_i, int t);

/// 1 / sqrt(2 * d_h): the untied content and positional terms each get this
/// factor so their sum keeps the magnitude of a single scaled product.
double untied_scale(std::size_t head_dim);

/// layer_norm(P[0..n)) or the raw rows when `apply_layer_norm` is false.
Tensor normalized_positions(const AbsolutePositionTable& table, std::size_t n,
                            bool apply_layer_norm = true);

/// V[h] = untied_scale * (P' U_Q[h]) (P' U_K[h])^T with P' = normalized rows.
PositionalCorrelation compute_untied_correlation(const AbsolutePositionTable& table,
                                                 const PositionalProjection& proj,
                                                 std::size_t n,
                                                 bool apply_layer_norm = true);

/// n x n Toeplitz lookup of head `head`: entry (i, j) = b[h][clip(j-i)+t].
Tensor relative_bias_matrix(const RelativeBiasTable& bias, std::size_t head, std::size_t n);

PositionalCorrelation add_relative_bias(const PositionalCorrelation& v,
                                        const RelativeBiasTable& bias);

/// (theta1, theta2) for one head, each a single-element tensor.
std::pair<Tensor, Tensor> compute_theta(const ResetParams& reset,
                                        const PositionalProjection& proj, std::size_t head);

/// Row 0 becomes theta1 (including (0,0)); column 0 below row 0 becomes
/// theta2; everything else is passed through untouched.
Tensor reset_cls(const Tensor& v, const Tensor& theta1, const Tensor& theta2);

/// Applies reset_cls to every head with that head's thetas.
PositionalCorrelation reset_cls(const PositionalCorrelation& v,
                                const std::vector<Tensor>& theta1,
                                const std::vector<Tensor>& theta2);

}  // namespace tupe
