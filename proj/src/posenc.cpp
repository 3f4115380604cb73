#include "tupe/posenc.hpp"

#include <algorithm>
#include <cmath>

namespace tupe {

Tensor PositionalProjection::query(std::size_t head) const {
  const std::size_t w = head_dim();
  return slice_cols(u_q, head * w, (head + 1) * w);
}

Tensor PositionalProjection::key(std::size_t head) const {
  const std::size_t w = head_dim();
  return slice_cols(u_k, head * w, (head + 1) * w);
}

int clip_distance(long j_minus_i, int t) {
  if (t < 1) throw std::invalid_argument("clip range t must be >= 1");
  return static_cast<int>(std::clamp<long>(j_minus_i, -t, t));
}

double untied_scale(std::size_t head_dim) {
  return 1.0 / std::sqrt(2.0 * static_cast<double>(head_dim));
}

Tensor normalized_positions(const AbsolutePositionTable& table, std::size_t n,
                            bool apply_layer_norm) {
  if (n == 0) throw std::invalid_argument("sequence length must be positive");
  if (n > table.max_length()) {
    throw std::out_of_range("sequence length " + std::to_string(n) + " exceeds n_max " +
                            std::to_string(table.max_length()));
  }
  Tensor rows = slice_rows(table.table, 0, n);
  if (!apply_layer_norm) return rows;
  return layer_norm(rows, table.ln_gain, table.ln_bias);
}

PositionalCorrelation compute_untied_correlation(const AbsolutePositionTable& table,
                                                 const PositionalProjection& proj,
                                                 std::size_t n, bool apply_layer_norm) {
  if (proj.heads == 0 || proj.u_q.cols() % proj.heads != 0) {
    throw DimensionError("positional projection width is not divisible by the head count");
  }
  const Tensor p = normalized_positions(table, n, apply_layer_norm);
  const Tensor pq = matmul(p, proj.u_q);
  const Tensor pk = matmul(p, proj.u_k);
  const std::size_t w = proj.head_dim();
  const double s = untied_scale(w);
  PositionalCorrelation out;
  out.tag = "untied";
  for (std::size_t h = 0; h < proj.heads; ++h) {
    out.heads.push_back(
        scale(matmul_nt(slice_cols(pq, h * w, (h + 1) * w), slice_cols(pk, h * w, (h + 1) * w)), s));
  }
  out.parts["pos-pos"] = out.heads;
  return out;
}

Tensor relative_bias_matrix(const RelativeBiasTable& bias, std::size_t head, std::size_t n) {
  const std::size_t width = 2 * static_cast<std::size_t>(bias.clip) + 1;
  if (bias.bias.cols() != width) {
    throw DimensionError("relative bias table has " + std::to_string(bias.bias.cols()) +
                         " columns, clip range " + std::to_string(bias.clip) + " needs " +
                         std::to_string(width));
  }
  if (head >= bias.bias.rows()) throw std::out_of_range("relative bias head out of range");
  std::vector<std::size_t> index(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const int c = clip_distance(static_cast<long>(j) - static_cast<long>(i), bias.clip);
      index[i * n + j] = head * width + static_cast<std::size_t>(c + bias.clip);
    }
  }
  return gather(bias.bias, std::move(index), {n, n});
}

PositionalCorrelation add_relative_bias(const PositionalCorrelation& v,
                                        const RelativeBiasTable& bias) {
  if (v.heads.size() != bias.bias.rows()) {
    throw DimensionError("relative bias has " + std::to_string(bias.bias.rows()) +
                         " heads, correlation has " + std::to_string(v.heads.size()));
  }
  PositionalCorrelation out = v;
  out.tag = v.tag + "+rel";
  std::vector<Tensor>& rel = out.parts["rel-bias"];
  for (std::size_t h = 0; h < v.heads.size(); ++h) {
    Tensor b = relative_bias_matrix(bias, h, v.length());
    rel.push_back(b);
    out.heads[h] = add(v.heads[h], b);
  }
  return out;
}

std::pair<Tensor, Tensor> compute_theta(const ResetParams& reset,
                                        const PositionalProjection& proj, std::size_t head) {
  const Tensor uq = proj.query(head);
  const Tensor uk = proj.key(head);
  const double s = untied_scale(proj.head_dim());
  auto theta = [&](const Tensor& p) {
    return scale(matmul_nt(matmul(p, uq), matmul(p, uk)), s);
  };
  return {theta(reset.p_theta1), theta(reset.p_theta2)};
}

Tensor reset_cls(const Tensor& v, const Tensor& theta1, const Tensor& theta2) {
  if (v.rank() != 2 || v.rows() != v.cols()) {
    throw DimensionError("reset_cls: expected a square matrix, got " + shape_str(v.shape()));
  }
  if (theta1.numel() != 1 || theta2.numel() != 1) {
    throw DimensionError("reset_cls: theta values must be scalars");
  }
  const std::size_t n = v.rows();
  if (n == 0) throw std::invalid_argument("reset_cls: empty correlation (n = 0)");
  std::vector<double> out(v.data().begin(), v.data().end());
  const double t1 = theta1.item();
  const double t2 = theta2.item();
  for (std::size_t j = 0; j < n; ++j) out[j] = t1;
  for (std::size_t i = 1; i < n; ++i) out[i * n] = t2;
  return Tensor::make_result("reset_cls", {n, n}, std::move(out), {v, theta1, theta2},
                             [n](detail::Node& self) {
                               const auto& g = self.grad;
                               detail::Node& vin = *self.inputs[0];
                               if (vin.requires_grad) {
                                 vin.ensure_grad();
                                 for (std::size_t i = 1; i < n; ++i) {
                                   for (std::size_t j = 1; j < n; ++j) vin.grad[i * n + j] += g[i * n + j];
                                 }
                               }
                               detail::Node& t1in = *self.inputs[1];
                               if (t1in.requires_grad) {
                                 t1in.ensure_grad();
                                 for (std::size_t j = 0; j < n; ++j) t1in.grad[0] += g[j];
                               }
                               detail::Node& t2in = *self.inputs[2];
                               if (t2in.requires_grad) {
                                 t2in.ensure_grad();
                                 for (std::size_t i = 1; i < n; ++i) t2in.grad[0] += g[i * n];
                               }
                             });
}

PositionalCorrelation reset_cls(const PositionalCorrelation& v,
                                const std::vector<Tensor>& theta1,
                                const std::vector<Tensor>& theta2) {
  if (v.heads.empty()) throw std::invalid_argument("reset_cls: empty correlation (n = 0)");
  if (theta1.size() != v.heads.size() || theta2.size() != v.heads.size()) {
    throw DimensionError("reset_cls: need one theta pair per head");
  }
  PositionalCorrelation out = v;
  out.tag = v.tag + "+reset";
  std::vector<Tensor>& delta = out.parts["reset-applied"];
  for (std::size_t h = 0; h < v.heads.size(); ++h) {
    out.heads[h] = reset_cls(v.heads[h], theta1[h], theta2[h]);
    std::vector<double> d(out.heads[h].data().begin(), out.heads[h].data().end());
    const auto before = v.heads[h].data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] -= before[k];
    delta.push_back(Tensor::constant(out.heads[h].shape(), std::move(d)));
  }
  return out;
}

}  // namespace tupe
