#include "tupe/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "tupe/rng.hpp"

namespace tupe {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

double g_softmax_fault = 0.0;

ConstMap as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MutMap as_mut(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(a.shape()));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

// Gradient sink of input k, or nullptr when that input does not need one.
std::vector<double>* sink(detail::Node& self, std::size_t k) {
  detail::Node& in = *self.inputs[k];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return &in.grad;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Tensor ----------------------------------------------------------------

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_str(shape));
  }
  if (shape.empty() || shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t = constant(std::move(shape), std::move(data));
  t.node_->requires_grad = true;
  return t;
}

detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("use of an undefined Tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::rows() const {
  const Shape& s = shape();
  return s.size() == 1 ? 1 : s[0];
}

std::size_t Tensor::cols() const {
  const Shape& s = shape();
  return s.back();
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node().value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() needs a single element, got shape " + shape_str(shape()));
  }
  return node().value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_matrix("at", *this);
  if (r >= rows() || c >= cols()) throw std::out_of_range("Tensor::at index out of range");
  return node().value[r * cols() + c];
}

Tensor Tensor::detach() const { return constant(shape(), node().value); }

Tensor Tensor::make_result(const char* op, Shape shape, std::vector<double> value,
                           std::vector<Tensor> inputs, BackwardFn backward) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (Tensor& t : inputs) n->inputs.push_back(std::move(t.node_));
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

void backward(const Tensor& root) {
  detail::Node& r = root.node();
  if (r.value.size() != 1) {
    throw DimensionError("backward() needs a scalar root, got shape " + shape_str(r.shape));
  }
  // Iterative post-order DFS; `order` ends up topologically sorted.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  if (r.requires_grad) {
    stack.emplace_back(&r, 0);
    seen.insert(&r);
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) n->grad.assign(n->value.size(), 0.0);
  if (order.empty()) return;
  r.grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// Linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  as_mut(out, m, n).noalias() = as_mat(a.node().value, m, k) * as_mat(b.node().value, k, n);
  return Tensor::make_result("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const auto dc = as_mat(self.grad, m, n);
    if (auto* ga = sink(self, 0)) {
      as_mut(*ga, m, k).noalias() += dc * as_mat(self.inputs[1]->value, k, n).transpose();
    }
    if (auto* gb = sink(self, 1)) {
      as_mut(*gb, k, n).noalias() += as_mat(self.inputs[0]->value, m, k).transpose() * dc;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix("matmul_nt", a);
  require_matrix("matmul_nt", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  as_mut(out, m, n).noalias() =
      as_mat(a.node().value, m, k) * as_mat(b.node().value, n, k).transpose();
  return Tensor::make_result("matmul_nt", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const auto dc = as_mat(self.grad, m, n);
    if (auto* ga = sink(self, 0)) {
      as_mut(*ga, m, k).noalias() += dc * as_mat(self.inputs[1]->value, n, k);
    }
    if (auto* gb = sink(self, 1)) {
      as_mut(*gb, n, k).noalias() += dc.transpose() * as_mat(self.inputs[0]->value, m, k);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  as_mut(out, n, m) = as_mat(a.node().value, m, n).transpose();
  return Tensor::make_result("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    if (auto* ga = sink(self, 0)) as_mut(*ga, m, n) += as_mat(self.grad, n, m).transpose();
  });
}

// Elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = sink(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return Tensor::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return Tensor::make_result("scale", a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_matrix("add_row", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not fit rows of " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  }
  return Tensor::make_result("add_row", a.shape(), std::move(out), {a, bias}, [m, n](detail::Node& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = sink(self, 1)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i * n + j];
      }
    }
  });
}

Tensor gelu(const Tensor& a) {
  // 0.5 x (1 + tanh(u)), u = c (x + k x³); tanh(u) = 1 - 2 / (e^{2u} + 1).
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double k = 0.044715;
  const std::size_t size = a.numel();
  const Eigen::ArrayXd x =
      Eigen::Map<const Eigen::ArrayXd>(a.data().data(), static_cast<Eigen::Index>(size));
  const Eigen::ArrayXd t = 1.0 - 2.0 / ((2.0 * c * (x + k * x.cube())).exp() + 1.0);  // tanh(u)
  std::vector<double> out(size);
  auto slope = std::make_shared<std::vector<double>>(size);
  Eigen::Map<Eigen::ArrayXd>(out.data(), x.size()) = 0.5 * x * (1.0 + t);
  Eigen::Map<Eigen::ArrayXd>(slope->data(), x.size()) =
      0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * c * (1.0 + 3.0 * k * x.square());
  return Tensor::make_result("gelu", a.shape(), std::move(out), {a}, [slope](detail::Node& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (*slope)[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result("sum", {1}, {s}, {a}, [](detail::Node& self) {
    if (auto* g = sink(self, 0)) {
      for (double& v : *g) v += self.grad[0];
    }
  });
}

// Row-wise --------------------------------------------------------------

Tensor softmax_rows(const Tensor& a, std::span<const std::uint8_t> masked) {
  require_matrix("softmax_rows", a);
  const std::size_t m = a.rows(), n = a.cols();
  if (!masked.empty() && masked.size() != m * n) {
    throw DimensionError("softmax_rows: mask has " + std::to_string(masked.size()) +
                         " entries for shape " + shape_str(a.shape()));
  }
  const auto x = a.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (!masked.empty() && masked[i * n + j]) continue;
      if (!std::isfinite(x[i * n + j])) {
        throw NumericError("softmax_rows: non-finite value in row " + std::to_string(i));
      }
      mx = std::max(mx, x[i * n + j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw NumericError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (masked.empty() || !masked[i * n + j]) {
        out[i * n + j] = std::exp(x[i * n + j] - mx);
        z += out[i * n + j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  return Tensor::make_result("softmax_rows", a.shape(), std::move(out), {a}, [m, n](detail::Node& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    const auto& y = self.value;
    const double fault = 1.0 + g_softmax_fault;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        (*g)[i * n + j] += fault * y[i * n + j] * (self.grad[i * n + j] - dot);
      }
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = a.cols();
  if (d == 0 || a.numel() == 0) throw DimensionError("layer_norm: empty feature dimension");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match feature dim " +
                         std::to_string(d));
  }
  const std::size_t m = a.numel() / d;
  const auto x = a.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> out(m * d);
  auto xhat = std::make_shared<std::vector<double>>(m * d);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[i * d + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (x[i * d + j] - mean) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor::make_result(
      "layer_norm", a.shape(), std::move(out), {a, gain, bias},
      [m, d, xhat, inv_std](detail::Node& self) {
        const auto& gv = self.inputs[1]->value;
        const auto& dy = self.grad;
        if (auto* gx = sink(self, 0)) {
          for (std::size_t i = 0; i < m; ++i) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[i * d + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[i * d + j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[i * d + j] * gv[j];
              (*gx)[i * d + j] +=
                  (*inv_std)[i] * (dh - mean_dh - (*xhat)[i * d + j] * mean_dh_h);
            }
          }
        }
        if (auto* gg = sink(self, 1)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[i * d + j] * (*xhat)[i * d + j];
          }
        }
        if (auto* gb = sink(self, 2)) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[i * d + j];
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_matrix("cross_entropy", logits);
  const std::size_t m = logits.rows(), v = logits.cols();
  if (labels.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
  }
  const auto x = logits.data();
  auto probs = std::make_shared<std::vector<double>>(m * v, 0.0);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int y = labels[i];
    if (y < 0) continue;
    if (static_cast<std::size_t>(y) >= v) {
      throw DimensionError("cross_entropy: label " + std::to_string(y) + " outside " +
                           std::to_string(v) + " classes");
    }
    double mx = x[i * v];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[i * v + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double e = std::exp(x[i * v + j] - mx);
      (*probs)[i * v + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= z;
    total += (mx + std::log(z)) - x[i * v + static_cast<std::size_t>(y)];
    ++count;
  }
  if (count == 0) return Tensor::scalar(0.0);
  const double inv = 1.0 / static_cast<double>(count);
  return Tensor::make_result("cross_entropy", {1}, {total * inv}, {logits},
                             [m, v, inv, probs, lab](detail::Node& self) {
                               auto* g = sink(self, 0);
                               if (!g) return;
                               const double s = self.grad[0] * inv;
                               for (std::size_t i = 0; i < m; ++i) {
                                 const int y = (*lab)[i];
                                 if (y < 0) continue;
                                 for (std::size_t j = 0; j < v; ++j) {
                                   (*g)[i * v + j] += s * (*probs)[i * v + j];
                                 }
                                 (*g)[i * v + static_cast<std::size_t>(y)] -= s;
                               }
                             });
}

Tensor dropout(const Tensor& a, double p, std::uint64_t key,
               std::span<const std::size_t> row_ids) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (!row_ids.empty()) {
    require_matrix("dropout", a);
    if (row_ids.size() != a.rows()) {
      throw DimensionError("dropout: " + std::to_string(row_ids.size()) + " row ids for " +
                           shape_str(a.shape()));
    }
  }
  if (p == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  auto factor = std::make_shared<std::vector<double>>(a.numel());
  std::vector<double> out(a.data().begin(), a.data().end());
  const std::size_t cols = row_ids.empty() ? 1 : a.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint64_t counter = row_ids.empty() ? i : row_ids[i / cols] * cols + i % cols;
    (*factor)[i] = counter_uniform(key, counter) < p ? 0.0 : keep_scale;
    out[i] *= (*factor)[i];
  }
  return Tensor::make_result("dropout", a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (*factor)[i];
    }
  });
}

// Attention -------------------------------------------------------------

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::size_t n, double s, const std::vector<Tensor>& bias,
                            std::span<const std::uint8_t> key_pad, double dropout_p,
                            std::uint64_t key, std::span<const std::size_t> query_rows) {
  require_matrix("multi_head_attention", q);
  require_matrix("multi_head_attention", k);
  require_same_shape("multi_head_attention", k, v);
  const std::size_t rows = k.rows(), width = k.cols(), nq = q.rows();
  if (heads == 0 || n == 0 || width % heads != 0 || rows % n != 0 || q.cols() != width) {
    throw DimensionError("multi_head_attention: " + shape_str(q.shape()) + " / " +
                         shape_str(k.shape()) + " do not split into " + std::to_string(heads) +
                         " heads of sequences of length " + std::to_string(n));
  }
  if (query_rows.empty() ? nq != rows : query_rows.size() != nq) {
    throw DimensionError("multi_head_attention: " + std::to_string(nq) +
                         " query rows do not match the query index");
  }
  for (std::size_t r = 1; r < query_rows.size(); ++r) {
    if (query_rows[r] <= query_rows[r - 1]) {
      throw std::invalid_argument("multi_head_attention: query rows must be strictly increasing");
    }
  }
  if (!query_rows.empty() && query_rows.back() >= rows) {
    throw std::out_of_range("multi_head_attention: query row outside the batch");
  }
  if (!bias.empty() && bias.size() != heads) {
    throw DimensionError("multi_head_attention: " + std::to_string(bias.size()) +
                         " bias matrices for " + std::to_string(heads) + " heads");
  }
  for (const Tensor& b : bias) {
    if (b.shape() != Shape{n, n}) {
      throw DimensionError("multi_head_attention: bias " + shape_str(b.shape()) + " is not " +
                           std::to_string(n) + "x" + std::to_string(n));
    }
  }
  if (!key_pad.empty() && key_pad.size() != rows) {
    throw DimensionError("multi_head_attention: key padding covers " +
                         std::to_string(key_pad.size()) + " of " + std::to_string(rows) + " rows");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw std::invalid_argument("multi_head_attention: dropout must lie in [0, 1)");
  }
  const std::size_t items = rows / n, w = width / heads;
  const auto ix = [](std::size_t i) { return static_cast<Eigen::Index>(i); };

  // Query row r is position pos[r] of item item_of(r); item b owns the
  // consecutive query rows [first[b], first[b + 1]).
  auto pos = std::make_shared<std::vector<std::size_t>>(nq);
  auto first = std::make_shared<std::vector<std::size_t>>(items + 1, 0);
  for (std::size_t r = 0; r < nq; ++r) {
    const std::size_t g = query_rows.empty() ? r : query_rows[r];
    (*pos)[r] = g % n;
    ++(*first)[g / n + 1];
  }
  for (std::size_t b = 0; b < items; ++b) (*first)[b + 1] += (*first)[b];

  // Head h keeps its probabilities in rows [h·nq, (h+1)·nq) of an n-column
  // plane; factor holds the dropout multipliers (empty without dropout).
  auto probs = std::make_shared<std::vector<double>>(heads * nq * n);
  auto factor = std::make_shared<std::vector<double>>();
  if (dropout_p > 0.0) factor->resize(probs->size());
  const double keep_scale = 1.0 / (1.0 - dropout_p);

  const ConstMap qm = as_mat(q.node().value, nq, width);
  const ConstMap km = as_mat(k.node().value, rows, width);
  const ConstMap vm = as_mat(v.node().value, rows, width);
  std::vector<double> out(nq * width);
  MutMap om = as_mut(out, nq, width);
  RowMat dropped;
  // Aligned scratch: exp results do not depend on where a row lives.
  Eigen::ArrayXd scratch(static_cast<Eigen::Index>(n));
  for (std::size_t b = 0; b < items; ++b) {
    const std::size_t r0 = (*first)[b], m = (*first)[b + 1] - r0;
    if (m == 0) continue;
    for (std::size_t h = 0; h < heads; ++h) {
      MutMap p(probs->data() + (h * nq + r0) * n, ix(m), ix(n));
      p.noalias() = qm.block(ix(r0), ix(h * w), ix(m), ix(w)) *
                    km.block(ix(b * n), ix(h * w), ix(n), ix(w)).transpose();
      p *= s;
      if (!bias.empty()) {
        const ConstMap bh = as_mat(bias[h].node().value, n, n);
        for (std::size_t r = 0; r < m; ++r) p.row(ix(r)) += bh.row(ix((*pos)[r0 + r]));
      }
      for (std::size_t r = 0; r < m; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          if (!key_pad.empty() && key_pad[b * n + j]) continue;
          if (!std::isfinite(p(ix(r), ix(j)))) {
            throw NumericError("multi_head_attention: non-finite score in item " + std::to_string(b));
          }
          mx = std::max(mx, p(ix(r), ix(j)));
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
          throw NumericError("multi_head_attention: item " + std::to_string(b) +
                             " has no unmasked key");
        }
        scratch = p.row(ix(r)).array() - mx;
        scratch = scratch.exp();
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!key_pad.empty() && key_pad[b * n + j]) scratch[ix(j)] = 0.0;
          z += scratch[ix(j)];
        }
        p.row(ix(r)) = scratch.matrix().transpose() / z;
      }
      if (dropout_p > 0.0) {
        // Counter i·n + j, so a row's mask does not depend on which rows are queried.
        const std::uint64_t k_bh = mix_key({key, b, h});
        MutMap f(factor->data() + (h * nq + r0) * n, ix(m), ix(n));
        for (std::size_t r = 0; r < m; ++r) {
          for (std::size_t j = 0; j < n; ++j) {
            f(ix(r), ix(j)) = counter_uniform(k_bh, (*pos)[r0 + r] * n + j) < dropout_p ? 0.0 : keep_scale;
          }
        }
        dropped = p.cwiseProduct(f);
      } else {
        dropped = p;
      }
      om.block(ix(r0), ix(h * w), ix(m), ix(w)).noalias() =
          dropped * vm.block(ix(b * n), ix(h * w), ix(n), ix(w));
    }
  }

  std::vector<Tensor> inputs{q, k, v};
  inputs.insert(inputs.end(), bias.begin(), bias.end());
  return Tensor::make_result(
      "multi_head_attention", {nq, width}, std::move(out), std::move(inputs),
      [=](detail::Node& self) {
        const ConstMap qm = as_mat(self.inputs[0]->value, nq, width);
        const ConstMap km = as_mat(self.inputs[1]->value, rows, width);
        const ConstMap vm = as_mat(self.inputs[2]->value, rows, width);
        const ConstMap dout = as_mat(self.grad, nq, width);
        auto* gq = sink(self, 0);
        auto* gk = sink(self, 1);
        auto* gv = sink(self, 2);
        std::vector<std::vector<double>*> gbias;
        for (std::size_t h = 0; h < bias.size(); ++h) gbias.push_back(sink(self, 3 + h));
        const bool any_bias = std::any_of(gbias.begin(), gbias.end(), [](auto* g) { return g; });
        const double fault = 1.0 + g_softmax_fault;
        RowMat pd, dp;
        for (std::size_t b = 0; b < items; ++b) {
          const std::size_t r0 = (*first)[b], m = (*first)[b + 1] - r0;
          if (m == 0) continue;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t base = (h * nq + r0) * n;
            const ConstMap p(probs->data() + base, ix(m), ix(n));
            const auto dob = dout.block(ix(r0), ix(h * w), ix(m), ix(w));
            if (factor->empty()) {
              pd = p;
            } else {
              pd = p.cwiseProduct(ConstMap(factor->data() + base, ix(m), ix(n)));
            }
            if (gv) {
              as_mut(*gv, rows, width).block(ix(b * n), ix(h * w), ix(n), ix(w)).noalias() +=
                  pd.transpose() * dob;
            }
            if (!gq && !gk && !any_bias) continue;
            dp.noalias() = dob * vm.block(ix(b * n), ix(h * w), ix(n), ix(w)).transpose();
            if (!factor->empty()) dp = dp.cwiseProduct(ConstMap(factor->data() + base, ix(m), ix(n)));
            // dS = P ∘ (dP - rowsum(P ∘ dP)), in place.
            for (std::size_t r = 0; r < m; ++r) {
              double dot = 0.0;
              for (std::size_t j = 0; j < n; ++j) dot += p(ix(r), ix(j)) * dp(ix(r), ix(j));
              dp.row(ix(r)) = fault * (p.row(ix(r)).array() * (dp.row(ix(r)).array() - dot)).matrix();
            }
            if (!gbias.empty() && gbias[h]) {
              MutMap gb = as_mut(*gbias[h], n, n);
              for (std::size_t r = 0; r < m; ++r) gb.row(ix((*pos)[r0 + r])) += dp.row(ix(r));
            }
            if (gq) {
              as_mut(*gq, nq, width).block(ix(r0), ix(h * w), ix(m), ix(w)).noalias() +=
                  s * dp * km.block(ix(b * n), ix(h * w), ix(n), ix(w));
            }
            if (gk) {
              as_mut(*gk, rows, width).block(ix(b * n), ix(h * w), ix(n), ix(w)).noalias() +=
                  s * dp.transpose() * qm.block(ix(r0), ix(h * w), ix(m), ix(w));
            }
          }
        }
      });
}

// Indexing --------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_matrix("gather_rows", table);
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t v = table.rows(), d = table.cols();
  auto idx = std::make_shared<std::vector<std::size_t>>(ids.size());
  std::vector<double> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(v) + " rows");
    }
    (*idx)[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>((*idx)[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return Tensor::make_result("gather_rows", {ids.size(), d}, std::move(out), {table},
                             [idx, d](detail::Node& self) {
                               auto* g = sink(self, 0);
                               if (!g) return;
                               for (std::size_t i = 0; i < idx->size(); ++i) {
                                 for (std::size_t j = 0; j < d; ++j) {
                                   (*g)[(*idx)[i] * d + j] += self.grad[i * d + j];
                                 }
                               }
                             });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " +
                         shape_str(out_shape));
  }
  const auto av = a.data();
  std::vector<double> out(index.size());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= av.size()) throw std::out_of_range("gather: index out of range");
    out[k] = av[index[k]];
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return Tensor::make_result("gather", std::move(out_shape), std::move(out), {a}, [idx](detail::Node& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t k = 0; k < idx->size(); ++k) (*g)[(*idx)[k]] += self.grad[k];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  require_matrix("slice", a);
  if (r0 >= r1 || c0 >= c1 || r1 > a.rows() || c1 > a.cols()) {
    throw DimensionError("slice: rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") outside " + shape_str(a.shape()));
  }
  const std::size_t n = a.cols(), h = r1 - r0, w = c1 - c0;
  std::vector<double> out(h * w);
  as_mut(out, h, w) = as_mat(a.node().value, a.rows(), n).block(
      static_cast<Eigen::Index>(r0), static_cast<Eigen::Index>(c0), static_cast<Eigen::Index>(h),
      static_cast<Eigen::Index>(w));
  const std::size_t m = a.rows();
  return Tensor::make_result("slice", {h, w}, std::move(out), {a}, [=](detail::Node& self) {
    if (auto* g = sink(self, 0)) {
      as_mut(*g, m, n).block(static_cast<Eigen::Index>(r0), static_cast<Eigen::Index>(c0),
                             static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w)) +=
          as_mat(self.grad, h, w);
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  return slice(a, begin, end, 0, a.cols());
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  return slice(a, 0, a.rows(), begin, end);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    require_matrix("concat_cols", p);
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t w = p.cols();
    const auto pv = p.data();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(i * n + off));
    }
    off += w;
  }
  return Tensor::make_result("concat_cols", {m, n}, std::move(out), parts, [m, n, offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto* g = sink(self, k);
      if (!g) continue;
      const std::size_t w = self.inputs[k]->shape.back();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[i * n + offsets[k] + j];
      }
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const Tensor& p : parts) {
    require_matrix("concat_rows", p);
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor::make_result("concat_rows", {m, n}, std::move(out), parts, [offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto* g = sink(self, k);
      if (!g) continue;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[k] + i];
    }
  });
}

namespace testing {

ScopedBackwardFault::ScopedBackwardFault(double factor) : previous_(g_softmax_fault) {
  g_softmax_fault = factor;
}

ScopedBackwardFault::~ScopedBackwardFault() { g_softmax_fault = previous_; }

}  // namespace testing

}  // namespace tupe
