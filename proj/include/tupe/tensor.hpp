#pragma once

// Dense float64 tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle onto an immutable node. Nodes produced by an
// operation remember their inputs and a backward rule; calling backward() on
// a scalar result walks the reachable graph once in reverse topological order
// and leaves d(root)/d(node) in every node that requires a gradient.
//
// Only the shapes the model needs are supported: 2-D matrices for the
// algebra, row-wise reductions, and flat gathers. There is no broadcasting.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tupe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes do not fit an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces or receives non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized like value once backward touches it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  /// Constant with the given shape and row-major data.
  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double v);
  /// Trainable leaf. Its data may be overwritten in place between steps
  /// through mutable_data(); no graph may be alive while that happens.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return node().value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node().value; }
  std::span<double> mutable_data();
  /// Empty until backward() reaches this tensor.
  std::span<const double> grad() const { return node().grad; }
  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().inputs.empty(); }
  const char* op_name() const { return node().op; }

  double item() const;
  double at(std::size_t r, std::size_t c) const;

  /// Same values, no history.
  Tensor detach() const;

  /// Identity of the underlying node (used by caching checks).
  const void* id() const { return node_.get(); }

  // Building blocks for operations defined outside this file.
  using BackwardFn = std::function<void(detail::Node& self)>;
  static Tensor make_result(const char* op, Shape shape,
                            std::vector<double> value,
                            std::vector<Tensor> inputs, BackwardFn backward);
  detail::Node& node() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
  friend void backward(const Tensor& root);
};

/// Reverse pass from a single-element tensor. Gradients of every node
/// reachable from `root` are reset and then accumulated.
void backward(const Tensor& root);

// Linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// a[m×n] + bias[n] added to every row.
Tensor add_row(const Tensor& a, const Tensor& bias);
/// 0.5 x (1 + tanh(sqrt(2/π) (x + 0.044715 x³))).
Tensor gelu(const Tensor& a);
Tensor sum(const Tensor& a);

// Row-wise --------------------------------------------------------------

/// Row softmax. `masked` (optional, m×n, nonzero = excluded) entries come out
/// exactly 0. A row with no unmasked entry is an error.
Tensor softmax_rows(const Tensor& a, std::span<const std::uint8_t> masked = {});

inline constexpr double kLayerNormEps = 1e-5;
/// Normalises each row of a[m×d], then applies gain[d] and bias[d].
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

/// Mean negative log-likelihood over rows whose label is >= 0. Returns 0
/// (with no history) when no row is labelled.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Inverted dropout. The keep mask is a pure function of (key, element).
/// With `row_ids`, row r of `a` draws the mask of row row_ids[r] of the
/// larger matrix it was taken from.
Tensor dropout(const Tensor& a, double p, std::uint64_t key,
               std::span<const std::size_t> row_ids = {});

// Attention -------------------------------------------------------------

/// Scaled dot-product attention for B stacked sequences of length n.
/// k and v are [B·n x H·w]; for item b and head h (rows b·n.., columns h·w..)
///   S = s · q kᵀ + bias[h],  P = softmax(S),  out = dropout(P) v
/// `bias` is empty or holds one n x n tensor per head shared by all items.
/// `key_pad` (optional, B·n, nonzero = excluded key) masks columns of S. The
/// dropout mask of (b, h) is drawn under mix_key({key, b, h}), one counter
/// per (query position, key position).
///
/// By default q has a row for every key row. A strictly increasing
/// `query_rows` selects which of the B·n positions q holds instead; the
/// result then has one row per query.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            std::size_t n, double s, const std::vector<Tensor>& bias,
                            std::span<const std::uint8_t> key_pad, double dropout_p,
                            std::uint64_t key, std::span<const std::size_t> query_rows = {});

// Indexing --------------------------------------------------------------

/// Rows of table[V×d] selected by ids.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
/// out.flat[k] = a.flat[index[k]]; backward scatter-adds.
Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape out_shape);
Tensor slice(const Tensor& a, std::size_t row_begin, std::size_t row_end,
             std::size_t col_begin, std::size_t col_end);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

namespace testing {

/// Scales the softmax backward rule by (1 + factor) while alive. Used only
/// as a negative control for gradient checking.
class ScopedBackwardFault {
 public:
  explicit ScopedBackwardFault(double factor);
  ~ScopedBackwardFault();
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;

 private:
  double previous_;
};

}  // namespace testing

}  // namespace tupe
