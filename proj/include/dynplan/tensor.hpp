#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dynplan {

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;

inline constexpr NodeId kNoNode = -1;
inline constexpr double kLayerNormEps = 1e-5;

class Tape;

// Dense row-major tensor of doubles. The payload is immutable and shared, so
// copies are cheap and safe to hand across threads. A tensor produced while
// recording carries the id of its tape node.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::span<const double> data() const;
  std::size_t size() const;
  std::size_t rank() const { return shape_.size(); }

  // 2-D view of the shape: rank 0 is 1x1, rank 1 is 1xn.
  std::size_t rows() const;
  std::size_t cols() const;

  double item() const;
  double at(std::size_t r, std::size_t c) const;
  std::vector<double> row_values(std::size_t r) const;

  bool empty() const { return data_ == nullptr; }
  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  NodeId node() const { return node_; }

  // Same values, no tape attachment.
  Tensor detach() const;

  bool bitwise_equal(const Tensor& other) const;

 private:
  friend class Tape;
  friend Tensor make_recorded(Tensor value, Tape* tape, NodeId node);

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  NodeId node_ = kNoNode;
};

std::string shape_string(const Shape& shape);

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  add_scalar,
  sigmoid,
  log_sigmoid,
  log,
  softmax,
  layer_norm,
  gelu,
  transpose,
  slice_row,
  slice_cols,
  concat_cols,
  gather_rows,
  mean,
  sum,
  cross_entropy,
};

std::string op_name(OpKind kind);

// Non-tensor arguments of a primitive.
struct OpAttrs {
  double factor = 0.0;          // scale, add_scalar
  std::size_t index = 0;        // slice_row row, slice_cols begin, cross_entropy label
  std::size_t count = 0;        // slice_cols width
  std::vector<std::size_t> ids; // gather_rows
  double eps = kLayerNormEps;   // layer_norm
};

struct TapeNode {
  OpKind kind = OpKind::leaf;
  std::vector<NodeId> inputs;        // kNoNode for constants
  std::vector<Tensor> saved_inputs;  // detached input values
  Tensor output;                     // detached output value
  OpAttrs attrs;
};

// Append-only record of primitive applications. Confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a differentiable input and returns it attached to this tape.
  Tensor leaf(const Tensor& value);

  const std::vector<TapeNode>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  // Re-runs every recorded node from the leaf values and returns the
  // recomputed outputs, indexed by node id.
  std::vector<Tensor> replay() const;

  NodeId record(TapeNode node);

 private:
  std::vector<TapeNode> nodes_;
};

// Forward evaluation of one primitive. Records a tape node when any input is
// tape-attached; all attached inputs must share a tape.
Tensor apply_primitive(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

// Gradient of a scalar with respect to every leaf on the tape.
class GradientMap {
 public:
  const Tensor& at(NodeId node) const;
  const Tensor& of(const Tensor& leaf) const { return at(leaf.node()); }
  bool contains(NodeId node) const { return grads_.count(node) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend GradientMap backward(const Tape& tape, const Tensor& loss);
  std::unordered_map<NodeId, Tensor> grads_;
};

GradientMap backward(const Tape& tape, const Tensor& loss);

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

// Max over all parameter entries of |analytic - numeric| / max(1, |numeric|)
// using central differences.
double finite_diff_check(const ScalarFn& f, std::span<const Tensor> params, double step);

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
// a + b; b may match a, be a single row broadcast over a's rows, or a scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// Elementwise; either side may be a scalar.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softmax(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);
Tensor gelu(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor slice_row(const Tensor& a, std::size_t row);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& table, std::vector<std::size_t> ids);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a);
// -log softmax(logits)[label] for a single row of logits.
Tensor cross_entropy(const Tensor& logits, std::size_t label);

}  // namespace ops

// Raw kernel: c[m x n] = a[m x k] * b[k x n], row-major.
void matmul_kernel(std::span<const double> a, std::span<const double> b, std::span<double> c,
                   std::size_t m, std::size_t k, std::size_t n);

}  // namespace dynplan
