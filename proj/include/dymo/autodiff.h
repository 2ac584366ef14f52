#ifndef DYMO_AUTODIFF_H_
#define DYMO_AUTODIFF_H_

// Tape-based reverse-mode differentiation over dense double tensors.
//
// A Tape owns every intermediate value created while evaluating an
// expression. Nodes are appended in evaluation order, so the reverse sweep is
// a single pass over the tape from the root backwards. Nodes that do not
// depend on any variable carry no backward closure, which makes value-only
// evaluation (sampling without guidance) cheap and bit-identical to the
// differentiable path.

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "dymo/tensor.h"

namespace dymo::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape(); }
  size_t size() const { return value().size(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

  // Gradient accumulated by the last backward sweep. Zero tensor if the
  // node received no gradient.
  Tensor grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(const Tensor& out_grad, const Tensor& out_value)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  // Appends a node. `backward` is dropped when no parent requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward);
  Var record(Tensor value, std::span<const Var> parents, Backward backward);

  // Seeds d(root)/d(root) = 1 for a one-element root and sweeps backwards.
  void backward(const Var& root);
  void backward(const Var& root, const Tensor& seed);

  // Gradient buffer of `v`, allocated to zeros on first use.
  Tensor& grad_buffer(const Var& v);

  const Tensor& value(const Var& v) const { return nodes_[v.id_].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id_].requires_grad; }
  const Tensor* grad_if_any(const Var& v) const;
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
};

// Elementwise arithmetic; operands must have identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// Broadcast a one-element `s` over `a`.
Var mul_scalar(const Var& a, const Var& s);
Var div_scalar(const Var& a, const Var& s);

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator*(const Var& a, double s);
Var operator*(double s, const Var& a);

// Reductions to a scalar.
Var sum(const Var& a);
Var mean(const Var& a);
Var dot(const Var& a, const Var& b);
Var norm(const Var& a);
// dot(a, b) / max(|a||b|, eps).
Var cosine(const Var& a, const Var& b, double eps = 1e-12);
// a / |a|.
Var normalize(const Var& a, double eps = 1e-12);

Var exp(const Var& a);
Var log(const Var& a);
Var silu(const Var& a);
Var tanh(const Var& a);
// Plain subgradient: derivative 1 strictly inside (lo, hi), 0 elsewhere.
Var clamp(const Var& a, double lo, double hi);

// Dense 2-D algebra.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_row_bias(const Var& x, const Var& b);      // x[m,n] + b[n]
Var add_channel_bias(const Var& x, const Var& b);  // x[C,...] + b[C]

// Same-padded stride-1 convolution: x[C,H,W], w[O,C,k,k], b[O] -> [O,H,W].
Var conv2d(const Var& x, const Var& w, const Var& b);
Var avg_pool2(const Var& x);   // [C,H,W] -> [C,H/2,W/2]
Var upsample2(const Var& x);   // nearest, [C,H,W] -> [C,2H,2W]
Var spatial_mean(const Var& x);  // [C,H,W] -> [C]

Var reshape(const Var& a, std::vector<int> shape);

// Row-wise softmax of x[m,n]. Columns with column_mask[j] == false receive
// probability 0. Empty mask means every column is valid.
Var softmax_rows(const Var& x, std::span<const char> column_mask = {});
// Column-wise softmax of x[m,n] (each column sums to 1 over rows).
Var softmax_cols(const Var& x);

Var slice_cols(const Var& x, int start, int count);
Var concat_cols(std::span<const Var> parts);
// Rows of table[V,d] at `rows`; an index of -1 yields a zero row.
Var gather_rows(const Var& table, std::span<const int> rows);
// Elementwise mean of equally shaped operands.
Var mean_of(std::span<const Var> parts);

}  // namespace dymo::ad

#endif  // DYMO_AUTODIFF_H_
