#include "dymo/autodiff.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "dymo/errors.h"

namespace dymo::ad {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

ConstMatMap as_matrix(const Tensor& t, int rows, int cols) {
  return ConstMatMap(t.raw(), rows, cols);
}

MatMap as_matrix(Tensor& t, int rows, int cols) { return MatMap(t.raw(), rows, cols); }

Tape* tape_of(const Var& a) {
  if (!a.valid()) throw InputError("autodiff: operation on an empty Var");
  return a.tape();
}

Tape* tape_of(const Var& a, const Var& b) {
  Tape* t = tape_of(a);
  if (tape_of(b) != t) throw InputError("autodiff: operands live on different tapes");
  return t;
}

void require_same(const Var& a, const Var& b, const char* op) {
  require_same_shape(a.value(), b.value(), op);
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw InputError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + a.value().shape_string());
  }
}

void require_scalar(const Var& s, const char* op) {
  if (s.size() != 1) throw InputError(std::string(op) + ": operand is not a scalar");
}

void axpy(Tensor& dst, const Tensor& src, double s = 1.0) {
  double* d = dst.raw();
  const double* x = src.raw();
  for (size_t i = 0; i < dst.size(); ++i) d[i] += s * x[i];
}

// Elementwise unary op with derivative f'(x, y) where y = f(x).
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  Tape* tape = tape_of(a);
  const Tensor& x = a.value();
  Tensor y = Tensor::like(x);
  for (size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return tape->record(std::move(y), {a}, [tape, a, df](const Tensor& g, const Tensor&) {
    const Tensor& xv = a.value();
    Tensor& ga = tape->grad_buffer(a);
    for (size_t i = 0; i < xv.size(); ++i) ga[i] += g[i] * df(xv[i]);
  });
}

// im2col for a same-padded odd kernel: [C,H,W] -> [C*k*k, H*W].
RowMatrix im2col(const Tensor& x, int k) {
  const int channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  const int pad = k / 2;
  RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(channels) * k * k,
                                   static_cast<Eigen::Index>(height) * width);
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols.row((c * k + ky) * k + kx).data();
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          const double* src = x.raw() + (static_cast<size_t>(c) * height + sy) * width;
          const int x0 = std::max(0, pad - kx);
          const int x1 = std::min(width, width + pad - kx);
          for (int xx = x0; xx < x1; ++xx) row[y * width + xx] = src[xx + kx - pad];
        }
      }
    }
  }
  return cols;
}

void col2im_add(const RowMatrix& cols, int k, Tensor& dx) {
  const int channels = dx.dim(0), height = dx.dim(1), width = dx.dim(2);
  const int pad = k / 2;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols.row((c * k + ky) * k + kx).data();
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          double* dst = dx.raw() + (static_cast<size_t>(c) * height + sy) * width;
          const int x0 = std::max(0, pad - kx);
          const int x1 = std::min(width, width + pad - kx);
          for (int xx = x0; xx < x1; ++xx) dst[xx + kx - pad] += row[y * width + xx];
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const {
  if (!valid()) throw InputError("autodiff: value() on an empty Var");
  return tape_->value(*this);
}

bool Var::requires_grad() const { return valid() && tape_->requires_grad(*this); }

Tensor Var::grad() const {
  const Tensor* g = tape_->grad_if_any(*this);
  return g ? *g : Tensor::like(value());
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || requires_grad(p);
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor& Tape::grad_buffer(const Var& v) {
  Node& n = nodes_[v.id_];
  if (n.grad.size() != n.value.size()) n.grad = Tensor::like(n.value);
  return n.grad;
}

const Tensor* Tape::grad_if_any(const Var& v) const {
  const Node& n = nodes_[v.id_];
  return n.grad.size() == n.value.size() && !n.value.empty() ? &n.grad : nullptr;
}

void Tape::backward(const Var& root) {
  if (root.size() != 1) throw InputError("backward: root must be a scalar");
  backward(root, Tensor(root.shape(), 1.0));
}

void Tape::backward(const Var& root, const Tensor& seed) {
  require_same_shape(root.value(), seed, "Tape::backward");
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buffer(root) = seed;
  for (int i = root.id_; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.backward || n.grad.size() != n.value.size()) continue;
    n.backward(n.grad, n.value);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  Tape* tape = tape_of(a, b);
  require_same(a, b, "add");
  return tape->record(a.value() + b.value(), {a, b}, [tape, a, b](const Tensor& g, const Tensor&) {
    if (a.requires_grad()) axpy(tape->grad_buffer(a), g);
    if (b.requires_grad()) axpy(tape->grad_buffer(b), g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape* tape = tape_of(a, b);
  require_same(a, b, "sub");
  return tape->record(a.value() - b.value(), {a, b}, [tape, a, b](const Tensor& g, const Tensor&) {
    if (a.requires_grad()) axpy(tape->grad_buffer(a), g);
    if (b.requires_grad()) axpy(tape->grad_buffer(b), g, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  Tape* tape = tape_of(a, b);
  require_same(a, b, "mul");
  Tensor y = a.value();
  for (size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return tape->record(std::move(y), {a, b}, [tape, a, b](const Tensor& g, const Tensor&) {
    if (a.requires_grad()) {
      Tensor& ga = tape->grad_buffer(a);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = tape->grad_buffer(b);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  Tape* tape = tape_of(a);
  return tape->record(a.value() * s, {a}, [tape, a, s](const Tensor& g, const Tensor&) {
    axpy(tape->grad_buffer(a), g, s);
  });
}

Var add_scalar(const Var& a, double s) {
  Tape* tape = tape_of(a);
  Tensor y = a.value();
  for (size_t i = 0; i < y.size(); ++i) y[i] += s;
  return tape->record(std::move(y), {a}, [tape, a](const Tensor& g, const Tensor&) {
    axpy(tape->grad_buffer(a), g);
  });
}

Var mul_scalar(const Var& a, const Var& s) {
  Tape* tape = tape_of(a, s);
  require_scalar(s, "mul_scalar");
  const double sv = s.value()[0];
  return tape->record(a.value() * sv, {a, s}, [tape, a, s](const Tensor& g, const Tensor&) {
    if (a.requires_grad()) axpy(tape->grad_buffer(a), g, s.value()[0]);
    if (s.requires_grad()) tape->grad_buffer(s)[0] += dymo::dot(g.data(), a.value().data());
  });
}

Var div_scalar(const Var& a, const Var& s) {
  Tape* tape = tape_of(a, s);
  require_scalar(s, "div_scalar");
  const double sv = s.value()[0];
  return tape->record(a.value() * (1.0 / sv), {a, s}, [tape, a, s](const Tensor& g, const Tensor&) {
    const double v = s.value()[0];
    if (a.requires_grad()) axpy(tape->grad_buffer(a), g, 1.0 / v);
    if (s.requires_grad()) {
      tape->grad_buffer(s)[0] -= dymo::dot(g.data(), a.value().data()) / (v * v);
    }
  });
}

Var operator+(const Var& a, const Var& b) { return add(a, b); }
Var operator-(const Var& a, const Var& b) { return sub(a, b); }
Var operator*(const Var& a, const Var& b) { return mul(a, b); }
Var operator*(const Var& a, double s) { return scale(a, s); }
Var operator*(double s, const Var& a) { return scale(a, s); }

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  Tape* tape = tape_of(a);
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return tape->record(Tensor::scalar(s), {a}, [tape, a](const Tensor& g, const Tensor&) {
    Tensor& ga = tape->grad_buffer(a);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var dot(const Var& a, const Var& b) {
  Tape* tape = tape_of(a, b);
  require_same(a, b, "dot");
  const double d = dymo::dot(a.value().data(), b.value().data());
  return tape->record(Tensor::scalar(d), {a, b}, [tape, a, b](const Tensor& g, const Tensor&) {
    if (a.requires_grad()) axpy(tape->grad_buffer(a), b.value(), g[0]);
    if (b.requires_grad()) axpy(tape->grad_buffer(b), a.value(), g[0]);
  });
}

Var norm(const Var& a) {
  Tape* tape = tape_of(a);
  const double n = l2_norm(a.value().data());
  return tape->record(Tensor::scalar(n), {a}, [tape, a, n](const Tensor& g, const Tensor&) {
    if (n == 0.0) return;
    axpy(tape->grad_buffer(a), a.value(), g[0] / n);
  });
}

Var cosine(const Var& a, const Var& b, double eps) {
  Tape* tape = tape_of(a, b);
  require_same(a, b, "cosine");
  const double na = l2_norm(a.value().data());
  const double nb = l2_norm(b.value().data());
  const double ab = dymo::dot(a.value().data(), b.value().data());
  const double denom = na * nb;
  const bool guarded = denom < eps;
  const double c = ab / (guarded ? eps : denom);
  return tape->record(Tensor::scalar(c), {a, b},
                      [tape, a, b, na, nb, c, guarded, eps](const Tensor& g, const Tensor&) {
    // d cos / d a = b / (|a||b|) - cos * a / |a|^2 (unguarded branch).
    if (guarded) {
      if (a.requires_grad()) axpy(tape->grad_buffer(a), b.value(), g[0] / eps);
      if (b.requires_grad()) axpy(tape->grad_buffer(b), a.value(), g[0] / eps);
      return;
    }
    if (a.requires_grad()) {
      Tensor& ga = tape->grad_buffer(a);
      axpy(ga, b.value(), g[0] / (na * nb));
      axpy(ga, a.value(), -g[0] * c / (na * na));
    }
    if (b.requires_grad()) {
      Tensor& gb = tape->grad_buffer(b);
      axpy(gb, a.value(), g[0] / (na * nb));
      axpy(gb, b.value(), -g[0] * c / (nb * nb));
    }
  });
}

Var normalize(const Var& a, double eps) {
  Tape* tape = tape_of(a);
  const double n = std::max(l2_norm(a.value().data()), eps);
  Tensor y = a.value() * (1.0 / n);
  return tape->record(std::move(y), {a}, [tape, a, n](const Tensor& g, const Tensor&) {
    // d(a/|a|) = (I - u u^T) / |a| with u = a/|a|.
    const Tensor& av = a.value();
    const double ug = dymo::dot(av.data(), g.data()) / n;
    Tensor& ga = tape->grad_buffer(a);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += (g[i] - av[i] / n * ug) / n;
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

Var exp(const Var& a) {
  Tape* tape = tape_of(a);
  Tensor y = Tensor::like(a.value());
  for (size_t i = 0; i < y.size(); ++i) y[i] = std::exp(a.value()[i]);
  return tape->record(std::move(y), {a}, [tape, a](const Tensor& g, const Tensor& out) {
    Tensor& ga = tape->grad_buffer(a);
    for (size_t i = 0; i < out.size(); ++i) ga[i] += g[i] * out[i];
  });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Dense algebra

Var matmul(const Var& a, const Var& b) {
  Tape* tape = tape_of(a, b);
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k) {
    throw InputError("matmul: inner dimension mismatch " + a.value().shape_string() + " x " +
                     b.value().shape_string());
  }
  Tensor y({m, n});
  as_matrix(y, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  return tape->record(std::move(y), {a, b}, [tape, a, b, m, k, n](const Tensor& g, const Tensor&) {
    ConstMatMap gm = as_matrix(g, m, n);
    if (a.requires_grad()) {
      as_matrix(tape->grad_buffer(a), m, k).noalias() +=
          gm * as_matrix(b.value(), k, n).transpose();
    }
    if (b.requires_grad()) {
      as_matrix(tape->grad_buffer(b), k, n).noalias() +=
          as_matrix(a.value(), m, k).transpose() * gm;
    }
  });
}

Var transpose(const Var& a) {
  Tape* tape = tape_of(a);
  require_rank(a, 2, "transpose");
  const int m = a.value().dim(0), n = a.value().dim(1);
  Tensor y({n, m});
  as_matrix(y, n, m) = as_matrix(a.value(), m, n).transpose();
  return tape->record(std::move(y), {a}, [tape, a, m, n](const Tensor& g, const Tensor&) {
    as_matrix(tape->grad_buffer(a), m, n) += as_matrix(g, n, m).transpose();
  });
}

Var add_row_bias(const Var& x, const Var& b) {
  Tape* tape = tape_of(x, b);
  require_rank(x, 2, "add_row_bias");
  const int m = x.value().dim(0), n = x.value().dim(1);
  if (b.size() != static_cast<size_t>(n)) throw InputError("add_row_bias: bias size mismatch");
  Tensor y = x.value();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y[static_cast<size_t>(i) * n + j] += b.value()[j];
  return tape->record(std::move(y), {x, b}, [tape, x, b, m, n](const Tensor& g, const Tensor&) {
    if (x.requires_grad()) axpy(tape->grad_buffer(x), g);
    if (b.requires_grad()) {
      Tensor& gb = tape->grad_buffer(b);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[j] += g[static_cast<size_t>(i) * n + j];
    }
  });
}

Var add_channel_bias(const Var& x, const Var& b) {
  Tape* tape = tape_of(x, b);
  const int channels = x.value().dim(0);
  if (b.size() != static_cast<size_t>(channels)) {
    throw InputError("add_channel_bias: bias size mismatch");
  }
  const size_t plane = x.size() / static_cast<size_t>(channels);
  Tensor y = x.value();
  for (int c = 0; c < channels; ++c) {
    double* p = y.raw() + c * plane;
    for (size_t i = 0; i < plane; ++i) p[i] += b.value()[c];
  }
  return tape->record(std::move(y), {x, b}, [tape, x, b, channels, plane](const Tensor& g, const Tensor&) {
    if (x.requires_grad()) axpy(tape->grad_buffer(x), g);
    if (b.requires_grad()) {
      Tensor& gb = tape->grad_buffer(b);
      for (int c = 0; c < channels; ++c) {
        const double* p = g.raw() + c * plane;
        double s = 0.0;
        for (size_t i = 0; i < plane; ++i) s += p[i];
        gb[c] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial

Var conv2d(const Var& x, const Var& w, const Var& b) {
  Tape* tape = tape_of(x, w);
  tape_of(x, b);
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const int channels = x.value().dim(0), height = x.value().dim(1), width = x.value().dim(2);
  const int out = w.value().dim(0), k = w.value().dim(2);
  if (w.value().dim(1) != channels || w.value().dim(3) != k || k % 2 == 0) {
    throw InputError("conv2d: kernel " + w.value().shape_string() + " incompatible with input " +
                     x.value().shape_string());
  }
  if (b.size() != static_cast<size_t>(out)) throw InputError("conv2d: bias size mismatch");
  const int patch = channels * k * k;
  const int pixels = height * width;
  RowMatrix cols = im2col(x.value(), k);
  Tensor y({out, height, width});
  MatMap ym = as_matrix(y, out, pixels);
  ym.noalias() = as_matrix(w.value(), out, patch) * cols;
  for (int o = 0; o < out; ++o) ym.row(o).array() += b.value()[o];
  const bool keep_cols = w.requires_grad();
  return tape->record(
      std::move(y), {x, w, b},
      [tape, x, w, b, out, k, patch, pixels, keep_cols,
       cols = keep_cols ? std::move(cols) : RowMatrix()](const Tensor& g, const Tensor&) {
        ConstMatMap gm = as_matrix(g, out, pixels);
        if (w.requires_grad()) {
          as_matrix(tape->grad_buffer(w), out, patch).noalias() += gm * cols.transpose();
        }
        if (b.requires_grad()) {
          Tensor& gb = tape->grad_buffer(b);
          for (int o = 0; o < out; ++o) gb[o] += gm.row(o).sum();
        }
        if (x.requires_grad()) {
          RowMatrix dcols = as_matrix(w.value(), out, patch).transpose() * gm;
          col2im_add(dcols, k, tape->grad_buffer(x));
        }
      });
}

Var avg_pool2(const Var& x) {
  Tape* tape = tape_of(x);
  require_rank(x, 3, "avg_pool2");
  const int channels = x.value().dim(0), height = x.value().dim(1), width = x.value().dim(2);
  if (height % 2 || width % 2) throw InputError("avg_pool2: odd spatial size");
  const int oh = height / 2, ow = width / 2;
  Tensor y({channels, oh, ow});
  const Tensor& xv = x.value();
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j)
        y.at(c, i, j) = 0.25 * (xv.at(c, 2 * i, 2 * j) + xv.at(c, 2 * i, 2 * j + 1) +
                                xv.at(c, 2 * i + 1, 2 * j) + xv.at(c, 2 * i + 1, 2 * j + 1));
  return tape->record(std::move(y), {x}, [tape, x, channels, oh, ow](const Tensor& g, const Tensor&) {
    Tensor& gx = tape->grad_buffer(x);
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const double v = 0.25 * g.at(c, i, j);
          gx.at(c, 2 * i, 2 * j) += v;
          gx.at(c, 2 * i, 2 * j + 1) += v;
          gx.at(c, 2 * i + 1, 2 * j) += v;
          gx.at(c, 2 * i + 1, 2 * j + 1) += v;
        }
  });
}

Var upsample2(const Var& x) {
  Tape* tape = tape_of(x);
  require_rank(x, 3, "upsample2");
  const int channels = x.value().dim(0), height = x.value().dim(1), width = x.value().dim(2);
  Tensor y({channels, 2 * height, 2 * width});
  const Tensor& xv = x.value();
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < 2 * height; ++i)
      for (int j = 0; j < 2 * width; ++j) y.at(c, i, j) = xv.at(c, i / 2, j / 2);
  return tape->record(std::move(y), {x}, [tape, x, channels, height, width](const Tensor& g, const Tensor&) {
    Tensor& gx = tape->grad_buffer(x);
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < 2 * height; ++i)
        for (int j = 0; j < 2 * width; ++j) gx.at(c, i / 2, j / 2) += g.at(c, i, j);
  });
}

Var spatial_mean(const Var& x) {
  Tape* tape = tape_of(x);
  require_rank(x, 3, "spatial_mean");
  const int channels = x.value().dim(0);
  const size_t plane = x.size() / static_cast<size_t>(channels);
  Tensor y({channels});
  for (int c = 0; c < channels; ++c) {
    const double* p = x.value().raw() + c * plane;
    double s = 0.0;
    for (size_t i = 0; i < plane; ++i) s += p[i];
    y[c] = s / static_cast<double>(plane);
  }
  return tape->record(std::move(y), {x}, [tape, x, channels, plane](const Tensor& g, const Tensor&) {
    Tensor& gx = tape->grad_buffer(x);
    for (int c = 0; c < channels; ++c) {
      const double v = g[c] / static_cast<double>(plane);
      double* p = gx.raw() + c * plane;
      for (size_t i = 0; i < plane; ++i) p[i] += v;
    }
  });
}

Var reshape(const Var& a, std::vector<int> shape) {
  Tape* tape = tape_of(a);
  Tensor y = a.value().reshaped(std::move(shape));
  return tape->record(std::move(y), {a}, [tape, a](const Tensor& g, const Tensor&) {
    Tensor& ga = tape->grad_buffer(a);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Softmax and slicing

Var softmax_rows(const Var& x, std::span<const char> column_mask) {
  Tape* tape = tape_of(x);
  require_rank(x, 2, "softmax_rows");
  const int m = x.value().dim(0), n = x.value().dim(1);
  if (!column_mask.empty() && column_mask.size() != static_cast<size_t>(n)) {
    throw InputError("softmax_rows: mask size mismatch");
  }
  auto valid = [&column_mask](int j) { return column_mask.empty() || column_mask[j]; };
  Tensor y({m, n});
  for (int i = 0; i < m; ++i) {
    const double* row = x.value().raw() + static_cast<size_t>(i) * n;
    double* out = y.raw() + static_cast<size_t>(i) * n;
    double hi = -INFINITY;
    for (int j = 0; j < n; ++j)
      if (valid(j)) hi = std::max(hi, row[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      out[j] = valid(j) ? std::exp(row[j] - hi) : 0.0;
      s += out[j];
    }
    for (int j = 0; j < n; ++j) out[j] /= s;
  }
  return tape->record(std::move(y), {x}, [tape, x, m, n](const Tensor& g, const Tensor& p) {
    Tensor& gx = tape->grad_buffer(x);
    for (int i = 0; i < m; ++i) {
      const size_t base = static_cast<size_t>(i) * n;
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += g[base + j] * p[base + j];
      for (int j = 0; j < n; ++j) gx[base + j] += p[base + j] * (g[base + j] - s);
    }
  });
}

Var softmax_cols(const Var& x) {
  Tape* tape = tape_of(x);
  require_rank(x, 2, "softmax_cols");
  const int m = x.value().dim(0), n = x.value().dim(1);
  Tensor y({m, n});
  ConstMatMap xm = as_matrix(x.value(), m, n);
  MatMap ym = as_matrix(y, m, n);
  for (int j = 0; j < n; ++j) {
    const double hi = xm.col(j).maxCoeff();
    ym.col(j) = (xm.col(j).array() - hi).exp();
    ym.col(j) /= ym.col(j).sum();
  }
  return tape->record(std::move(y), {x}, [tape, x, m, n](const Tensor& g, const Tensor& probs) {
    ConstMatMap p = as_matrix(probs, m, n);
    ConstMatMap gm = as_matrix(g, m, n);
    MatMap gx = as_matrix(tape->grad_buffer(x), m, n);
    for (int j = 0; j < n; ++j) {
      const double s = p.col(j).dot(gm.col(j));
      gx.col(j).array() += p.col(j).array() * (gm.col(j).array() - s);
    }
  });
}

Var slice_cols(const Var& x, int start, int count) {
  Tape* tape = tape_of(x);
  require_rank(x, 2, "slice_cols");
  const int m = x.value().dim(0), n = x.value().dim(1);
  if (start < 0 || count < 0 || start + count > n) throw InputError("slice_cols: out of range");
  Tensor y({m, count});
  as_matrix(y, m, count) = as_matrix(x.value(), m, n).middleCols(start, count);
  return tape->record(std::move(y), {x}, [tape, x, m, n, start, count](const Tensor& g, const Tensor&) {
    as_matrix(tape->grad_buffer(x), m, n).middleCols(start, count) += as_matrix(g, m, count);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InputError("concat_cols: no operands");
  Tape* tape = tape_of(parts[0]);
  const int m = parts[0].value().dim(0);
  int n = 0;
  for (const Var& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (tape_of(p) != tape || p.value().dim(0) != m) throw InputError("concat_cols: mismatch");
    n += p.value().dim(1);
  }
  Tensor y({m, n});
  MatMap ym = as_matrix(y, m, n);
  int offset = 0;
  for (const Var& p : parts) {
    const int w = p.value().dim(1);
    ym.middleCols(offset, w) = as_matrix(p.value(), m, w);
    offset += w;
  }
  std::vector<Var> kept(parts.begin(), parts.end());
  return tape->record(std::move(y), parts, [tape, kept, m, n](const Tensor& g, const Tensor&) {
    ConstMatMap gm = as_matrix(g, m, n);
    int off = 0;
    for (const Var& p : kept) {
      const int w = p.value().dim(1);
      if (p.requires_grad()) as_matrix(tape->grad_buffer(p), m, w) += gm.middleCols(off, w);
      off += w;
    }
  });
}

Var gather_rows(const Var& table, std::span<const int> rows) {
  Tape* tape = tape_of(table);
  require_rank(table, 2, "gather_rows");
  const int vocab = table.value().dim(0), d = table.value().dim(1);
  const int m = static_cast<int>(rows.size());
  Tensor y({m, d});
  for (int i = 0; i < m; ++i) {
    const int r = rows[i];
    if (r < -1 || r >= vocab) throw InputError("gather_rows: row index out of range");
    if (r < 0) continue;
    std::copy_n(table.value().raw() + static_cast<size_t>(r) * d, d,
                y.raw() + static_cast<size_t>(i) * d);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return tape->record(std::move(y), {table}, [tape, table, idx, d](const Tensor& g, const Tensor&) {
    Tensor& gt = tape->grad_buffer(table);
    for (size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      for (int j = 0; j < d; ++j) gt[static_cast<size_t>(idx[i]) * d + j] += g[i * d + j];
    }
  });
}

Var mean_of(std::span<const Var> parts) {
  if (parts.empty()) throw InputError("mean_of: no operands");
  Tape* tape = tape_of(parts[0]);
  Tensor y = Tensor::like(parts[0].value());
  for (const Var& p : parts) {
    if (tape_of(p) != tape) throw InputError("mean_of: operands on different tapes");
    require_same(parts[0], p, "mean_of");
    y += p.value();
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  y *= inv;
  std::vector<Var> kept(parts.begin(), parts.end());
  return tape->record(std::move(y), parts, [tape, kept, inv](const Tensor& g, const Tensor&) {
    for (const Var& p : kept)
      if (p.requires_grad()) axpy(tape->grad_buffer(p), g, inv);
  });
}

}  // namespace dymo::ad
