#include "dymo/autodiff.h"

#include <functional>
#include <random>

#include "doctest.h"
#include "dymo/errors.h"
#include "fd_oracle.h"

namespace dymo {
namespace {

using ad::Tape;
using ad::Var;
using testing::central_difference;
using testing::random_tensor;
using testing::relative_error;

// Builds f(x) = <w, op(x)> for a fixed random projection w and compares the
// tape gradient against central differences.
double check_unary_op(const std::function<Var(const Var&)>& op, const Tensor& x0,
                      uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Tensor w;
  {
    Tape probe;
    w = random_tensor(op(probe.constant(x0)).shape(), rng);
  }
  auto value = [&](const Tensor& x) {
    Tape t;
    Var y = op(t.constant(x));
    return dymo::dot(y.value().data(), w.data());
  };
  Tape tape;
  Var x = tape.variable(x0);
  Var loss = ad::dot(op(x), tape.constant(w));
  tape.backward(loss);
  return relative_error(x.grad(), central_difference(value, x0));
}

TEST_CASE("elementwise and reduction gradients match finite differences") {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({4, 5}, rng);
  CHECK(check_unary_op([](const Var& a) { return ad::silu(a); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::tanh(a); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::exp(a); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::log(ad::add_scalar(ad::exp(a), 1.0)); }, x) <
        1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::normalize(a); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::mul(a, a); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::div_scalar(a, ad::norm(a)); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::mul_scalar(a, ad::sum(a)); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::mean(a); }, x) < 1e-7);
  CHECK(check_unary_op(
            [](const Var& a) {
              return ad::cosine(a, ad::exp(a));
            },
            x) < 1e-7);
}

TEST_CASE("dense algebra gradients") {
  std::mt19937_64 rng(11);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor other = random_tensor({4, 6}, rng);
  const Tensor bias = random_tensor({4}, rng);
  CHECK(check_unary_op(
            [&](const Var& a) { return ad::matmul(a, a.tape()->constant(other)); }, x) < 1e-7);
  CHECK(check_unary_op([&](const Var& a) { return ad::matmul(ad::transpose(a), a); }, x) < 1e-7);
  CHECK(check_unary_op([&](const Var& a) { return ad::add_row_bias(a, a.tape()->constant(bias)); },
                       x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::softmax_rows(a); }, x) < 1e-7);
  const std::vector<char> mask = {1, 0, 1, 1};
  CHECK(check_unary_op([&](const Var& a) { return ad::softmax_rows(a, mask); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::softmax_cols(a); }, x) < 1e-7);
  CHECK(check_unary_op(
            [](const Var& a) {
              std::vector<Var> parts = {ad::slice_cols(a, 2, 2), ad::slice_cols(a, 0, 2)};
              return ad::concat_cols(parts);
            },
            x) < 1e-7);
  const std::vector<int> rows = {2, -1, 0, 2};
  CHECK(check_unary_op([&](const Var& a) { return ad::gather_rows(a, rows); }, x) < 1e-7);
  CHECK(check_unary_op(
            [](const Var& a) {
              std::vector<Var> parts = {a, ad::tanh(a), ad::scale(a, 3.0)};
              return ad::mean_of(parts);
            },
            x) < 1e-7);
}

TEST_CASE("spatial op gradients") {
  std::mt19937_64 rng(13);
  const Tensor x = random_tensor({2, 6, 4}, rng);
  const Tensor w3 = random_tensor({3, 2, 3, 3}, rng);
  const Tensor w1 = random_tensor({3, 2, 1, 1}, rng);
  const Tensor b = random_tensor({3}, rng);
  CHECK(check_unary_op(
            [&](const Var& a) {
              Tape* t = a.tape();
              return ad::conv2d(a, t->constant(w3), t->constant(b));
            },
            x) < 1e-7);
  CHECK(check_unary_op(
            [&](const Var& a) {
              Tape* t = a.tape();
              return ad::conv2d(a, t->constant(w1), t->constant(b));
            },
            x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::avg_pool2(a); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::upsample2(a); }, x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::spatial_mean(a); }, x) < 1e-7);
  CHECK(check_unary_op(
            [](const Var& a) { return ad::add_channel_bias(a, ad::spatial_mean(ad::tanh(a))); },
            x) < 1e-7);
  CHECK(check_unary_op([](const Var& a) { return ad::reshape(a, {2, 24}); }, x) < 1e-7);

  // Kernel and bias gradients.
  const Tensor x0 = x;
  auto conv_of_weights = [&](const Var& w) {
    Tape* t = w.tape();
    return ad::conv2d(t->constant(x0), w, t->constant(b));
  };
  CHECK(check_unary_op(conv_of_weights, w3) < 1e-7);
}

TEST_CASE("clamp uses the plain subgradient") {
  Tape tape;
  Var x = tape.variable(Tensor({4}, std::vector<double>{-2.0, -0.5, 0.5, 1.7}));
  Var y = ad::clamp(x, -1.0, 1.0);
  CHECK(y.value()[3] == 1.0);
  CHECK(y.value()[0] == -1.0);
  tape.backward(ad::sum(y));
  const Tensor g = x.grad();
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 1.0);
  CHECK(g[2] == 1.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("constant subgraphs record no backward work and give zero gradients") {
  Tape tape;
  Var c = tape.constant(Tensor({3}, 2.0));
  Var x = tape.variable(Tensor({3}, 1.0));
  Var y = ad::sum(ad::mul(ad::exp(c), x));
  CHECK_FALSE(ad::exp(c).requires_grad());
  tape.backward(y);
  CHECK(c.grad()[0] == 0.0);
  CHECK(x.grad()[0] == doctest::Approx(std::exp(2.0)));
}

TEST_CASE("shape errors are reported") {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({3, 2}));
  CHECK_THROWS_AS(ad::add(a, b), InputError);
  CHECK_THROWS_AS(ad::matmul(a, a), InputError);
  CHECK_THROWS_AS(tape.backward(a), InputError);
}

}  // namespace
}  // namespace dymo
