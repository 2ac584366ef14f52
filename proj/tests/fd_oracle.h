#ifndef DYMO_TESTS_FD_ORACLE_H_
#define DYMO_TESTS_FD_ORACLE_H_

// Central finite differences, used as the independent oracle for every
// analytic gradient in the test suite.

#include <cmath>
#include <functional>
#include <random>

#include "dymo/tensor.h"

namespace dymo::testing {

inline Tensor central_difference(const std::function<double(const Tensor&)>& f,
                                 const Tensor& at, double h = 1e-6) {
  Tensor grad = Tensor::like(at);
  Tensor probe = at;
  for (size_t i = 0; i < at.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// |a - b| / max(|b|, floor).
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
  double diff = 0.0, ref = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), floor);
}

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

inline Tensor gaussian_tensor(std::vector<int> shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
  return t;
}

}  // namespace dymo::testing

#endif  // DYMO_TESTS_FD_ORACLE_H_
