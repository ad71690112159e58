#pragma once

#include <cmath>
#include <cstddef>

namespace raglens {

// tanh-form gelu; smooth everywhere, which keeps finite-difference gradient
// checks well conditioned.
template <typename S>
S gelu(S x) {
  const S c = S(0.7978845608028654);  // sqrt(2/pi)
  S u = c * (x + S(0.044715) * x * x * x);
  return S(0.5) * x * (S(1) + std::tanh(u));
}

template <typename S>
S gelu_deriv(S x) {
  const S c = S(0.7978845608028654);
  S u = c * (x + S(0.044715) * x * x * x);
  S t = std::tanh(u);
  S du = c * (S(1) + S(0.134145) * x * x);
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

// Stable softmax over p[0..n), in place.
template <typename S>
void softmax_inplace(S* p, int n) {
  S m = p[0];
  for (int i = 1; i < n; ++i)
    if (p[i] > m) m = p[i];
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    double e = std::exp(static_cast<double>(p[i] - m));
    p[i] = static_cast<S>(e);
    sum += e;
  }
  for (int i = 0; i < n; ++i) p[i] = static_cast<S>(static_cast<double>(p[i]) / sum);
}

}  // namespace raglens
