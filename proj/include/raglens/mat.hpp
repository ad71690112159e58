#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace raglens {

// Dense row-major matrix. The scalar type is a template parameter so the same
// model code can run in float (production) and double (finite-difference checks).
template <class S>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<S> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, S(0)) {}

  S* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
  const S* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }
  S& at(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
  S at(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

  std::span<S> row_span(int i) { return {row(i), static_cast<size_t>(cols)}; }
  std::span<const S> row_span(int i) const { return {row(i), static_cast<size_t>(cols)}; }

  void fill(S v) { std::fill(a.begin(), a.end(), v); }
  size_t size() const { return a.size(); }
};

// C += A * B, shapes (m x k)(k x n). Inner loop runs over contiguous rows of B
// and C so it vectorizes.
template <class S>
void matmul_acc(const Mat<S>& A, const Mat<S>& B, Mat<S>& C) {
  assert(A.cols == B.rows && A.rows == C.rows && B.cols == C.cols);
  const int m = A.rows, k = A.cols, n = B.cols;
  for (int i = 0; i < m; ++i) {
    const S* ai = A.row(i);
    S* ci = C.row(i);
    for (int p = 0; p < k; ++p) {
      const S aip = ai[p];
      if (aip == S(0)) continue;
      const S* bp = B.row(p);
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C += A * B^T, shapes (m x k)(n x k)
template <class S>
void matmul_bt_acc(const Mat<S>& A, const Mat<S>& B, Mat<S>& C) {
  assert(A.cols == B.cols && A.rows == C.rows && B.rows == C.cols);
  const int m = A.rows, k = A.cols, n = B.rows;
  for (int i = 0; i < m; ++i) {
    const S* ai = A.row(i);
    S* ci = C.row(i);
    for (int j = 0; j < n; ++j) {
      const S* bj = B.row(j);
      S acc = S(0);
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C += A^T * B, shapes (k x m)(k x n); used for weight gradients.
template <class S>
void matmul_at_acc(const Mat<S>& A, const Mat<S>& B, Mat<S>& C) {
  assert(A.rows == B.rows && A.cols == C.rows && B.cols == C.cols);
  const int k = A.rows, m = A.cols, n = B.cols;
  for (int p = 0; p < k; ++p) {
    const S* ap = A.row(p);
    const S* bp = B.row(p);
    for (int i = 0; i < m; ++i) {
      const S api = ap[i];
      if (api == S(0)) continue;
      S* ci = C.row(i);
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

template <class S>
void axpy(S alpha, const S* x, S* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class S>
void axpy(S alpha, std::span<const S> x, std::span<S> y) {
  assert(x.size() == y.size());
  axpy(alpha, x.data(), y.data(), static_cast<int>(x.size()));
}

template <class S>
S dot(const S* x, const S* y, int n) {
  S acc = S(0);
  for (int i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <class S>
S dot(std::span<const S> x, std::span<const S> y) {
  assert(x.size() == y.size());
  return dot(x.data(), y.data(), static_cast<int>(x.size()));
}

template <class S>
double norm2(std::span<const S> x) {
  double acc = 0;
  for (S v : x) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

// cosine similarity; throws on a zero-norm operand instead of returning 0
template <class S>
double cosine(std::span<const S> x, std::span<const S> y) {
  const double nx = norm2(x), ny = norm2(y);
  if (nx == 0.0 || ny == 0.0) throw std::domain_error("cosine: zero-norm vector");
  double acc = 0;
  for (size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  return acc / (nx * ny);
}

}  // namespace raglens
