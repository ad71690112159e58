#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "raglens/transformer.hpp"
#include "raglens/weights.hpp"

namespace raglens {

inline void validate_distribution(const std::vector<double>& p) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw std::invalid_argument("distribution has negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("distribution does not sum to 1");
}

inline std::vector<double> softmax_vec(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("softmax of empty vector");
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

// Projects an intermediate residual-stream vector straight to vocabulary
// logits through the model's final layernorm and unembedding.
template <typename S>
std::vector<double> logit_lens(const WeightsT<S>& w, const S* x) {
  const int d = w.cfg.d_model, V = w.cfg.vocab_size;
  double mean = 0.0;
  for (int j = 0; j < d; ++j) {
    if (!std::isfinite(static_cast<double>(x[j])))
      throw std::invalid_argument("logit_lens: non-finite input");
    mean += static_cast<double>(x[j]);
  }
  mean /= d;
  double var = 0.0;
  for (int j = 0; j < d; ++j) {
    double c = static_cast<double>(x[j]) - mean;
    var += c * c;
  }
  var /= d;
  const double inv = 1.0 / std::sqrt(var + static_cast<double>(w.cfg.ln_eps));
  std::vector<double> normed(d);
  for (int j = 0; j < d; ++j)
    normed[j] = static_cast<double>(w.lnf_g.at(0, j)) *
                    ((static_cast<double>(x[j]) - mean) * inv) +
                static_cast<double>(w.lnf_b.at(0, j));
  std::vector<double> logits(V, 0.0);
  for (int j = 0; j < d; ++j) {
    const S* urow = w.unembed.row(j);
    const double nj = normed[j];
    for (int v = 0; v < V; ++v) logits[v] += nj * static_cast<double>(urow[v]);
  }
  return logits;
}

template <typename S>
std::vector<double> lens_distribution(const WeightsT<S>& w, const S* x) {
  return softmax_vec(logit_lens(w, x));
}

// Jensen-Shannon divergence, natural log, with 1e-12 additive smoothing
// inside the logs. Symmetric, zero iff p = q, bounded by ln 2.
inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("jsd: length mismatch");
  validate_distribution(p);
  validate_distribution(q);
  constexpr double kEps = 1e-12;
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) acc += 0.5 * p[i] * (std::log(p[i] + kEps) - std::log(m + kEps));
    if (q[i] > 0.0) acc += 0.5 * q[i] * (std::log(q[i] + kEps) - std::log(m + kEps));
  }
  return acc < 0.0 ? 0.0 : acc;
}

}  // namespace raglens
