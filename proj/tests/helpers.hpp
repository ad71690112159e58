#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "raglens/rng.hpp"
#include "raglens/train.hpp"
#include "raglens/weights.hpp"

namespace raglens::testing {

template <typename S>
struct FlatParams {
  std::vector<Mat<S>*> tensors;
  std::vector<size_t> starts;  // cumulative offsets, one past the end at back
};

template <typename S>
FlatParams<S> flatten(WeightsT<S>& w) {
  FlatParams<S> f;
  size_t off = 0;
  w.for_each_tensor([&](const std::string&, Mat<S>& m) {
    f.tensors.push_back(&m);
    f.starts.push_back(off);
    off += m.size();
  });
  f.starts.push_back(off);
  return f;
}

template <typename S>
S& flat_at(FlatParams<S>& f, size_t idx) {
  const auto it = std::upper_bound(f.starts.begin(), f.starts.end(), idx);
  const size_t t = static_cast<size_t>(it - f.starts.begin()) - 1;
  return f.tensors[t]->a[idx - f.starts[t]];
}

struct FdResult {
  double max_rel = 0.0;
  size_t checked = 0;
};

// Central finite differences against analytic gradients in double precision.
// Denominator floors at 1e-6 so near-zero gradient pairs compare absolutely.
inline FdResult fd_check(WeightsT<double>& w,
                         const std::vector<std::vector<int>>& seqs, size_t n_samples,
                         uint64_t seed) {
  WeightsT<double> grads(w.cfg);
  loss_and_grad(w, seqs, grads);
  auto fw = flatten(w);
  auto fg = flatten(grads);
  const size_t total = fw.starts.back();

  std::vector<size_t> order(total);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(seed);
  for (size_t i = total - 1; i > 0; --i)
    std::swap(order[i], order[rng.next_below(i + 1)]);
  n_samples = std::min(n_samples, total);

  WeightsT<double> scratch(w.cfg);
  FdResult res;
  for (size_t s = 0; s < n_samples; ++s) {
    double& theta = flat_at(fw, order[s]);
    const double orig = theta;
    const double h = 1e-5 * std::max(1.0, std::abs(orig));
    theta = orig + h;
    const double fp = loss_and_grad(w, seqs, scratch);
    theta = orig - h;
    const double fm = loss_and_grad(w, seqs, scratch);
    theta = orig;
    const double fd = (fp - fm) / (2.0 * h);
    const double a = flat_at(fg, order[s]);
    const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6});
    res.max_rel = std::max(res.max_rel, rel);
    ++res.checked;
  }
  return res;
}

// Model whose per-head OV circuit equals a caller-chosen vocab x vocab
// matrix, exactly: token embeddings select coordinates, unembedding projects
// them back, and each head's value/output pair carries one target matrix.
inline Weights planted_ov_model(int n_layers, int n_heads, int vocab,
                                const std::vector<Mat<double>>& targets) {
  if (static_cast<int>(targets.size()) != n_layers * n_heads)
    throw std::invalid_argument("planted_ov_model: one target per head required");
  ModelConfig cfg;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.d_model = vocab * n_heads;
  cfg.d_ffn = 4;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 8;
  cfg.validate();
  Weights w(cfg);
  for (int v = 0; v < vocab; ++v) {
    w.wte.at(v, v) = 1.0f;
    w.unembed.at(v, v) = 1.0f;
  }
  for (int l = 0; l < n_layers; ++l)
    for (int h = 0; h < n_heads; ++h) {
      auto& head = w.layers[l].heads[h];
      const Mat<double>& t = targets[static_cast<size_t>(l) * n_heads + h];
      if (t.rows != vocab || t.cols != vocab)
        throw std::invalid_argument("planted_ov_model: target shape mismatch");
      for (int v = 0; v < vocab; ++v) head.wv.at(v, v) = 1.0f;
      for (int k = 0; k < vocab; ++k)
        for (int j = 0; j < vocab; ++j)
          head.wo.at(k, j) = static_cast<float>(t.at(k, j));
    }
  return w;
}

// Sixteen diagonally dominant targets whose exact positive-eigenvalue ratio
// steps down in groups: head_index mod 4 diagonal entries are pushed strongly
// negative, the rest stay positive, off-diagonal noise is kept far below the
// dominance gap.
inline std::vector<Mat<double>> graded_copying_targets(int n_layers, int n_heads,
                                                       int vocab, uint64_t seed) {
  std::vector<Mat<double>> targets;
  Rng rng(raglens::Rng::mix(seed, 0x07AD));
  for (int idx = 0; idx < n_layers * n_heads; ++idx) {
    const int n_neg = idx % 4;
    Mat<double> t(vocab, vocab);
    for (int i = 0; i < vocab; ++i) {
      for (int j = 0; j < vocab; ++j)
        if (j != i) t.at(i, j) = 0.05 * (2.0 * rng.next_double() - 1.0);
      const double jitter = 0.5 * (2.0 * rng.next_double() - 1.0);
      t.at(i, i) = (i < n_neg) ? -10.0 + jitter : 5.0 + jitter;
    }
    targets.push_back(std::move(t));
  }
  return targets;
}

}  // namespace raglens::testing
