#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace raglens {

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of empty vector");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("pearson: need at least 2 points");
  const auto constant = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double e) { return e == v.front(); });
  };
  if (constant(x) || constant(y))
    throw std::invalid_argument("pearson: constant input");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw std::invalid_argument("pearson: constant input");
  return sxy / std::sqrt(sxx * syy);
}

// Average ranks (1-based); tied values share the mean of the positions they
// occupy.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

// Rank-statistic AUC; tied scores contribute one half. Requires both classes.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: length mismatch");
  size_t npos = 0, nneg = 0;
  for (int l : labels) {
    if (l == 1)
      ++npos;
    else if (l == 0)
      ++nneg;
    else
      throw std::invalid_argument("auc: labels must be 0 or 1");
  }
  if (npos == 0 || nneg == 0)
    throw std::invalid_argument("auc: both classes must be present");
  const auto ranks = average_ranks(scores);
  double rpos = 0.0;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 1) rpos += ranks[i];
  return (rpos - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1)) /
         (static_cast<double>(npos) * static_cast<double>(nneg));
}

struct BinaryStats {
  double accuracy = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Classify positive iff score >= threshold.
inline BinaryStats binary_stats(const std::vector<double>& scores,
                                const std::vector<int>& labels, double threshold) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("binary_stats: length mismatch");
  if (scores.empty()) throw std::invalid_argument("binary_stats: empty input");
  size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (pred && labels[i] == 1)
      ++tp;
    else if (pred && labels[i] == 0)
      ++fp;
    else if (!pred && labels[i] == 0)
      ++tn;
    else
      ++fn;
  }
  BinaryStats s;
  s.accuracy = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
  s.recall = (tp + fn) ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  const double denom = 2.0 * tp + fp + fn;
  s.f1 = denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  return s;
}

// Threshold maximizing F1 over the observed score values; ties resolve to the
// smallest threshold so repeated runs agree.
inline double best_f1_threshold(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  std::vector<double> cand = scores;
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  double best_t = cand.front(), best_f1 = -1.0;
  for (double t : cand) {
    const double f1 = binary_stats(scores, labels, t).f1;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_t = t;
    }
  }
  return best_t;
}

}  // namespace raglens
