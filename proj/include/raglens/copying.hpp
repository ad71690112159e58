#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raglens/mat.hpp"
#include "raglens/transformer.hpp"
#include "raglens/weights.hpp"

namespace raglens {

// Full OV circuit of one head: how attended token content maps to output
// logits, as a vocab x vocab matrix M = W_E (W_V W_O) W_U.
template <typename S>
Mat<double> full_ov_matrix(const WeightsT<S>& w, HeadRef head) {
  const ModelConfig& cfg = w.cfg;
  if (head.layer < 0 || head.layer >= cfg.n_layers || head.head < 0 ||
      head.head >= cfg.n_heads)
    throw std::invalid_argument("full_ov_matrix: head out of range");
  const auto& H = w.layers[head.layer].heads[head.head];
  const int V = cfg.vocab_size, d = cfg.d_model, dh = cfg.d_head();

  Mat<double> A(V, dh);  // W_E W_V
  for (int i = 0; i < V; ++i)
    for (int k = 0; k < dh; ++k) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j)
        acc += static_cast<double>(w.wte.at(i, j)) * static_cast<double>(H.wv.at(j, k));
      A.at(i, k) = acc;
    }
  Mat<double> B(dh, V);  // W_O W_U
  for (int k = 0; k < dh; ++k)
    for (int v = 0; v < V; ++v) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j)
        acc += static_cast<double>(H.wo.at(k, j)) *
               static_cast<double>(w.unembed.at(j, v));
      B.at(k, v) = acc;
    }
  Mat<double> M(V, V);
  matmul_acc(A, B, M);
  return M;
}

inline double matrix_trace(const Mat<double>& M) {
  if (M.rows != M.cols) throw std::invalid_argument("trace of non-square matrix");
  double t = 0.0;
  for (int i = 0; i < M.rows; ++i) t += M.at(i, i);
  return t;
}

// Real-axis extremes of each Gershgorin disk, emitted per row as
// a_ii + R_i then a_ii - R_i with R_i the off-diagonal absolute row sum.
inline std::vector<double> gershgorin_boundary_points(const Mat<double>& M) {
  if (M.rows != M.cols)
    throw std::invalid_argument("gershgorin_boundary_points: non-square input");
  std::vector<double> pts;
  pts.reserve(2 * static_cast<size_t>(M.rows));
  for (int i = 0; i < M.rows; ++i) {
    double r = 0.0;
    for (int j = 0; j < M.cols; ++j)
      if (j != i) r += std::abs(M.at(i, j));
    pts.push_back(M.at(i, i) + r);
    pts.push_back(M.at(i, i) - r);
  }
  return pts;
}

// Linear-interpolation quantile on a sorted copy (the numpy default method).
inline double interp_quantile(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("quantile of empty set");
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - std::floor(h)) * (v[lo + 1] - v[lo]);
}

inline int iqr_outlier_count(const std::vector<double>& points) {
  if (points.size() < 4)
    throw std::invalid_argument("iqr_outlier_count: need at least 4 points");
  const double q1 = interp_quantile(points, 0.25);
  const double q3 = interp_quantile(points, 0.75);
  const double iqr = q3 - q1;
  const double lo = q1 - 1.5 * iqr, hi = q3 + 1.5 * iqr;
  int n = 0;
  for (double p : points)
    if (p < lo || p > hi) ++n;
  return n;
}

struct CopyingHeadRow {
  int layer = 0;
  int head = 0;
  double trace = 0.0;
  int outlier_count = 0;
  int trace_rank = 0;
  int outlier_rank = 0;
  int score = 0;
  double exact_ratio = std::numeric_limits<double>::quiet_NaN();
};

struct CopyingHeadReport {
  std::vector<CopyingHeadRow> rows;  // ascending score, ties by (layer, head)
  bool has_exact = false;
};

namespace detail {

// Competition ranking: tied keys share the minimum rank, later ranks skip.
// `better(a, b)` returns true when a outranks b.
template <typename T, typename Better>
std::vector<int> competition_ranks(const std::vector<T>& keys, Better better) {
  std::vector<int> ranks(keys.size());
  for (size_t i = 0; i < keys.size(); ++i) {
    int r = 1;
    for (size_t j = 0; j < keys.size(); ++j)
      if (better(keys[j], keys[i])) ++r;
    ranks[i] = r;
  }
  return ranks;
}

}  // namespace detail

// Fraction of eigenvalues of M with positive real part, by dense
// eigendecomposition. Test-oracle path: feasible only at toy vocabulary
// sizes, which is the point of the rank-based estimate above.
inline double exact_positive_ratio(const Mat<double>& M) {
  if (M.rows != M.cols)
    throw std::invalid_argument("exact_positive_ratio: non-square input");
  if (M.rows > 512)
    throw std::invalid_argument("exact_positive_ratio: matrix too large");
  Eigen::MatrixXd em(M.rows, M.cols);
  for (int i = 0; i < M.rows; ++i)
    for (int j = 0; j < M.cols; ++j) em(i, j) = M.at(i, j);
  Eigen::EigenSolver<Eigen::MatrixXd> solver(em, /*computeEigenvectors=*/false);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("exact_positive_ratio: eigensolver did not converge");
  const auto& ev = solver.eigenvalues();
  int pos = 0;
  for (Eigen::Index i = 0; i < ev.size(); ++i)
    if (ev[i].real() > 0.0) ++pos;
  return static_cast<double>(pos) / static_cast<double>(M.rows);
}

struct CopyingScoreOptions {
  // Rank by |trace| descending by default; signed mode ranks raw trace
  // descending instead, for when negative-trace heads should not score high.
  bool signed_trace = false;
  bool with_exact_ratio = false;
};

// Ranks every head by (outlier count ascending) and (trace descending),
// sums the two ranks; lower total = stronger copying behavior.
template <typename S>
CopyingHeadReport copying_head_scores(const WeightsT<S>& w,
                                      const CopyingScoreOptions& opts = {}) {
  const ModelConfig& cfg = w.cfg;
  std::vector<CopyingHeadRow> rows;
  std::vector<double> trace_keys;
  std::vector<int> outlier_keys;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto M = full_ov_matrix(w, HeadRef{l, h});
      CopyingHeadRow row;
      row.layer = l;
      row.head = h;
      row.trace = matrix_trace(M);
      row.outlier_count = iqr_outlier_count(gershgorin_boundary_points(M));
      if (opts.with_exact_ratio) row.exact_ratio = exact_positive_ratio(M);
      trace_keys.push_back(opts.signed_trace ? row.trace : std::abs(row.trace));
      outlier_keys.push_back(row.outlier_count);
      rows.push_back(row);
    }
  const auto tr =
      detail::competition_ranks(trace_keys, [](double a, double b) { return a > b; });
  const auto orr =
      detail::competition_ranks(outlier_keys, [](int a, int b) { return a < b; });
  for (size_t i = 0; i < rows.size(); ++i) {
    rows[i].trace_rank = tr[i];
    rows[i].outlier_rank = orr[i];
    rows[i].score = tr[i] + orr[i];
  }
  std::sort(rows.begin(), rows.end(), [](const CopyingHeadRow& a, const CopyingHeadRow& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.head < b.head;
  });
  CopyingHeadReport rep;
  rep.rows = std::move(rows);
  rep.has_exact = opts.with_exact_ratio;
  return rep;
}

inline void save_copying_report_csv(const CopyingHeadReport& rep,
                                    const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "layer,head,trace,outlier_count,trace_rank,outlier_rank,score";
  if (rep.has_exact) f << ",exact_ratio";
  f << "\n";
  char buf[64];
  for (const auto& r : rep.rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.trace);
    f << r.layer << ',' << r.head << ',' << buf << ',' << r.outlier_count << ','
      << r.trace_rank << ',' << r.outlier_rank << ',' << r.score;
    if (rep.has_exact) {
      std::snprintf(buf, sizeof buf, "%.17g", r.exact_ratio);
      f << ',' << buf;
    }
    f << "\n";
  }
}

inline nlohmann::ordered_json copying_report_to_json(const CopyingHeadReport& rep) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rep.rows) {
    nlohmann::ordered_json row{{"layer", r.layer},
                               {"head", r.head},
                               {"trace", r.trace},
                               {"outlier_count", r.outlier_count},
                               {"trace_rank", r.trace_rank},
                               {"outlier_rank", r.outlier_rank},
                               {"score", r.score}};
    if (rep.has_exact) row["exact_ratio"] = r.exact_ratio;
    arr.push_back(std::move(row));
  }
  return nlohmann::ordered_json{{"heads", std::move(arr)}};
}

inline CopyingHeadReport copying_report_from_json(const nlohmann::json& j) {
  CopyingHeadReport rep;
  for (const auto& row : j.at("heads")) {
    CopyingHeadRow r;
    r.layer = row.at("layer").get<int>();
    r.head = row.at("head").get<int>();
    r.trace = row.at("trace").get<double>();
    r.outlier_count = row.at("outlier_count").get<int>();
    r.trace_rank = row.at("trace_rank").get<int>();
    r.outlier_rank = row.at("outlier_rank").get<int>();
    r.score = row.at("score").get<int>();
    if (row.contains("exact_ratio")) {
      r.exact_ratio = row.at("exact_ratio").get<double>();
      rep.has_exact = true;
    }
    rep.rows.push_back(r);
  }
  return rep;
}

inline void save_copying_report_json(const CopyingHeadReport& rep,
                                     const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << copying_report_to_json(rep).dump(1) << "\n";
}

inline CopyingHeadReport load_copying_report(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  f >> j;
  return copying_report_from_json(j);
}

}  // namespace raglens
