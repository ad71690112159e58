#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raglens/copying.hpp"
#include "raglens/metrics.hpp"
#include "raglens/scores.hpp"
#include "raglens/transformer.hpp"

namespace raglens {

// Calibrated detector state: the copying-head set, the knowledge-FFN layer
// set, regression coefficients, the decision threshold, and the decode-time
// reweighting parameters.
struct DetectorConfig {
  std::vector<HeadRef> heads;      // scored ECS sources
  std::vector<int> ffn_layers;     // scored PKS sources
  double alpha = 1.0;
  double beta = 1.0;
  double threshold = 0.0;
  int chunk_size = 4;
  double alpha2 = 5.0;
  double beta2 = 0.2;
  double tau = std::numeric_limits<double>::infinity();

  void validate() const {
    if (!(alpha > 0) || !(beta > 0))
      throw std::invalid_argument("DetectorConfig: alpha and beta must be positive");
    if (heads.empty() || ffn_layers.empty())
      throw std::invalid_argument("DetectorConfig: head and FFN sets must be nonempty");
    if (chunk_size < 1) throw std::invalid_argument("DetectorConfig: chunk_size >= 1");
    if (!(alpha2 > 1)) throw std::invalid_argument("DetectorConfig: alpha2 must be > 1");
    if (!(beta2 > 0 && beta2 < 1))
      throw std::invalid_argument("DetectorConfig: beta2 must be in (0, 1)");
  }
};

inline nlohmann::ordered_json detector_config_to_json(const DetectorConfig& c) {
  nlohmann::ordered_json heads = nlohmann::ordered_json::array();
  for (const auto& h : c.heads)
    heads.push_back(nlohmann::ordered_json{{"layer", h.layer}, {"head", h.head}});
  return nlohmann::ordered_json{{"heads", std::move(heads)},
                                {"ffn_layers", c.ffn_layers},
                                {"alpha", c.alpha},
                                {"beta", c.beta},
                                {"threshold", c.threshold},
                                {"chunk_size", c.chunk_size},
                                {"alpha2", c.alpha2},
                                {"beta2", c.beta2},
                                {"tau", c.tau}};
}

inline DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  DetectorConfig c;
  for (const auto& h : j.at("heads"))
    c.heads.push_back(HeadRef{h.at("layer").get<int>(), h.at("head").get<int>()});
  c.ffn_layers = j.at("ffn_layers").get<std::vector<int>>();
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.threshold = j.at("threshold").get<double>();
  c.chunk_size = j.at("chunk_size").get<int>();
  c.alpha2 = j.at("alpha2").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.tau = j.at("tau").is_string() ? std::numeric_limits<double>::infinity()
                                  : j.at("tau").get<double>();
  return c;
}

inline void save_detector_config(const DetectorConfig& c, const std::string& path) {
  auto j = detector_config_to_json(c);
  if (std::isinf(c.tau)) j["tau"] = "inf";
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << j.dump(2) << "\n";
}

inline DetectorConfig load_detector_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  f >> j;
  return detector_config_from_json(j);
}

// Per-layer correlation between response-level PKS and the labels; layers
// whose FFN output tracks hallucination get picked first. A layer with
// constant scores cannot correlate and ranks last.
inline std::vector<int> rank_ffn_layers(const std::map<std::string, ScoreTable>& tables,
                                        const std::vector<std::string>& ids,
                                        const std::vector<int>& labels) {
  if (ids.empty()) throw std::invalid_argument("rank_ffn_layers: no samples");
  const int L = tables.at(ids.front()).n_layers;
  std::vector<double> lab(labels.begin(), labels.end());
  std::vector<std::pair<double, int>> pcc(L);
  for (int l = 0; l < L; ++l) {
    std::vector<double> xs;
    xs.reserve(ids.size());
    for (const auto& id : ids) xs.push_back(tables.at(id).pks_resp[l]);
    double r;
    try {
      r = pearson(xs, lab);
    } catch (const std::invalid_argument&) {
      r = -std::numeric_limits<double>::infinity();  // constant column
    }
    pcc[l] = {r, l};
  }
  std::sort(pcc.begin(), pcc.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> order(L);
  for (int i = 0; i < L; ++i) order[i] = pcc[i].second;
  return order;
}

// Chooses the detector's source sets: the strongest copying heads by rank
// score, and the FFN layers most correlated with the labels.
inline std::pair<std::vector<HeadRef>, std::vector<int>> select_sets(
    const CopyingHeadReport& report, const std::map<std::string, ScoreTable>& tables,
    const std::vector<std::string>& ids, const std::vector<int>& labels, int top_a,
    int top_f) {
  if (top_a < 1 || top_f < 1)
    throw std::invalid_argument("select_sets: top_a and top_f must be >= 1");
  bool has0 = false, has1 = false;
  for (int l : labels) (l == 1 ? has1 : has0) = true;
  if (!has0 || !has1)
    throw std::invalid_argument("select_sets: calibration split needs both labels");

  std::vector<HeadRef> heads;
  const int na = std::min<int>(top_a, static_cast<int>(report.rows.size()));
  for (int i = 0; i < na; ++i)
    heads.push_back(HeadRef{report.rows[i].layer, report.rows[i].head});

  const auto order = rank_ffn_layers(tables, ids, labels);
  const int nf = std::min<int>(top_f, static_cast<int>(order.size()));
  std::vector<int> ffn(order.begin(), order.begin() + nf);
  return {heads, ffn};
}

// Token-level hallucination score: mean over response tokens of the
// alpha-weighted PKS sum minus the beta-weighted ECS sum.
inline double h_token(const ScoreTable& t, const DetectorConfig& cfg) {
  if (t.n_response < 1) throw std::invalid_argument("h_token: empty response");
  for (const auto& h : cfg.heads)
    if (h.layer < 0 || h.layer >= t.n_layers || h.head < 0 || h.head >= t.n_heads)
      throw std::invalid_argument("h_token: head outside score table");
  for (int l : cfg.ffn_layers)
    if (l < 0 || l >= t.n_layers)
      throw std::invalid_argument("h_token: layer outside score table");
  double acc = 0.0;
  for (int i = 0; i < t.n_response; ++i) {
    double v = 0.0;
    for (int l : cfg.ffn_layers) v += cfg.alpha * t.pks_tok[i][l];
    for (const auto& h : cfg.heads) v -= cfg.beta * t.ecs_tok[i][h.layer][h.head];
    acc += v;
  }
  return acc / t.n_response;
}

struct ChunkSpan {
  int start = 0;
  int end = 0;  // half-open
};

// Fixed-size tiling; the last span may be short.
inline std::vector<ChunkSpan> chunk_text(int begin, int end, int chunk_size) {
  if (begin >= end) throw std::invalid_argument("chunk_text: empty span");
  if (chunk_size < 1) throw std::invalid_argument("chunk_text: chunk_size >= 1");
  std::vector<ChunkSpan> out;
  for (int s = begin; s < end; s += chunk_size)
    out.push_back(ChunkSpan{s, std::min(end, s + chunk_size)});
  return out;
}

// The context chunk this response chunk attends to most, under one head's
// attention matrix: mean-pooled submatrix weight, argmax, ties to the
// earliest chunk.
template <typename S>
int chunk_attention_pair(const Mat<S>& attn, const std::vector<ChunkSpan>& ctx_chunks,
                         ChunkSpan resp_chunk) {
  if (ctx_chunks.empty()) throw std::invalid_argument("chunk_attention_pair: no chunks");
  if (resp_chunk.start >= resp_chunk.end)
    throw std::invalid_argument("chunk_attention_pair: empty response chunk");
  int best = 0;
  double best_w = -1.0;
  for (size_t ci = 0; ci < ctx_chunks.size(); ++ci) {
    const auto& c = ctx_chunks[ci];
    if (c.start >= c.end) throw std::invalid_argument("chunk_attention_pair: empty chunk");
    double acc = 0.0;
    for (int i = resp_chunk.start; i < resp_chunk.end; ++i)
      for (int j = c.start; j < c.end; ++j) acc += static_cast<double>(attn.at(i, j));
    acc /= static_cast<double>((resp_chunk.end - resp_chunk.start) *
                               (c.end - c.start));
    if (acc > best_w) {
      best_w = acc;
      best = static_cast<int>(ci);
    }
  }
  return best;
}

struct ChunkScores {
  std::vector<std::vector<double>> ecs_resp;  // [l][h], mean over response chunks
  std::vector<double> pks_resp;               // [l]
};

namespace detail {

template <typename S>
std::vector<double> mean_pooled_state(const Mat<S>& x, ChunkSpan span) {
  std::vector<double> e(x.cols, 0.0);
  for (int i = span.start; i < span.end; ++i)
    for (int c = 0; c < x.cols; ++c) e[c] += static_cast<double>(x.at(i, c));
  for (double& v : e) v /= static_cast<double>(span.end - span.start);
  return e;
}

}  // namespace detail

// Chunk-level scores: response chunks pair with their most-attended context
// chunk per head; similarity is the cosine of mean-pooled last-layer states,
// and chunk PKS is the mean of its tokens' PKS.
template <typename S>
ChunkScores chunk_scores(const WeightsT<S>& w, const ResidualTraceT<S>& tr,
                         const Sample& sample, int chunk_size) {
  const int L = tr.cfg.n_layers, H = tr.cfg.n_heads;
  const auto ctx_chunks =
      chunk_text(sample.context_begin(), sample.context_end(), chunk_size);
  const auto resp_chunks =
      chunk_text(sample.response_begin(), sample.response_end(), chunk_size);
  const Mat<S>& xl = tr.x_post[L - 1];

  ChunkScores out;
  out.ecs_resp.assign(L, std::vector<double>(H, 0.0));
  out.pks_resp.assign(L, 0.0);
  const double inv_chunks = 1.0 / static_cast<double>(resp_chunks.size());

  std::vector<std::vector<double>> ctx_emb(ctx_chunks.size());
  for (size_t ci = 0; ci < ctx_chunks.size(); ++ci)
    ctx_emb[ci] = detail::mean_pooled_state(xl, ctx_chunks[ci]);

  for (const auto& rc : resp_chunks) {
    const auto remb = detail::mean_pooled_state(xl, rc);
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        const int ci = chunk_attention_pair(tr.attn[l][h], ctx_chunks, rc);
        out.ecs_resp[l][h] += inv_chunks * cosine(std::span<const double>(remb),
                                                  std::span<const double>(ctx_emb[ci]));
      }
      double pks_mean = 0.0;
      for (int i = rc.start; i < rc.end; ++i) pks_mean += pks_token(w, tr, i, l);
      out.pks_resp[l] += inv_chunks * pks_mean / (rc.end - rc.start);
    }
  }
  return out;
}

// Chunk-level hallucination score over the selected sets.
template <typename S>
double h_chunk(const WeightsT<S>& w, const ResidualTraceT<S>& tr, const Sample& sample,
               const DetectorConfig& cfg) {
  const auto cs = chunk_scores(w, tr, sample, cfg.chunk_size);
  double v = 0.0;
  for (int l : cfg.ffn_layers) {
    if (l < 0 || l >= static_cast<int>(cs.pks_resp.size()))
      throw std::invalid_argument("h_chunk: layer out of range");
    v += cfg.alpha * cs.pks_resp[l];
  }
  for (const auto& h : cfg.heads) {
    if (h.layer < 0 || h.layer >= static_cast<int>(cs.ecs_resp.size()) || h.head < 0 ||
        h.head >= static_cast<int>(cs.ecs_resp[0].size()))
      throw std::invalid_argument("h_chunk: head out of range");
    v -= cfg.beta * cs.ecs_resp[h.layer][h.head];
  }
  return v;
}

struct CalibrationGrid {
  std::vector<double> betas = {0.25, 0.5, 1.0, 2.0, 4.0};
  std::vector<int> top_as = {1, 2, 3, 4};
  std::vector<int> top_fs = {1, 2};
};

struct CalibrationResult {
  DetectorConfig config;
  double validation_auc = 0.0;
};

// Exhaustive grid search over beta and the set sizes with alpha pinned at 1,
// maximizing validation AUC of the token-level score. Grid order is fixed
// (beta, then top_a, then top_f) and the first best wins, so repeated runs
// return the identical configuration. The decision threshold then maximizes
// F1 on the same validation set.
inline CalibrationResult calibrate(const CopyingHeadReport& report,
                                   const std::map<std::string, ScoreTable>& tables,
                                   const std::vector<std::string>& ids,
                                   const std::vector<int>& labels,
                                   const CalibrationGrid& grid = {}) {
  if (ids.size() != labels.size())
    throw std::invalid_argument("calibrate: ids/labels length mismatch");
  if (ids.empty()) throw std::invalid_argument("calibrate: empty validation set");
  bool has0 = false, has1 = false;
  for (int l : labels) (l == 1 ? has1 : has0) = true;
  if (!has0 || !has1)
    throw std::invalid_argument("calibrate: validation set has a single class");
  if (grid.betas.empty() || grid.top_as.empty() || grid.top_fs.empty())
    throw std::invalid_argument("calibrate: empty grid");

  CalibrationResult best;
  best.validation_auc = -1.0;
  for (double beta : grid.betas)
    for (int top_a : grid.top_as)
      for (int top_f : grid.top_fs) {
        auto [heads, ffn] = select_sets(report, tables, ids, labels, top_a, top_f);
        DetectorConfig cfg;
        cfg.heads = heads;
        cfg.ffn_layers = ffn;
        cfg.alpha = 1.0;
        cfg.beta = beta;
        std::vector<double> scores;
        scores.reserve(ids.size());
        for (const auto& id : ids) scores.push_back(h_token(tables.at(id), cfg));
        const double a = auc(scores, labels);
        if (a > best.validation_auc) {
          best.validation_auc = a;
          best.config = cfg;
        }
      }
  // threshold for the winning configuration
  std::vector<double> scores;
  scores.reserve(ids.size());
  for (const auto& id : ids) scores.push_back(h_token(tables.at(id), best.config));
  best.config.threshold = best_f1_threshold(scores, labels);
  return best;
}

}  // namespace raglens
