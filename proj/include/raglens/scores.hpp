#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raglens/lens.hpp"
#include "raglens/samples.hpp"
#include "raglens/transformer.hpp"

namespace raglens {

// Per-sample external-context scores (per response token, layer, head) and
// parametric-knowledge scores (per response token, layer), with their
// response-level means.
struct ScoreTable {
  std::string sample_id;
  int n_layers = 0;
  int n_heads = 0;
  int n_response = 0;
  std::vector<std::vector<std::vector<double>>> ecs_tok;  // [t][l][h]
  std::vector<std::vector<double>> pks_tok;               // [t][l]
  std::vector<std::vector<double>> ecs_resp;              // [l][h]
  std::vector<double> pks_resp;                           // [l]
};

// Context indices holding the most attention mass in the row; the selection
// keeps max(1, floor(k% of span)) entries, ties to the lower index. Returned
// ascending.
template <typename S>
std::vector<int> attended_index_set(const S* attention_row, int row_len,
                                    int span_begin, int span_end, double k_percent) {
  if (span_begin >= span_end) throw std::invalid_argument("empty context span");
  if (span_begin < 0 || span_end > row_len)
    throw std::invalid_argument("context span outside attention row");
  if (!(k_percent > 0.0) || k_percent > 100.0)
    throw std::invalid_argument("k_percent must be in (0, 100]");
  const int span = span_end - span_begin;
  const int keep = std::max(1, static_cast<int>(std::floor(k_percent / 100.0 * span)));
  std::vector<int> idx(span);
  std::iota(idx.begin(), idx.end(), span_begin);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (attention_row[a] != attention_row[b])
      return attention_row[a] > attention_row[b];
    return a < b;
  });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Cosine between the mean final-layer stream state over attended context
// tokens and the state at `position`. "Final layer" is the residual stream
// after the last layer, before the final layernorm.
template <typename S>
double ecs_token(const ResidualTraceT<S>& tr, int position, HeadRef head,
                 int span_begin, int span_end, double k_percent) {
  const int T = tr.seq_len();
  if (position < 0 || position >= T)
    throw std::invalid_argument("ecs_token: position out of range");
  const auto& a = tr.attn[head.layer][head.head];
  const auto idxs =
      attended_index_set(a.row(position), position + 1, span_begin, span_end,
                         k_percent);
  const Mat<S>& xl = tr.x_post[tr.cfg.n_layers - 1];
  const int d = tr.cfg.d_model;
  std::vector<double> e(d, 0.0);
  for (int j : idxs)
    for (int c = 0; c < d; ++c) e[c] += static_cast<double>(xl.at(j, c));
  for (double& v : e) v /= static_cast<double>(idxs.size());
  std::vector<double> xn(d);
  for (int c = 0; c < d; ++c) xn[c] = static_cast<double>(xl.at(position, c));
  return cosine(std::span<const double>(e), std::span<const double>(xn));
}

// Divergence the FFN of `layer` induces on the lens distribution at
// `position`: zero means the FFN added nothing the unembedding can see.
template <typename S>
double pks_token(const WeightsT<S>& w, const ResidualTraceT<S>& tr, int position,
                 int layer) {
  if (layer < 0 || layer >= tr.cfg.n_layers)
    throw std::invalid_argument("pks_token: layer out of range");
  if (position < 0 || position >= tr.seq_len())
    throw std::invalid_argument("pks_token: position out of range");
  const auto p = lens_distribution(w, tr.x_mid[layer].row(position));
  const auto q = lens_distribution(w, tr.x_post[layer].row(position));
  return jsd(p, q);
}

// Scores every response position of a teacher-forced sample trace and
// averages them into response-level values.
template <typename S>
ScoreTable response_scores(const WeightsT<S>& w, const ResidualTraceT<S>& tr,
                           const Sample& sample, double k_percent) {
  sample.validate();
  const int L = tr.cfg.n_layers, H = tr.cfg.n_heads;
  const int rb = sample.response_begin(), re = sample.response_end();
  if (re != tr.seq_len())
    throw std::invalid_argument("response_scores: trace does not cover the sample");
  const int R = re - rb;

  ScoreTable t;
  t.sample_id = sample.id;
  t.n_layers = L;
  t.n_heads = H;
  t.n_response = R;
  t.ecs_tok.assign(R, std::vector<std::vector<double>>(L, std::vector<double>(H)));
  t.pks_tok.assign(R, std::vector<double>(L));
  for (int i = 0; i < R; ++i) {
    const int pos = rb + i;
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h)
        t.ecs_tok[i][l][h] = ecs_token(tr, pos, HeadRef{l, h}, sample.context_begin(),
                                       sample.context_end(), k_percent);
      t.pks_tok[i][l] = pks_token(w, tr, pos, l);
    }
  }
  t.ecs_resp.assign(L, std::vector<double>(H, 0.0));
  t.pks_resp.assign(L, 0.0);
  for (int i = 0; i < R; ++i)
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) t.ecs_resp[l][h] += t.ecs_tok[i][l][h] / R;
      t.pks_resp[l] += t.pks_tok[i][l] / R;
    }
  return t;
}

// RQ1 aggregation over a labeled split: per-head ECS difference
// (truthful minus hallucinated) and per-layer PKS difference
// (hallucinated minus truthful).
struct DeltaScores {
  std::vector<std::vector<double>> decs;  // [l][h]
  std::vector<double> dpks;               // [l]
};

inline DeltaScores delta_scores(const std::map<std::string, ScoreTable>& tables,
                                const DatasetSplit& split) {
  if (split.truthful.empty() || split.hallucinated.empty())
    throw std::invalid_argument("delta_scores: both split sides must be nonempty");
  const auto& first = tables.at(split.truthful.front());
  const int L = first.n_layers, H = first.n_heads;
  DeltaScores d;
  d.decs.assign(L, std::vector<double>(H, 0.0));
  d.dpks.assign(L, 0.0);
  const auto accumulate = [&](const std::vector<std::string>& ids, double sign_ecs,
                              double sign_pks) {
    for (const auto& id : ids) {
      const auto it = tables.find(id);
      if (it == tables.end())
        throw std::invalid_argument("delta_scores: missing table for sample " + id);
      const ScoreTable& t = it->second;
      for (int l = 0; l < L; ++l) {
        for (int h = 0; h < H; ++h)
          d.decs[l][h] += sign_ecs * t.ecs_resp[l][h] / ids.size();
        d.dpks[l] += sign_pks * t.pks_resp[l] / ids.size();
      }
    }
  };
  accumulate(split.truthful, +1.0, -1.0);
  accumulate(split.hallucinated, -1.0, +1.0);
  return d;
}

inline nlohmann::ordered_json score_table_to_json(const ScoreTable& t) {
  return nlohmann::ordered_json{
      {"n_layers", t.n_layers},
      {"n_heads", t.n_heads},
      {"n_response", t.n_response},
      {"token", {{"ecs", t.ecs_tok}, {"pks", t.pks_tok}}},
      {"response", {{"ecs", t.ecs_resp}, {"pks", t.pks_resp}}}};
}

inline ScoreTable score_table_from_json(const std::string& id, const nlohmann::json& j) {
  ScoreTable t;
  t.sample_id = id;
  t.n_layers = j.at("n_layers").get<int>();
  t.n_heads = j.at("n_heads").get<int>();
  t.n_response = j.at("n_response").get<int>();
  t.ecs_tok = j.at("token").at("ecs").get<decltype(t.ecs_tok)>();
  t.pks_tok = j.at("token").at("pks").get<decltype(t.pks_tok)>();
  t.ecs_resp = j.at("response").at("ecs").get<decltype(t.ecs_resp)>();
  t.pks_resp = j.at("response").at("pks").get<decltype(t.pks_resp)>();
  return t;
}

// JSON container: top-level object keyed by sample id, insertion-ordered.
inline void save_score_tables(const std::vector<ScoreTable>& tables,
                              const std::string& path) {
  nlohmann::ordered_json root;
  for (const auto& t : tables) root[t.sample_id] = score_table_to_json(t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << root.dump(1) << "\n";
}

inline std::map<std::string, ScoreTable> load_score_tables(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  nlohmann::json root;
  f >> root;
  std::map<std::string, ScoreTable> out;
  for (auto it = root.begin(); it != root.end(); ++it)
    out[it.key()] = score_table_from_json(it.key(), it.value());
  return out;
}

// Flat CSV: one row per (token, layer, head); the layer-level pks value
// repeats across that layer's heads.
inline void save_score_csv(const std::vector<ScoreTable>& tables,
                           const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "sample_id,layer,head,token_pos,ecs,pks\n";
  char buf[64];
  const auto fmt = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& t : tables)
    for (int i = 0; i < t.n_response; ++i)
      for (int l = 0; l < t.n_layers; ++l)
        for (int h = 0; h < t.n_heads; ++h)
          f << t.sample_id << ',' << l << ',' << h << ',' << i << ','
            << fmt(t.ecs_tok[i][l][h]) << ',' << fmt(t.pks_tok[i][l]) << "\n";
}

}  // namespace raglens
