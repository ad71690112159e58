#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "raglens/detector.hpp"
#include "raglens/scores.hpp"
#include "raglens/transformer.hpp"

namespace raglens {

// Forward pass with the copying-head outputs scaled by alpha2 and the
// knowledge-FFN outputs scaled by beta2 before they enter the residual
// stream. beta2 = 0 is reachable only through ForwardMods directly (test
// mode); this entry point keeps the decode-time contract.
template <typename S>
ResidualTraceT<S> reweighted_forward(const WeightsT<S>& w, const std::vector<int>& tokens,
                                     const std::vector<HeadRef>& heads,
                                     const std::vector<int>& ffn_layers, double alpha2,
                                     double beta2) {
  if (!(alpha2 >= 1.0))
    throw std::invalid_argument("reweighted_forward: alpha2 must be >= 1");
  if (!(beta2 > 0.0 && beta2 <= 1.0))
    throw std::invalid_argument("reweighted_forward: beta2 must be in (0, 1]");
  ForwardMods mods;
  for (const auto& h : heads) mods.head_scale.push_back({h, alpha2});
  for (int l : ffn_layers) mods.ffn_scale.push_back({l, beta2});
  return forward_trace(w, tokens, mods);
}

// Single-position hallucination score at the generating position: the
// alpha-weighted PKS sum minus the beta-weighted ECS sum, using the last row
// of the trace.
template <typename S>
double h_token_at_position(const WeightsT<S>& w, const ResidualTraceT<S>& tr,
                           int position, int ctx_begin, int ctx_end,
                           const DetectorConfig& cfg, double k_percent) {
  double v = 0.0;
  for (int l : cfg.ffn_layers) v += cfg.alpha * pks_token(w, tr, position, l);
  for (const auto& h : cfg.heads)
    v -= cfg.beta * ecs_token(tr, position, h, ctx_begin, ctx_end, k_percent);
  return v;
}

// Score a prompt before any generation: the token score at the last prompt
// position, i.e. the state that will produce the first response token. Used
// to calibrate tau.
template <typename S>
double aarf_decision_score(const WeightsT<S>& w, const std::vector<int>& query,
                           const std::vector<int>& context, const DetectorConfig& cfg,
                           double k_percent) {
  if (context.empty()) throw std::invalid_argument("aarf: missing context span");
  std::vector<int> seq = query;
  seq.insert(seq.end(), context.begin(), context.end());
  auto tr = forward_trace(w, seq);
  return h_token_at_position(w, tr, tr.seq_len() - 1,
                             static_cast<int>(query.size()),
                             static_cast<int>(seq.size()), cfg, k_percent);
}

struct AarfStep {
  int position = 0;  // the position whose state produced this token
  double h_t = 0.0;
  bool triggered = false;
};

// Greedy decoding with decode-time mitigation: at each step the token score
// is measured at the generating position; past tau, the step is recomputed
// with copying heads amplified and knowledge FFNs damped, and that argmax is
// emitted instead. tau = +inf therefore reproduces greedy decoding exactly.
template <typename S>
std::vector<int> aarf_decode(const WeightsT<S>& w, const std::vector<int>& query,
                             const std::vector<int>& context, const DetectorConfig& cfg,
                             int max_new, int eos_id, double k_percent,
                             std::vector<AarfStep>* log = nullptr) {
  if (query.empty()) throw std::invalid_argument("aarf_decode: empty query");
  if (context.empty()) throw std::invalid_argument("aarf_decode: missing context span");
  const int ctx_begin = static_cast<int>(query.size());
  const int ctx_end = static_cast<int>(query.size() + context.size());

  ForwardMods mods;
  for (const auto& h : cfg.heads) mods.head_scale.push_back({h, cfg.alpha2});
  for (int l : cfg.ffn_layers) mods.ffn_scale.push_back({l, cfg.beta2});

  std::vector<int> seq = query;
  seq.insert(seq.end(), context.begin(), context.end());
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.size()) >= w.cfg.max_seq_len) break;
    auto tr = forward_trace(w, seq);
    const int pos = tr.seq_len() - 1;
    const double h = h_token_at_position(w, tr, pos, ctx_begin, ctx_end, cfg, k_percent);
    const bool trigger = h > cfg.tau;
    int next;
    if (trigger) {
      auto rt = forward_trace(w, seq, mods);
      next = argmax_row(rt.logits, pos);
    } else {
      next = argmax_row(tr.logits, pos);
    }
    if (log) log->push_back(AarfStep{pos, h, trigger});
    seq.push_back(next);
    if (next == eos_id) break;
  }
  return seq;
}

}  // namespace raglens
