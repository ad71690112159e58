#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raglens/samples.hpp"
#include "raglens/scores.hpp"
#include "raglens/transformer.hpp"

namespace raglens {

// Forward with targeted heads' pre-softmax attention scores replaced by
// seeded standard-normal noise.
template <typename S>
ResidualTraceT<S> noise_attention_forward(const WeightsT<S>& w,
                                          const std::vector<int>& tokens,
                                          const std::vector<HeadRef>& heads,
                                          uint64_t seed) {
  ForwardMods mods;
  mods.noise_heads = heads;
  mods.noise_seed = seed;
  return forward_trace(w, tokens, mods);
}

// Forward with targeted layers' FFN residual contributions multiplied by k.
template <typename S>
ResidualTraceT<S> amplify_ffn_forward(const WeightsT<S>& w,
                                      const std::vector<int>& tokens,
                                      const std::vector<int>& layers, double k) {
  if (!(k > 0)) throw std::invalid_argument("amplify_ffn_forward: k must be positive");
  ForwardMods mods;
  for (int l : layers) mods.ffn_scale.push_back({l, k});
  return forward_trace(w, tokens, mods);
}

// Same-layer control heads for an experimental set: nearest head index not
// in the experimental set and not already claimed, ties to the lower index.
// Heads are processed in (layer, head) order so the matching is stable.
inline std::vector<HeadRef> matched_controls(std::vector<HeadRef> experimental,
                                             int n_layers, int n_heads) {
  std::sort(experimental.begin(), experimental.end());
  std::set<std::pair<int, int>> taken;
  for (const auto& e : experimental) {
    if (e.layer < 0 || e.layer >= n_layers || e.head < 0 || e.head >= n_heads)
      throw std::invalid_argument("matched_controls: head out of range");
    taken.insert({e.layer, e.head});
  }
  std::vector<HeadRef> controls;
  for (const auto& e : experimental) {
    int best = -1;
    for (int cand = 0; cand < n_heads; ++cand) {
      if (taken.count({e.layer, cand})) continue;
      if (best == -1 || std::abs(cand - e.head) < std::abs(best - e.head)) best = cand;
    }
    if (best == -1)
      throw std::invalid_argument("matched_controls: no candidate left in layer " +
                                  std::to_string(e.layer));
    taken.insert({e.layer, best});
    controls.push_back(HeadRef{e.layer, best});
  }
  return controls;
}

// Nearest-layer controls for an experimental FFN set, same rules.
inline std::vector<int> matched_control_layers(std::vector<int> experimental,
                                               int n_layers) {
  std::sort(experimental.begin(), experimental.end());
  std::set<int> taken(experimental.begin(), experimental.end());
  for (int l : experimental)
    if (l < 0 || l >= n_layers)
      throw std::invalid_argument("matched_control_layers: layer out of range");
  std::vector<int> controls;
  for (int e : experimental) {
    int best = -1;
    for (int cand = 0; cand < n_layers; ++cand) {
      if (taken.count(cand)) continue;
      if (best == -1 || std::abs(cand - e) < std::abs(best - e)) best = cand;
    }
    if (best == -1)
      throw std::invalid_argument("matched_control_layers: no candidate layer left");
    taken.insert(best);
    controls.push_back(best);
  }
  return controls;
}

// Mean NLL over the response tokens of a sample under teacher forcing.
template <typename S>
double response_nll(const WeightsT<S>& w, const Sample& sample,
                    const ForwardMods& mods = {}) {
  const auto terms = nll_terms(w, sample.full(), mods);
  const int rb = sample.response_begin(), re = sample.response_end();
  double acc = 0.0;
  for (int i = rb - 1; i < re - 1; ++i) acc += terms[i];
  return acc / static_cast<double>(re - rb);
}

struct Rq2Row {
  std::string group;  // "experimental" | "control"
  std::string sample_id;
  double nll_base = 0.0;
  double nll_intervened = 0.0;
  double delta = 0.0;
};

struct Rq2Report {
  std::vector<Rq2Row> rows;
  double experimental_mean = 0.0;
  double control_mean = 0.0;
};

enum class InterventionKind { attention_noise, ffn_amplify };

struct InterventionSpec {
  InterventionKind kind = InterventionKind::attention_noise;
  std::vector<HeadRef> heads;  // attention_noise targets
  std::vector<int> layers;     // ffn_amplify targets
  double k = 10.0;
  uint64_t noise_seed = 0;
};

// Degradation comparison: how much the intervention hurts NLL on truthful
// samples when applied to the experimental set versus its matched controls.
template <typename S>
Rq2Report run_rq2(const WeightsT<S>& w, const std::vector<Sample>& truthful,
                  const InterventionSpec& spec) {
  if (truthful.empty()) throw std::invalid_argument("run_rq2: empty truthful set");
  const ModelConfig& cfg = w.cfg;

  ForwardMods exp_mods, ctl_mods;
  if (spec.kind == InterventionKind::attention_noise) {
    const auto controls = matched_controls(spec.heads, cfg.n_layers, cfg.n_heads);
    exp_mods.noise_heads = spec.heads;
    exp_mods.noise_seed = spec.noise_seed;
    ctl_mods.noise_heads = controls;
    ctl_mods.noise_seed = spec.noise_seed;
  } else {
    if (!(spec.k > 0)) throw std::invalid_argument("run_rq2: k must be positive");
    const auto controls = matched_control_layers(spec.layers, cfg.n_layers);
    for (int l : spec.layers) exp_mods.ffn_scale.push_back({l, spec.k});
    for (int l : controls) ctl_mods.ffn_scale.push_back({l, spec.k});
  }

  Rq2Report rep;
  double esum = 0.0, csum = 0.0;
  for (const auto& s : truthful) {
    const double base = response_nll(w, s);
    const double e = response_nll(w, s, exp_mods);
    const double c = response_nll(w, s, ctl_mods);
    rep.rows.push_back({"experimental", s.id, base, e, e - base});
    rep.rows.push_back({"control", s.id, base, c, c - base});
    esum += e - base;
    csum += c - base;
  }
  rep.experimental_mean = esum / static_cast<double>(truthful.size());
  rep.control_mean = csum / static_cast<double>(truthful.size());
  return rep;
}

inline void save_rq2_csv(const Rq2Report& rep, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "group,sample_id,nll_base,nll_intervened,delta\n";
  char buf[64];
  const auto fmt = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& r : rep.rows)
    f << r.group << ',' << r.sample_id << ',' << fmt(r.nll_base) << ','
      << fmt(r.nll_intervened) << ',' << fmt(r.delta) << "\n";
}

struct Rq3Report {
  double known_ecs = 0.0;   // mean response ECS over selected heads, known set
  double known_pks = 0.0;   // mean response PKS over selected layers, known set
  double hallu_ecs = 0.0;
  double hallu_pks = 0.0;
  size_t n_known = 0;
  size_t n_hallu = 0;

  double ecs_difference() const { return known_ecs - hallu_ecs; }
  double pks_difference() const { return known_pks - hallu_pks; }
};

// Compares score levels between samples the model answers correctly closed
// book (the "known" set) and hallucinated samples, over the selected sets.
inline Rq3Report run_rq3(const std::map<std::string, ScoreTable>& tables,
                         const std::vector<std::string>& known_ids,
                         const std::vector<std::string>& hallu_ids,
                         const std::vector<HeadRef>& heads,
                         const std::vector<int>& ffn_layers) {
  if (known_ids.empty() || hallu_ids.empty())
    throw std::invalid_argument("run_rq3: both sets must be nonempty");
  if (heads.empty() || ffn_layers.empty())
    throw std::invalid_argument("run_rq3: empty selection sets");
  const auto side = [&](const std::vector<std::string>& ids, double& ecs_out,
                        double& pks_out) {
    double eacc = 0.0, pacc = 0.0;
    for (const auto& id : ids) {
      const auto it = tables.find(id);
      if (it == tables.end())
        throw std::invalid_argument("run_rq3: missing table for sample " + id);
      const ScoreTable& t = it->second;
      double e = 0.0, p = 0.0;
      for (const auto& h : heads) e += t.ecs_resp[h.layer][h.head];
      for (int l : ffn_layers) p += t.pks_resp[l];
      eacc += e / static_cast<double>(heads.size());
      pacc += p / static_cast<double>(ffn_layers.size());
    }
    ecs_out = eacc / static_cast<double>(ids.size());
    pks_out = pacc / static_cast<double>(ids.size());
  };
  Rq3Report r;
  side(known_ids, r.known_ecs, r.known_pks);
  side(hallu_ids, r.hallu_ecs, r.hallu_pks);
  r.n_known = known_ids.size();
  r.n_hallu = hallu_ids.size();
  return r;
}

inline nlohmann::ordered_json rq3_to_json(const Rq3Report& r) {
  return nlohmann::ordered_json{
      {"known", {{"n", r.n_known}, {"mean_ecs", r.known_ecs}, {"mean_pks", r.known_pks}}},
      {"hallucinated",
       {{"n", r.n_hallu}, {"mean_ecs", r.hallu_ecs}, {"mean_pks", r.hallu_pks}}},
      {"ecs_difference", r.ecs_difference()},
      {"pks_difference", r.pks_difference()}};
}

}  // namespace raglens
