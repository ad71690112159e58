#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "raglens/aarf.hpp"
#include "raglens/copying.hpp"
#include "raglens/corpus.hpp"
#include "raglens/detector.hpp"
#include "raglens/interventions.hpp"
#include "raglens/metrics.hpp"
#include "raglens/samples.hpp"
#include "raglens/scores.hpp"
#include "raglens/train.hpp"

namespace raglens {

// Everything one seeded toy experiment needs: corpus shape, model shape,
// training budget, and the detector/mitigation settings.
struct ExperimentParams {
  uint64_t seed = 1;
  CorpusParams corpus;
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_ffn = 256;
  int max_seq_len = 32;
  TrainParams train;
  int max_conflicts = 384;
  double min_fact_accuracy = 0.9;
  double k_percent = 10.0;
  int chunk_size = 4;
  CalibrationGrid grid;
  int rq2_max_truthful = 40;
  int rq2_top_heads = 4;
  int rq2_top_ffn = 2;
  double rq2_k = 10.0;
  uint64_t rq2_noise_seed = 0xA0153;
  int aarf_max_new = 3;
  double alpha2 = 5.0;
  double beta2 = 0.2;

  ModelConfig model_config(int vocab) const {
    ModelConfig m;
    m.n_layers = n_layers;
    m.n_heads = n_heads;
    m.d_model = d_model;
    m.d_ffn = d_ffn;
    m.vocab_size = vocab;
    m.max_seq_len = max_seq_len;
    m.rng_seed = seed;
    return m;
  }
};

struct DetectionRow {
  std::string id;
  double h_token = 0.0;
  double h_chunk = 0.0;
  int label = 0;
  int predicted = 0;
};

struct DetectionSummary {
  double auc = 0.0;
  double pcc = 0.0;
  double accuracy = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct SplitIds {
  std::vector<std::string> calib_ids, eval_ids;
  std::vector<int> calib_labels, eval_labels;
};

struct Rq1Summary {
  double frac_heads_positive_decs = 0.0;  // share of heads with positive ECS gap
  double mean_late_dpks = 0.0;            // mean PKS gap over the upper layers
};

struct AarfSummary {
  double tau = 0.0;
  double baseline_rate = 0.0;   // greedy context-following on eval prompts
  double mitigated_rate = 0.0;  // same prompts decoded with mitigation
  int n_prompts = 0;
};

template <typename S = float>
struct ExperimentResultT {
  ExperimentResultT(Corpus c, WeightsT<S> w)
      : corpus(std::move(c)), weights(std::move(w)) {}

  Corpus corpus;
  WeightsT<S> weights;
  double fact_accuracy = 0.0;
  ConflictBuild conflicts;
  std::map<std::string, ScoreTable> tables;
  CopyingHeadReport copying;
  SplitIds split;
  CalibrationResult calibration;
  std::vector<DetectionRow> eval_rows;
  DetectionSummary token_summary, chunk_summary;
  Rq1Summary rq1;
  Rq2Report rq2_noise, rq2_amplify;
  Rq3Report rq3;
  AarfSummary aarf;
};

using ExperimentResult = ExperimentResultT<float>;

template <typename S>
std::map<std::string, ScoreTable> compute_score_tables(const WeightsT<S>& w,
                                                       const std::vector<Sample>& samples,
                                                       double k_percent) {
  std::map<std::string, ScoreTable> tables;
  for (const auto& s : samples) {
    auto tr = forward_trace(w, s.full());
    tables.emplace(s.id, response_scores(w, tr, s, k_percent));
  }
  return tables;
}

// Alternating split by file position: even indices calibrate, odd evaluate.
// Positional, not random, so the same sample file always splits the same way.
inline SplitIds split_for_calibration(const std::vector<Sample>& samples) {
  SplitIds out;
  for (size_t i = 0; i < samples.size(); ++i) {
    if (i % 2 == 0) {
      out.calib_ids.push_back(samples[i].id);
      out.calib_labels.push_back(samples[i].label);
    } else {
      out.eval_ids.push_back(samples[i].id);
      out.eval_labels.push_back(samples[i].label);
    }
  }
  return out;
}

inline DetectionSummary summarize_detection(const std::vector<double>& scores,
                                            const std::vector<int>& labels,
                                            double threshold) {
  DetectionSummary s;
  s.auc = auc(scores, labels);
  std::vector<double> lab(labels.begin(), labels.end());
  s.pcc = pearson(scores, lab);
  const auto st = binary_stats(scores, labels, threshold);
  s.accuracy = st.accuracy;
  s.recall = st.recall;
  s.f1 = st.f1;
  return s;
}

// Scores one subset of samples with both detector variants. `predicted` on
// each row follows the token-level score against the calibrated threshold.
template <typename S>
std::vector<DetectionRow> detection_rows(const WeightsT<S>& w,
                                         const std::vector<Sample>& samples,
                                         const std::vector<std::string>& ids,
                                         const std::map<std::string, ScoreTable>& tables,
                                         const DetectorConfig& cfg) {
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<DetectionRow> rows;
  rows.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end())
      throw std::invalid_argument("detection_rows: unknown sample id " + id);
    const Sample& s = *it->second;
    DetectionRow r;
    r.id = id;
    r.label = s.label;
    r.h_token = h_token(tables.at(id), cfg);
    auto tr = forward_trace(w, s.full());
    r.h_chunk = h_chunk(w, tr, s, cfg);
    r.predicted = r.h_token >= cfg.threshold ? 1 : 0;
    rows.push_back(std::move(r));
  }
  return rows;
}

// Mean score gaps between truthful and hallucinated samples: the share of
// heads whose context similarity drops on hallucinations, and the mean
// upper-half-layer PKS rise.
inline Rq1Summary run_rq1(const std::map<std::string, ScoreTable>& tables,
                          const DatasetSplit& split, int n_layers) {
  const auto d = delta_scores(tables, split);
  Rq1Summary out;
  int positive = 0, total = 0;
  for (const auto& row : d.decs)
    for (double v : row) {
      positive += v > 0 ? 1 : 0;
      ++total;
    }
  out.frac_heads_positive_decs = static_cast<double>(positive) / total;
  double acc = 0.0;
  int n = 0;
  for (int l = n_layers / 2; l < n_layers; ++l) {
    acc += d.dpks[l];
    ++n;
  }
  out.mean_late_dpks = acc / n;
  return out;
}

// Threshold for decode-time triggering, fit on prompt-only decision scores of
// the calibration split.
template <typename S>
double calibrate_tau(const WeightsT<S>& w, const std::vector<Sample>& samples,
                     const std::vector<std::string>& ids,
                     const std::vector<int>& labels, const DetectorConfig& cfg,
                     double k_percent) {
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<double> scores;
  scores.reserve(ids.size());
  for (const auto& id : ids) {
    const Sample& s = *by_id.at(id);
    scores.push_back(aarf_decision_score(w, s.query, s.context, cfg, k_percent));
  }
  return best_f1_threshold(scores, labels);
}

namespace detail {

inline bool contains_token(const std::vector<int>& seq, size_t from, int token) {
  for (size_t i = from; i < seq.size(); ++i)
    if (seq[i] == token) return true;
  return false;
}

}  // namespace detail

// Context-following rates on conflict prompts: how often the decoded response
// echoes the context's (counterfactual) object, greedy versus mitigated.
template <typename S>
AarfSummary aarf_rates(const WeightsT<S>& w, const std::vector<Sample>& samples,
                       const std::vector<std::string>& ids, const DetectorConfig& cfg,
                       int max_new, double k_percent) {
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  AarfSummary out;
  out.tau = cfg.tau;
  int base_follow = 0, mit_follow = 0;
  for (const auto& id : ids) {
    const Sample& s = *by_id.at(id);
    const int ctx_tok = s.context[3];  // [ctx s r o' ans]
    std::vector<int> prompt = s.query;
    prompt.insert(prompt.end(), s.context.begin(), s.context.end());
    const auto base = greedy_decode(w, prompt, max_new, kTokEos);
    base_follow += detail::contains_token(base, prompt.size(), ctx_tok) ? 1 : 0;
    const auto mit = aarf_decode(w, s.query, s.context, cfg, max_new, kTokEos, k_percent);
    mit_follow += detail::contains_token(mit, prompt.size(), ctx_tok) ? 1 : 0;
  }
  out.n_prompts = static_cast<int>(ids.size());
  out.baseline_rate = static_cast<double>(base_follow) / out.n_prompts;
  out.mitigated_rate = static_cast<double>(mit_follow) / out.n_prompts;
  return out;
}

// The "known" side of the closed-book comparison: truthful samples whose
// underlying fact the model answers correctly without context.
template <typename S>
std::vector<std::string> known_sample_ids(const WeightsT<S>& w, const Corpus& corpus,
                                          const std::vector<Sample>& samples,
                                          const std::vector<std::string>& truthful_ids) {
  std::map<std::pair<int, int>, FactTriple> fact_of;
  for (const auto& f : corpus.facts) fact_of[{f.subject, f.relation}] = f;
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<std::string> known;
  for (const auto& id : truthful_ids) {
    const Sample& s = *by_id.at(id);
    const int subj = s.query[1] - kNumMarkers;
    const int rel = s.query[2] - kNumMarkers - corpus.params.n_entities;
    const auto it = fact_of.find({subj, rel});
    if (it == fact_of.end())
      throw std::invalid_argument("known_sample_ids: sample " + id +
                                  " references no corpus fact");
    if (closed_book_knows(w, corpus, it->second)) known.push_back(id);
  }
  return known;
}

// One seeded end-to-end run: corpus, training, conflicts, scores, copying
// ranks, calibration, held-out detection, the three research-question
// analyses, and the mitigation rates.
template <typename S = float>
ExperimentResultT<S> run_toy_experiment(const ExperimentParams& params) {
  Corpus corpus = generate_fact_corpus(params.seed, params.corpus);
  TrainParams tp = params.train;
  tp.seed = params.seed;
  WeightsT<S> weights =
      train_toy<S>(params.model_config(corpus.vocab_size()), corpus.training, tp);
  ExperimentResultT<S> r{std::move(corpus), std::move(weights)};
  r.fact_accuracy = fact_accuracy(r.weights, r.corpus);

  r.conflicts = build_conflict_samples(r.corpus, r.weights, params.seed,
                                       params.max_conflicts, params.min_fact_accuracy);
  const auto& samples = r.conflicts.samples;
  r.tables = compute_score_tables(r.weights, samples, params.k_percent);
  r.copying = copying_head_scores(r.weights);
  r.split = split_for_calibration(samples);

  r.calibration = calibrate(r.copying, r.tables, r.split.calib_ids,
                            r.split.calib_labels, params.grid);
  DetectorConfig& cfg = r.calibration.config;
  cfg.chunk_size = params.chunk_size;
  cfg.alpha2 = params.alpha2;
  cfg.beta2 = params.beta2;
  cfg.tau = calibrate_tau(r.weights, samples, r.split.calib_ids, r.split.calib_labels,
                          cfg, params.k_percent);

  r.eval_rows = detection_rows(r.weights, samples, r.split.eval_ids, r.tables, cfg);
  std::vector<double> htok, hchk;
  for (const auto& row : r.eval_rows) {
    htok.push_back(row.h_token);
    hchk.push_back(row.h_chunk);
  }
  r.token_summary = summarize_detection(htok, r.split.eval_labels, cfg.threshold);
  r.chunk_summary = summarize_detection(hchk, r.split.eval_labels, cfg.threshold);

  const auto by_label = split_by_label(samples);
  r.rq1 = run_rq1(r.tables, by_label, params.n_layers);

  std::vector<Sample> truthful;
  for (const auto& s : samples) {
    if (s.label == 0) truthful.push_back(s);
    if (static_cast<int>(truthful.size()) >= params.rq2_max_truthful) break;
  }
  // Intervention targets follow the source rankings, not the calibrated
  // detector sets: the strongest copying heads and the FFN layers most
  // label-correlated. Every experimental head needs its own same-layer
  // control, so each layer yields at most H/2 heads (and at most L/2
  // layers are amplified).
  std::vector<HeadRef> rq2_heads;
  std::vector<int> claimed(params.n_layers, 0);
  for (const auto& row : r.copying.rows) {
    if (static_cast<int>(rq2_heads.size()) >= params.rq2_top_heads) break;
    if (claimed[row.layer] >= params.n_heads / 2) continue;
    rq2_heads.push_back(HeadRef{row.layer, row.head});
    ++claimed[row.layer];
  }
  const auto ffn_order =
      rank_ffn_layers(r.tables, r.split.calib_ids, r.split.calib_labels);
  const int nf = std::min(params.rq2_top_ffn, params.n_layers / 2);
  std::vector<int> rq2_layers(ffn_order.begin(), ffn_order.begin() + nf);

  InterventionSpec noise_spec;
  noise_spec.kind = InterventionKind::attention_noise;
  noise_spec.heads = rq2_heads;
  noise_spec.noise_seed = Rng::mix(params.seed, params.rq2_noise_seed);
  r.rq2_noise = run_rq2(r.weights, truthful, noise_spec);
  InterventionSpec amp_spec;
  amp_spec.kind = InterventionKind::ffn_amplify;
  amp_spec.layers = rq2_layers;
  amp_spec.k = params.rq2_k;
  r.rq2_amplify = run_rq2(r.weights, truthful, amp_spec);

  const auto known = known_sample_ids(r.weights, r.corpus, samples, by_label.truthful);
  if (!known.empty() && !by_label.hallucinated.empty())
    r.rq3 = run_rq3(r.tables, known, by_label.hallucinated, cfg.heads, cfg.ffn_layers);

  r.aarf = aarf_rates(r.weights, samples, r.split.eval_ids, cfg, params.aarf_max_new,
                      params.k_percent);
  return r;
}

}  // namespace raglens
