#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raglens/rng.hpp"
#include "raglens/samples.hpp"
#include "raglens/transformer.hpp"
#include "raglens/weights.hpp"

namespace raglens {

// Token layout: four marker tokens, then entities, then relations.
constexpr int kTokEos = 0;
constexpr int kTokQuery = 1;
constexpr int kTokCtx = 2;
constexpr int kTokAns = 3;
constexpr int kNumMarkers = 4;

struct FactTriple {
  int subject = 0;   // entity index
  int relation = 0;  // relation index
  int object = 0;    // entity index
};

struct CorpusParams {
  int n_entities = 48;
  int n_relations = 8;
  int fact_repeat = 2;        // copies of each plain fact sentence
  double demo_fraction = 0.6; // facts that also get RAG-format demos
  int demo_repeat = 3;        // demos per selected fact, each with a fresh
                              // counterfactual — the same question must admit
                              // different context-dependent answers, or a
                              // lookup table beats copying during training
  double copy_fraction = 0.75;  // fraction of relations whose demos answer
                                // from the context; the rest answer from
                                // memory
};

// A closed synthetic world: one fact per (subject, relation) pair, plain
// fact sentences to memorize, and RAG-format demonstrations that teach the
// prompt layout with a controlled mix of context-following and
// parametric-override answers.
struct Corpus {
  CorpusParams params;
  std::vector<FactTriple> facts;
  std::vector<uint8_t> relation_is_copy;  // per relation: demos copy vs recall
  std::vector<std::vector<int>> training;

  int entity_token(int e) const { return kNumMarkers + e; }
  int relation_token(int r) const { return kNumMarkers + params.n_entities + r; }
  int vocab_size() const {
    return kNumMarkers + params.n_entities + params.n_relations;
  }

  std::vector<int> fact_sentence(const FactTriple& f) const {
    return {entity_token(f.subject), relation_token(f.relation),
            entity_token(f.object), kTokEos};
  }
  std::vector<int> demo_sequence(const FactTriple& f, int ctx_object,
                                 int ans_object) const {
    return {kTokQuery,  entity_token(f.subject), relation_token(f.relation),
            kTokCtx,    entity_token(f.subject), relation_token(f.relation),
            entity_token(ctx_object), kTokAns, entity_token(ans_object), kTokEos};
  }
};

inline Corpus generate_fact_corpus(uint64_t seed, const CorpusParams& params) {
  if (params.n_entities < 2 || params.n_relations < 1)
    throw std::invalid_argument("generate_fact_corpus: need >= 2 entities, >= 1 relation");
  if (params.fact_repeat < 1)
    throw std::invalid_argument("generate_fact_corpus: fact_repeat >= 1");
  if (params.demo_repeat < 1)
    throw std::invalid_argument("generate_fact_corpus: demo_repeat >= 1");
  Corpus c;
  c.params = params;
  if (c.vocab_size() > 512)
    throw std::invalid_argument("generate_fact_corpus: vocabulary overflow");

  Rng fact_rng(Rng::mix(seed, 0xFAC7ull));
  for (int s = 0; s < params.n_entities; ++s)
    for (int r = 0; r < params.n_relations; ++r)
      c.facts.push_back(FactTriple{
          s, r, static_cast<int>(fact_rng.next_below(params.n_entities))});

  for (const auto& f : c.facts)
    for (int k = 0; k < params.fact_repeat; ++k)
      c.training.push_back(c.fact_sentence(f));

  // The answer policy hangs off the relation token: demos of a copy-class
  // relation always answer from their context, the rest always from memory.
  // Tying the policy to a token visible in every prompt is what lets it
  // generalize to unseen facts, so conflict prompts split into a genuine
  // context-following circuit and a genuine parametric-recall circuit.
  const int n_copy = std::clamp<int>(
      static_cast<int>(std::llround(params.copy_fraction * params.n_relations)),
      0, params.n_relations);
  std::vector<int> rel_order(params.n_relations);
  std::iota(rel_order.begin(), rel_order.end(), 0);
  Rng rel_rng(Rng::mix(seed, 0x9E7Aull));
  for (int i = params.n_relations - 1; i > 0; --i) {
    const int j = static_cast<int>(rel_rng.next_below(i + 1));
    std::swap(rel_order[i], rel_order[j]);
  }
  c.relation_is_copy.assign(params.n_relations, 0);
  for (int i = 0; i < n_copy; ++i) c.relation_is_copy[rel_order[i]] = 1;

  Rng demo_rng(Rng::mix(seed, 0xDE30ull));
  for (const auto& f : c.facts) {
    if (demo_rng.next_double() >= params.demo_fraction) continue;
    const bool copy = c.relation_is_copy[f.relation] != 0;
    for (int k = 0; k < params.demo_repeat; ++k) {
      // counterfactual context object, never the true one
      int ctx = static_cast<int>(demo_rng.next_below(params.n_entities - 1));
      if (ctx >= f.object) ++ctx;
      c.training.push_back(c.demo_sequence(f, ctx, copy ? ctx : f.object));
    }
  }
  return c;
}

inline void save_corpus(const Corpus& c, const std::string& path) {
  nlohmann::ordered_json facts = nlohmann::ordered_json::array();
  for (const auto& f : c.facts)
    facts.push_back(nlohmann::ordered_json::array({f.subject, f.relation, f.object}));
  nlohmann::ordered_json j{{"n_entities", c.params.n_entities},
                           {"n_relations", c.params.n_relations},
                           {"fact_repeat", c.params.fact_repeat},
                           {"demo_fraction", c.params.demo_fraction},
                           {"demo_repeat", c.params.demo_repeat},
                           {"copy_fraction", c.params.copy_fraction},
                           {"vocab_size", c.vocab_size()},
                           {"relation_is_copy", c.relation_is_copy},
                           {"facts", std::move(facts)},
                           {"training", c.training}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << j.dump() << "\n";
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  f >> j;
  Corpus c;
  c.params.n_entities = j.at("n_entities").get<int>();
  c.params.n_relations = j.at("n_relations").get<int>();
  c.params.fact_repeat = j.at("fact_repeat").get<int>();
  c.params.demo_fraction = j.at("demo_fraction").get<double>();
  c.params.demo_repeat = j.at("demo_repeat").get<int>();
  c.params.copy_fraction = j.at("copy_fraction").get<double>();
  c.relation_is_copy = j.at("relation_is_copy").get<std::vector<uint8_t>>();
  for (const auto& row : j.at("facts"))
    c.facts.push_back(FactTriple{row.at(0).get<int>(), row.at(1).get<int>(),
                                 row.at(2).get<int>()});
  c.training = j.at("training").get<std::vector<std::vector<int>>>();
  return c;
}

// Fraction of facts the model completes correctly from the bare
// subject-relation prompt.
template <typename S>
double fact_accuracy(const WeightsT<S>& w, const Corpus& c) {
  if (c.facts.empty()) throw std::invalid_argument("fact_accuracy: no facts");
  int hits = 0;
  for (const auto& f : c.facts) {
    auto tr = forward_trace(
        w, std::vector<int>{c.entity_token(f.subject), c.relation_token(f.relation)});
    if (argmax_row(tr.logits, tr.seq_len() - 1) == c.entity_token(f.object)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(c.facts.size());
}

// Facts the model also answers correctly in the RAG query format without any
// context — the closed-book "known" probe.
template <typename S>
bool closed_book_knows(const WeightsT<S>& w, const Corpus& c, const FactTriple& f) {
  const std::vector<int> prompt = {c.entity_token(f.subject), c.relation_token(f.relation)};
  const auto seq = greedy_decode(w, prompt, 2, kTokEos);
  const int want = c.entity_token(f.object);
  for (size_t i = prompt.size(); i < seq.size(); ++i)
    if (seq[i] == want) return true;
  return false;
}

struct ConflictBuild {
  std::vector<Sample> samples;
  int discarded_both = 0;
  int discarded_neither = 0;
};

// Builds auto-labeled conflict samples: each picked fact gets a context
// asserting a counterfactual object, the model decodes greedily, and the
// response is labeled by which object it contains — the context's (label 0)
// or the memorized one (label 1). Ambiguous responses are dropped and
// counted.
template <typename S>
ConflictBuild build_conflict_samples(const Corpus& c, const WeightsT<S>& w,
                                     uint64_t seed, int max_samples,
                                     double min_fact_accuracy = 0.9,
                                     int max_new = 3) {
  if (max_samples < 1)
    throw std::invalid_argument("build_conflict_samples: max_samples >= 1");
  const double acc = fact_accuracy(w, c);
  if (acc < min_fact_accuracy)
    throw std::runtime_error(
        "build_conflict_samples: weights below memorization threshold (accuracy " +
        std::to_string(acc) + ")");

  Rng rng(Rng::mix(seed, 0xC04Full));
  std::vector<size_t> order(c.facts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (size_t i = order.size() - 1; i > 0; --i)
    std::swap(order[i], order[rng.next_below(i + 1)]);

  ConflictBuild out;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    if (static_cast<int>(out.samples.size()) >= max_samples) break;
    const FactTriple& f = c.facts[order[oi]];
    int alt = static_cast<int>(rng.next_below(c.params.n_entities - 1));
    if (alt >= f.object) ++alt;  // counterfactual by construction

    Sample s;
    s.query = {kTokQuery, c.entity_token(f.subject), c.relation_token(f.relation)};
    s.context = {kTokCtx, c.entity_token(f.subject), c.relation_token(f.relation),
                 c.entity_token(alt), kTokAns};
    std::vector<int> prompt = s.query;
    prompt.insert(prompt.end(), s.context.begin(), s.context.end());
    const auto seq = greedy_decode(w, prompt, max_new, kTokEos);
    std::vector<int> response(seq.begin() + prompt.size(), seq.end());
    while (!response.empty() && response.back() == kTokEos) response.pop_back();

    const int ctx_tok = c.entity_token(alt), mem_tok = c.entity_token(f.object);
    const bool has_ctx = std::find(response.begin(), response.end(), ctx_tok) !=
                         response.end();
    const bool has_mem = std::find(response.begin(), response.end(), mem_tok) !=
                         response.end();
    if (response.empty() || (has_ctx && has_mem) || (!has_ctx && !has_mem)) {
      (has_ctx && has_mem) ? ++out.discarded_both : ++out.discarded_neither;
      continue;
    }
    s.response = response;
    s.label = has_mem ? 1 : 0;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "conflict-%04zu",
                  out.samples.size());
    s.id = idbuf;
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace raglens
