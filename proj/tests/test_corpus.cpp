#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "raglens/corpus.hpp"
#include "raglens/train.hpp"

using namespace raglens;

namespace {

CorpusParams small_params() {
  CorpusParams p;
  p.n_entities = 6;
  p.n_relations = 2;
  p.fact_repeat = 4;
  p.demo_fraction = 0.5;
  p.copy_fraction = 0.75;
  return p;
}

// A model small enough to memorize twelve facts in seconds.
ModelConfig memorizer_cfg(const Corpus& c, uint64_t seed) {
  ModelConfig m;
  m.n_layers = 2;
  m.n_heads = 2;
  m.d_model = 32;
  m.d_ffn = 64;
  m.vocab_size = c.vocab_size();
  m.max_seq_len = 16;
  m.rng_seed = seed;
  return m;
}

}  // namespace

TEST_CASE("corpus generation is deterministic and covers every pair once") {
  const auto p = small_params();
  const auto c1 = generate_fact_corpus(7, p);
  const auto c2 = generate_fact_corpus(7, p);
  const auto c3 = generate_fact_corpus(8, p);
  REQUIRE(c1.facts.size() == 12);
  CHECK(c1.training == c2.training);
  bool facts_equal = true;
  std::set<std::pair<int, int>> pairs;
  for (size_t i = 0; i < c1.facts.size(); ++i) {
    const auto& f = c1.facts[i];
    facts_equal &= f.subject == c2.facts[i].subject &&
                   f.relation == c2.facts[i].relation && f.object == c2.facts[i].object;
    pairs.insert({f.subject, f.relation});
    CHECK(f.object >= 0);
    CHECK(f.object < p.n_entities);
  }
  CHECK(facts_equal);
  CHECK(pairs.size() == 12);  // every (subject, relation) exactly once
  CHECK(c1.training != c3.training);
  CHECK(c1.vocab_size() == 4 + 6 + 2);
}

TEST_CASE("sentence layouts match the declared formats") {
  const auto c = generate_fact_corpus(7, small_params());
  const FactTriple f{2, 1, 4};
  const auto fs = c.fact_sentence(f);
  CHECK(fs == std::vector<int>{4 + 2, 4 + 6 + 1, 4 + 4, kTokEos});
  const auto ds = c.demo_sequence(f, 0, 0);
  REQUIRE(ds.size() == 10);
  CHECK(ds[0] == kTokQuery);
  CHECK(ds[3] == kTokCtx);
  CHECK(ds[7] == kTokAns);
  CHECK(ds[9] == kTokEos);
  CHECK(ds[1] == ds[4]);  // subject repeats inside the context
  CHECK(ds[2] == ds[5]);
}

TEST_CASE("demos always contradict the memorized fact and answer one side") {
  CorpusParams p = small_params();
  p.n_entities = 48;
  p.n_relations = 8;
  p.fact_repeat = 2;
  p.demo_fraction = 0.6;
  const auto c = generate_fact_corpus(123, p);
  std::map<std::pair<int, int>, int> object_of;
  for (const auto& f : c.facts) object_of[{f.subject, f.relation}] = f.object;

  int demos = 0, copies = 0;
  for (const auto& seq : c.training) {
    if (seq.size() != 10) continue;  // fact sentences are length 4
    ++demos;
    const int s = seq[1] - kNumMarkers;
    const int r = seq[2] - kNumMarkers - p.n_entities;
    const int ctx_obj = seq[6] - kNumMarkers;
    const int ans_obj = seq[8] - kNumMarkers;
    const int true_obj = object_of.at({s, r});
    CHECK(ctx_obj != true_obj);
    const bool copied = ans_obj == ctx_obj;
    CHECK((copied || ans_obj == true_obj));
    // the answer side is a pure function of the relation's class
    CHECK(copied == (c.relation_is_copy[r] == 1));
    copies += copied ? 1 : 0;
  }
  const int n_facts = p.n_entities * p.n_relations;
  CHECK(c.training.size() == static_cast<size_t>(n_facts * p.fact_repeat + demos));
  // demo_fraction 0.6 of 384 facts, demo_repeat 3 each
  CHECK(demos % p.demo_repeat == 0);
  CHECK(demos > 190 * p.demo_repeat);
  CHECK(demos < 270 * p.demo_repeat);
  // copy_fraction 0.75 of 8 relations = 6 copy-class
  CHECK(std::count(c.relation_is_copy.begin(), c.relation_is_copy.end(), 1) == 6);
  const double copy_rate = static_cast<double>(copies) / demos;
  CHECK(copy_rate > 0.6);
  CHECK(copy_rate < 0.9);
}

TEST_CASE("repeated demos for one fact vary the context object") {
  CorpusParams p = small_params();
  p.n_entities = 48;
  p.n_relations = 8;
  p.demo_repeat = 4;
  const auto c = generate_fact_corpus(9, p);
  std::map<std::pair<int, int>, std::set<int>> ctx_objects;
  for (const auto& seq : c.training)
    if (seq.size() == 10) ctx_objects[{seq[1], seq[2]}].insert(seq[6]);
  int varied = 0;
  for (const auto& [key, objs] : ctx_objects) {
    CHECK(objs.size() >= 1);
    varied += objs.size() >= 2 ? 1 : 0;
  }
  // with 4 independent draws over 47 candidates, near-universal variety
  CHECK(varied > static_cast<int>(ctx_objects.size() * 9) / 10);
}

TEST_CASE("corpus generation rejects impossible parameter sets") {
  CorpusParams p = small_params();
  p.n_entities = 1;
  CHECK_THROWS_AS(generate_fact_corpus(1, p), std::invalid_argument);
  p = small_params();
  p.fact_repeat = 0;
  CHECK_THROWS_AS(generate_fact_corpus(1, p), std::invalid_argument);
  p = small_params();
  p.demo_repeat = 0;
  CHECK_THROWS_AS(generate_fact_corpus(1, p), std::invalid_argument);
  p = small_params();
  p.n_entities = 600;
  CHECK_THROWS_AS(generate_fact_corpus(1, p), std::invalid_argument);
}

TEST_CASE("corpus json round trip") {
  const auto c = generate_fact_corpus(7, small_params());
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "raglens_corpus.json").string();
  save_corpus(c, path);
  const auto back = load_corpus(path);
  CHECK(back.params.n_entities == c.params.n_entities);
  CHECK(back.params.fact_repeat == c.params.fact_repeat);
  CHECK(back.relation_is_copy == c.relation_is_copy);
  CHECK(back.training == c.training);
  REQUIRE(back.facts.size() == c.facts.size());
  for (size_t i = 0; i < c.facts.size(); ++i) {
    CHECK(back.facts[i].subject == c.facts[i].subject);
    CHECK(back.facts[i].relation == c.facts[i].relation);
    CHECK(back.facts[i].object == c.facts[i].object);
  }
  std::filesystem::remove(path);
}

TEST_CASE("samples survive the jsonl format and errors carry line numbers") {
  Sample s;
  s.id = "x1";
  s.query = {1, 5, 6};
  s.context = {2, 5, 6, 8, 3};
  s.response = {9};
  s.label = 1;
  Sample t = s;
  t.id = "x2";
  t.label = 0;
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "raglens_samples.jsonl").string();
  save_samples({s, t}, path);
  const auto back = load_samples(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "x1");
  CHECK(back[0].query == s.query);
  CHECK(back[0].context == s.context);
  CHECK(back[0].response == s.response);
  CHECK(back[0].label == 1);
  CHECK(back[1].id == "x2");
  CHECK(back[1].label == 0);

  const auto split = split_by_label(back);
  CHECK(split.truthful == std::vector<std::string>{"x2"});
  CHECK(split.hallucinated == std::vector<std::string>{"x1"});

  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << sample_to_json(s).dump() << "\n";
    f << "{not json}\n";
  }
  try {
    load_samples(path);
    FAIL("expected a parse error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  {
    auto j = sample_to_json(s);
    j.erase("label");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << j.dump() << "\n";
  }
  try {
    load_samples(path);
    FAIL("expected a missing-field error");
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    CHECK(what.find("label") != std::string::npos);
    CHECK(what.find("line 1") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("a trained memorizer yields labeled conflicts; an untrained one is rejected") {
  const auto corpus = generate_fact_corpus(11, small_params());
  const auto cfg = memorizer_cfg(corpus, 11);
  const auto fresh = init_weights<float>(cfg);
  CHECK_THROWS_AS(build_conflict_samples(corpus, fresh, 11, 12), std::runtime_error);

  TrainParams tp;
  tp.steps = 1500;
  tp.lr = 0.05;
  tp.batch_size = 16;
  tp.seed = 11;
  const auto w = train_toy<float>(cfg, corpus.training, tp);
  const double acc = fact_accuracy(w, corpus);
  REQUIRE(acc >= 0.9);

  const auto b1 = build_conflict_samples(corpus, w, 21, 12);
  const auto b2 = build_conflict_samples(corpus, w, 21, 12);
  REQUIRE_FALSE(b1.samples.empty());
  REQUIRE(b1.samples.size() == b2.samples.size());
  std::map<std::pair<int, int>, int> object_of;
  for (const auto& f : corpus.facts) object_of[{f.subject, f.relation}] = f.object;
  for (size_t i = 0; i < b1.samples.size(); ++i) {
    const auto& a = b1.samples[i];
    CHECK(a.id == b2.samples[i].id);
    CHECK(a.response == b2.samples[i].response);
    CHECK(a.label == b2.samples[i].label);
    // shape: [query s r] [ctx s r alt ans]
    REQUIRE(a.query.size() == 3);
    REQUIRE(a.context.size() == 5);
    CHECK(a.query[0] == kTokQuery);
    CHECK(a.context[0] == kTokCtx);
    CHECK(a.context[1] == a.query[1]);
    CHECK(a.context[2] == a.query[2]);
    CHECK(a.context[4] == kTokAns);
    const int s = a.query[1] - kNumMarkers;
    const int r = a.query[2] - kNumMarkers - corpus.params.n_entities;
    const int mem_tok = corpus.entity_token(object_of.at({s, r}));
    const int ctx_tok = a.context[3];
    CHECK(ctx_tok != mem_tok);
    const bool has_ctx =
        std::find(a.response.begin(), a.response.end(), ctx_tok) != a.response.end();
    const bool has_mem =
        std::find(a.response.begin(), a.response.end(), mem_tok) != a.response.end();
    CHECK(has_ctx != has_mem);  // exactly one side, or it would be discarded
    CHECK(a.label == (has_mem ? 1 : 0));
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "conflict-%04zu", i);
    CHECK(a.id == idbuf);
  }
  CHECK(b1.samples.size() + b1.discarded_both + b1.discarded_neither <= 12u);
  CHECK_THROWS_AS(build_conflict_samples(corpus, w, 21, 0), std::invalid_argument);
}
