#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "helpers.hpp"
#include "raglens/aarf.hpp"
#include "raglens/interventions.hpp"

using namespace raglens;

namespace {

ModelConfig mit_cfg(uint64_t seed) {
  ModelConfig c;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.vocab_size = 12;
  c.max_seq_len = 48;
  c.rng_seed = seed;
  return c;
}

DetectorConfig mit_detector() {
  DetectorConfig cfg;
  cfg.heads = {HeadRef{1, 0}, HeadRef{2, 1}};
  cfg.ffn_layers = {2};
  cfg.beta = 0.5;
  return cfg;
}

std::vector<int> random_tokens(Rng& rng, int len, int vocab) {
  std::vector<int> t(len);
  for (int i = 0; i < len; ++i)
    t[i] = 1 + static_cast<int>(rng.next_below(vocab - 1));  // avoid eos 0
  return t;
}

Sample mit_sample(Rng& rng, int vocab, const std::string& id) {
  Sample s;
  s.id = id;
  s.query = random_tokens(rng, 2 + rng.next_below(3), vocab);
  s.context = random_tokens(rng, 3 + rng.next_below(3), vocab);
  s.response = random_tokens(rng, 2 + rng.next_below(4), vocab);
  s.label = 0;
  return s;
}

}  // namespace

TEST_CASE("decision score equals the token score at the last prompt position") {
  auto w = init_weights<float>(mit_cfg(50));
  Rng rng(1);
  const auto q = random_tokens(rng, 3, w.cfg.vocab_size);
  const auto c = random_tokens(rng, 4, w.cfg.vocab_size);
  const auto cfg = mit_detector();
  const double got = aarf_decision_score(w, q, c, cfg, 50.0);
  std::vector<int> seq = q;
  seq.insert(seq.end(), c.begin(), c.end());
  auto tr = forward_trace(w, seq);
  const double want =
      h_token_at_position(w, tr, 6, 3, 7, cfg, 50.0);
  CHECK(got == want);
  CHECK_THROWS_AS(aarf_decision_score(w, q, {}, cfg, 50.0), std::invalid_argument);
}

TEST_CASE("an infinite threshold reproduces greedy decoding exactly") {
  auto w = init_weights<float>(mit_cfg(51));
  auto cfg = mit_detector();  // tau defaults to +inf
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto q = random_tokens(rng, 2 + rng.next_below(3), w.cfg.vocab_size);
    const auto c = random_tokens(rng, 3 + rng.next_below(4), w.cfg.vocab_size);
    std::vector<int> prompt = q;
    prompt.insert(prompt.end(), c.begin(), c.end());
    std::vector<AarfStep> log;
    const auto mitigated = aarf_decode(w, q, c, cfg, 8, 0, 50.0, &log);
    const auto plain = greedy_decode(w, prompt, 8, 0);
    CHECK(mitigated == plain);
    for (const auto& step : log) CHECK_FALSE(step.triggered);
    CHECK(log.size() == mitigated.size() - prompt.size());
  }
}

TEST_CASE("an always-on threshold with neutral scales changes nothing") {
  auto w = init_weights<float>(mit_cfg(52));
  auto cfg = mit_detector();
  cfg.tau = -std::numeric_limits<double>::infinity();
  cfg.alpha2 = 1.0;  // neutral reweighting: triggered path must match greedy
  cfg.beta2 = 1.0;
  Rng rng(3);
  const auto q = random_tokens(rng, 3, w.cfg.vocab_size);
  const auto c = random_tokens(rng, 4, w.cfg.vocab_size);
  std::vector<int> prompt = q;
  prompt.insert(prompt.end(), c.begin(), c.end());
  std::vector<AarfStep> log;
  const auto out = aarf_decode(w, q, c, cfg, 8, 0, 50.0, &log);
  CHECK(out == greedy_decode(w, prompt, 8, 0));
  REQUIRE_FALSE(log.empty());
  for (const auto& step : log) CHECK(step.triggered);
}

TEST_CASE("a threshold below every observed score triggers every step") {
  auto w = init_weights<float>(mit_cfg(53));
  auto cfg = mit_detector();
  Rng rng(4);
  const auto q = random_tokens(rng, 3, w.cfg.vocab_size);
  const auto c = random_tokens(rng, 5, w.cfg.vocab_size);
  std::vector<AarfStep> probe;
  aarf_decode(w, q, c, cfg, 6, 0, 50.0, &probe);
  REQUIRE_FALSE(probe.empty());
  double lo = probe.front().h_t;
  for (const auto& s : probe) lo = std::min(lo, s.h_t);
  cfg.tau = lo - 1.0;
  std::vector<AarfStep> log;
  aarf_decode(w, q, c, cfg, 6, 0, 50.0, &log);
  REQUIRE_FALSE(log.empty());
  CHECK(log.front().triggered);  // first step h matches the probe run
  CHECK(log.front().h_t == probe.front().h_t);
  CHECK(log.front().position == static_cast<int>(q.size() + c.size()) - 1);
}

TEST_CASE("reweighted forward keeps the residual identity and validates input") {
  auto w = init_weights<float>(mit_cfg(54));
  Rng rng(5);
  const auto tokens = random_tokens(rng, 9, w.cfg.vocab_size);
  const auto rt = reweighted_forward(w, tokens, {HeadRef{1, 0}}, {2}, 5.0, 0.2);
  for (int p = 0; p < rt.seq_len(); ++p)
    CHECK(reconstruct_residual(rt, p) <= 1e-4);
  // amplification must actually move the logits
  const auto plain = forward_trace(w, tokens);
  bool moved = false;
  for (size_t i = 0; i < plain.logits.a.size(); ++i)
    if (plain.logits.a[i] != rt.logits.a[i]) moved = true;
  CHECK(moved);
  // neutral scales leave them bit-identical
  const auto neutral = reweighted_forward(w, tokens, {HeadRef{1, 0}}, {2}, 1.0, 1.0);
  CHECK(std::memcmp(neutral.logits.a.data(), plain.logits.a.data(),
                    sizeof(float) * plain.logits.a.size()) == 0);
  CHECK_THROWS_AS(reweighted_forward(w, tokens, {HeadRef{1, 0}}, {2}, 0.5, 0.2),
                  std::invalid_argument);
  CHECK_THROWS_AS(reweighted_forward(w, tokens, {HeadRef{1, 0}}, {2}, 5.0, 0.0),
                  std::invalid_argument);
}

TEST_CASE("control heads are nearest unclaimed neighbors in the same layer") {
  auto ctl = matched_controls({HeadRef{2, 1}}, 4, 4);
  REQUIRE(ctl.size() == 1);
  CHECK(ctl[0] == HeadRef{2, 0});  // tie between 0 and 2 goes low
  ctl = matched_controls({HeadRef{0, 0}, HeadRef{0, 1}}, 4, 4);
  REQUIRE(ctl.size() == 2);
  CHECK(ctl[0] == HeadRef{0, 2});
  CHECK(ctl[1] == HeadRef{0, 3});
  // processed in (layer, head) order regardless of input order
  auto ctl2 = matched_controls({HeadRef{0, 1}, HeadRef{0, 0}}, 4, 4);
  CHECK(ctl2[0] == HeadRef{0, 2});
  CHECK(ctl2[1] == HeadRef{0, 3});
  CHECK_THROWS_AS(matched_controls({HeadRef{1, 0}, HeadRef{1, 1}}, 2, 2),
                  std::invalid_argument);
  CHECK_THROWS_AS(matched_controls({HeadRef{9, 0}}, 2, 2), std::invalid_argument);
}

TEST_CASE("control layers follow the same nearest-unclaimed rule") {
  CHECK(matched_control_layers({5}, 8) == std::vector<int>{4});
  CHECK(matched_control_layers({0}, 8) == std::vector<int>{1});
  CHECK(matched_control_layers({0, 1}, 4) == std::vector<int>{2, 3});
  CHECK_THROWS_AS(matched_control_layers({0, 1}, 2), std::invalid_argument);
  CHECK_THROWS_AS(matched_control_layers({4}, 2), std::invalid_argument);
}

TEST_CASE("attention noise is seeded, scoped, and keeps rows normalized") {
  auto w = init_weights<float>(mit_cfg(55));
  Rng rng(6);
  const auto tokens = random_tokens(rng, 10, w.cfg.vocab_size);
  const auto plain = forward_trace(w, tokens);
  const auto n1 = noise_attention_forward(w, tokens, {HeadRef{0, 0}}, 17);
  const auto n2 = noise_attention_forward(w, tokens, {HeadRef{0, 0}}, 17);
  const auto n3 = noise_attention_forward(w, tokens, {HeadRef{0, 0}}, 18);
  CHECK(std::memcmp(n1.logits.a.data(), n2.logits.a.data(),
                    sizeof(float) * n1.logits.a.size()) == 0);
  bool seed_matters = false;
  for (size_t i = 0; i < n1.logits.a.size(); ++i)
    if (n1.logits.a[i] != n3.logits.a[i]) seed_matters = true;
  CHECK(seed_matters);

  // the noised head's attention changes; its same-layer sibling reads the
  // same pre-attention input and so stays bit-identical
  bool target_changed = false;
  for (size_t i = 0; i < n1.attn[0][0].a.size(); ++i)
    if (n1.attn[0][0].a[i] != plain.attn[0][0].a[i]) target_changed = true;
  CHECK(target_changed);
  CHECK(std::memcmp(n1.attn[0][1].a.data(), plain.attn[0][1].a.data(),
                    sizeof(float) * plain.attn[0][1].a.size()) == 0);

  for (int i = 0; i < n1.seq_len(); ++i) {
    double row = 0.0;
    for (int j = 0; j <= i; ++j) row += static_cast<double>(n1.attn[0][0].at(i, j));
    CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("ffn amplification at unit gain is the identity") {
  auto w = init_weights<float>(mit_cfg(56));
  Rng rng(7);
  const auto tokens = random_tokens(rng, 8, w.cfg.vocab_size);
  const auto plain = forward_trace(w, tokens);
  const auto unit = amplify_ffn_forward(w, tokens, {0, 1, 2}, 1.0);
  CHECK(std::memcmp(unit.logits.a.data(), plain.logits.a.data(),
                    sizeof(float) * plain.logits.a.size()) == 0);
  const auto big = amplify_ffn_forward(w, tokens, {1}, 10.0);
  bool moved = false;
  for (size_t i = 0; i < big.logits.a.size(); ++i)
    if (big.logits.a[i] != plain.logits.a[i]) moved = true;
  CHECK(moved);
  CHECK_THROWS_AS(amplify_ffn_forward(w, tokens, {1}, 0.0), std::invalid_argument);
}

TEST_CASE("response nll averages exactly the response-position terms") {
  auto w = init_weights<float>(mit_cfg(57));
  Rng rng(8);
  const auto s = mit_sample(rng, w.cfg.vocab_size, "r0");
  const auto terms = nll_terms(w, s.full(), {});
  double want = 0.0;
  for (int i = s.response_begin() - 1; i < s.response_end() - 1; ++i)
    want += terms[i];
  want /= static_cast<double>(s.response.size());
  CHECK(response_nll(w, s) == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("degradation report is zero under a unit intervention") {
  auto w = init_weights<float>(mit_cfg(58));
  Rng rng(9);
  std::vector<Sample> truthful;
  for (int i = 0; i < 4; ++i)
    truthful.push_back(mit_sample(rng, w.cfg.vocab_size, "t" + std::to_string(i)));
  InterventionSpec spec;
  spec.kind = InterventionKind::ffn_amplify;
  spec.layers = {1};
  spec.k = 1.0;
  const auto rep = run_rq2(w, truthful, spec);
  REQUIRE(rep.rows.size() == 8);  // experimental + control per sample
  for (const auto& r : rep.rows) CHECK(r.delta == doctest::Approx(0.0));
  CHECK(rep.experimental_mean == doctest::Approx(0.0));
  CHECK(rep.control_mean == doctest::Approx(0.0));
  CHECK(rep.rows[0].group == "experimental");
  CHECK(rep.rows[1].group == "control");
  CHECK(rep.rows[0].sample_id == "t0");

  // a real amplification degrades the experimental rows it targets
  spec.k = 10.0;
  const auto hard = run_rq2(w, truthful, spec);
  for (const auto& r : hard.rows)
    if (r.group == "experimental") CHECK(r.nll_intervened != r.nll_base);
  CHECK_THROWS_AS(run_rq2(w, {}, spec), std::invalid_argument);

  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "raglens_rq2.csv").string();
  save_rq2_csv(hard, path);
  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  CHECK(header == "group,sample_id,nll_base,nll_intervened,delta");
  int rows = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 8);
  std::filesystem::remove(path);
}

TEST_CASE("known-versus-hallucinated comparison averages the selected sets") {
  ScoreTable a, b;
  for (ScoreTable* t : {&a, &b}) {
    t->n_layers = 2;
    t->n_heads = 2;
    t->n_response = 1;
    t->ecs_resp.assign(2, std::vector<double>(2, 0.0));
    t->pks_resp.assign(2, 0.0);
  }
  a.sample_id = "known";
  a.ecs_resp[0][0] = 0.8;
  a.ecs_resp[1][1] = 0.6;
  a.pks_resp[1] = 0.1;
  b.sample_id = "hallu";
  b.ecs_resp[0][0] = 0.2;
  b.ecs_resp[1][1] = 0.4;
  b.pks_resp[1] = 0.5;
  std::map<std::string, ScoreTable> tables = {{"known", a}, {"hallu", b}};
  const auto r = run_rq3(tables, {"known"}, {"hallu"},
                         {HeadRef{0, 0}, HeadRef{1, 1}}, {1});
  CHECK(r.known_ecs == doctest::Approx(0.7));
  CHECK(r.hallu_ecs == doctest::Approx(0.3));
  CHECK(r.known_pks == doctest::Approx(0.1));
  CHECK(r.hallu_pks == doctest::Approx(0.5));
  CHECK(r.ecs_difference() == doctest::Approx(0.4));
  CHECK(r.pks_difference() == doctest::Approx(-0.4));
  CHECK(r.n_known == 1);
  CHECK(r.n_hallu == 1);
  const auto j = rq3_to_json(r);
  CHECK(j.at("known").at("mean_ecs").get<double>() == doctest::Approx(0.7));
  CHECK(j.at("ecs_difference").get<double>() == doctest::Approx(0.4));
  CHECK_THROWS_AS(run_rq3(tables, {}, {"hallu"}, {HeadRef{0, 0}}, {1}),
                  std::invalid_argument);
  CHECK_THROWS_AS(run_rq3(tables, {"known"}, {"hallu"}, {}, {1}),
                  std::invalid_argument);
}
