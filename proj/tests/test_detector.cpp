#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "helpers.hpp"
#include "raglens/detector.hpp"

using namespace raglens;

namespace {

// Tables with a planted signal: layer-3 FFN divergence rises with the label,
// head (1,2) context similarity falls with it, everything else is noise.
ScoreTable synth_table(const std::string& id, int label, Rng& rng) {
  const int L = 4, H = 4, R = 5;
  ScoreTable t;
  t.sample_id = id;
  t.n_layers = L;
  t.n_heads = H;
  t.n_response = R;
  t.ecs_tok.assign(R, std::vector<std::vector<double>>(L, std::vector<double>(H)));
  t.pks_tok.assign(R, std::vector<double>(L));
  t.ecs_resp.assign(L, std::vector<double>(H, 0.0));
  t.pks_resp.assign(L, 0.0);
  for (int i = 0; i < R; ++i)
    for (int l = 0; l < L; ++l) {
      t.pks_tok[i][l] = 0.05 + 0.02 * rng.next_normal() +
                        (l == 3 ? 0.30 * label : 0.0);
      for (int h = 0; h < H; ++h)
        t.ecs_tok[i][l][h] = 0.10 + 0.05 * rng.next_normal() +
                             (l == 1 && h == 2 ? -0.35 * label : 0.0);
    }
  for (int i = 0; i < R; ++i)
    for (int l = 0; l < L; ++l) {
      t.pks_resp[l] += t.pks_tok[i][l] / R;
      for (int h = 0; h < H; ++h) t.ecs_resp[l][h] += t.ecs_tok[i][l][h] / R;
    }
  return t;
}

struct SynthSet {
  std::map<std::string, ScoreTable> tables;
  std::vector<std::string> ids;
  std::vector<int> labels;
};

SynthSet make_synth(int n, uint64_t seed) {
  SynthSet s;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const int label = i % 2;
    const std::string id = "synth-" + std::to_string(i);
    s.tables.emplace(id, synth_table(id, label, rng));
    s.ids.push_back(id);
    s.labels.push_back(label);
  }
  return s;
}

CopyingHeadReport synth_report() {
  CopyingHeadReport rep;
  const int pairs[6][2] = {{1, 2}, {0, 0}, {2, 3}, {3, 1}, {0, 1}, {2, 0}};
  for (int i = 0; i < 6; ++i) {
    CopyingHeadRow r;
    r.layer = pairs[i][0];
    r.head = pairs[i][1];
    r.score = 2 + i;
    rep.rows.push_back(r);
  }
  return rep;
}

Sample chunk_sample() {
  Sample s;
  s.id = "c0";
  s.query = {1, 2};
  s.context = {3, 4, 5, 6};
  s.response = {7, 8, 9, 10};
  s.label = 0;
  return s;
}

}  // namespace

TEST_CASE("detector config validation and json round trip") {
  DetectorConfig c;
  c.heads = {HeadRef{1, 2}, HeadRef{0, 0}};
  c.ffn_layers = {3};
  c.beta = 0.5;
  c.threshold = 0.12;
  c.validate();

  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "raglens_detector.json").string();
  save_detector_config(c, path);
  auto back = load_detector_config(path);
  CHECK(back.heads.size() == 2);
  CHECK(back.heads[0] == HeadRef{1, 2});
  CHECK(back.ffn_layers == std::vector<int>{3});
  CHECK(back.beta == doctest::Approx(0.5));
  CHECK(back.threshold == doctest::Approx(0.12));
  CHECK(std::isinf(back.tau));  // serialized as the string "inf"
  c.tau = 1.25;
  save_detector_config(c, path);
  back = load_detector_config(path);
  CHECK(back.tau == doctest::Approx(1.25));
  std::filesystem::remove(path);

  DetectorConfig bad = c;
  bad.alpha = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.heads.clear();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.beta2 = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.alpha2 = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("token score is the stated weighted combination") {
  ScoreTable t;
  t.sample_id = "x";
  t.n_layers = 2;
  t.n_heads = 2;
  t.n_response = 2;
  t.ecs_tok = {{{0.1, 0.2}, {0.3, 0.4}}, {{0.5, 0.6}, {0.7, 0.8}}};
  t.pks_tok = {{0.10, 0.30}, {0.20, 0.40}};
  DetectorConfig cfg;
  cfg.heads = {HeadRef{0, 1}};
  cfg.ffn_layers = {1};
  cfg.alpha = 2.0;
  cfg.beta = 0.5;
  // token 0: 2*0.30 - 0.5*0.2 = 0.5; token 1: 2*0.40 - 0.5*0.6 = 0.5
  CHECK(h_token(t, cfg) == doctest::Approx(0.5));
  // two ffn layers and two heads accumulate
  cfg.ffn_layers = {0, 1};
  cfg.heads = {HeadRef{0, 0}, HeadRef{1, 1}};
  // token 0: 2*(0.1+0.3) - 0.5*(0.1+0.4) = 0.55
  // token 1: 2*(0.2+0.4) - 0.5*(0.5+0.8) = 0.55
  CHECK(h_token(t, cfg) == doctest::Approx(0.55));
  // raising a selected pks raises the score; raising a selected ecs lowers it
  auto t2 = t;
  t2.pks_tok[0][1] += 1.0;
  CHECK(h_token(t2, cfg) > h_token(t, cfg));
  t2 = t;
  t2.ecs_tok[1][1][1] += 1.0;
  CHECK(h_token(t2, cfg) < h_token(t, cfg));

  cfg.heads = {HeadRef{0, 5}};
  CHECK_THROWS_AS(h_token(t, cfg), std::invalid_argument);
  cfg.heads = {HeadRef{0, 0}};
  cfg.ffn_layers = {2};
  CHECK_THROWS_AS(h_token(t, cfg), std::invalid_argument);
}

TEST_CASE("chunk tiling covers the span with a short tail") {
  auto c = chunk_text(0, 10, 4);
  REQUIRE(c.size() == 3);
  CHECK(c[0].start == 0);
  CHECK(c[0].end == 4);
  CHECK(c[2].start == 8);
  CHECK(c[2].end == 10);
  c = chunk_text(5, 6, 4);
  REQUIRE(c.size() == 1);
  CHECK(c[0].start == 5);
  CHECK(c[0].end == 6);
  CHECK_THROWS_AS(chunk_text(5, 5, 4), std::invalid_argument);
  CHECK_THROWS_AS(chunk_text(0, 4, 0), std::invalid_argument);
}

TEST_CASE("chunk pairing follows pooled attention mass, ties go earliest") {
  Mat<float> attn(8, 8);
  for (auto& v : attn.a) v = 0.01f;
  attn.at(4, 2) = 0.9f;
  attn.at(5, 3) = 0.9f;
  const std::vector<ChunkSpan> ctx = {{0, 2}, {2, 4}};
  CHECK(chunk_attention_pair(attn, ctx, ChunkSpan{4, 6}) == 1);
  for (auto& v : attn.a) v = 0.125f;  // uniform: earliest chunk wins
  CHECK(chunk_attention_pair(attn, ctx, ChunkSpan{4, 6}) == 0);
  CHECK_THROWS_AS(chunk_attention_pair(attn, {}, ChunkSpan{4, 6}),
                  std::invalid_argument);
  CHECK_THROWS_AS(chunk_attention_pair(attn, ctx, ChunkSpan{4, 4}),
                  std::invalid_argument);
}

TEST_CASE("chunk scores reduce to whole-span pooling at large chunk size") {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ffn = 16;
  cfg.vocab_size = 12;
  cfg.max_seq_len = 32;
  cfg.rng_seed = 9;
  auto w = init_weights<float>(cfg);
  const auto s = chunk_sample();
  auto tr = forward_trace(w, s.full());
  const auto cs = chunk_scores(w, tr, s, 16);

  // single response chunk, single context chunk: every head pairs them
  const auto remb = detail::mean_pooled_state(
      tr.x_post[1], ChunkSpan{s.response_begin(), s.response_end()});
  const auto cemb = detail::mean_pooled_state(
      tr.x_post[1], ChunkSpan{s.context_begin(), s.context_end()});
  const double want =
      cosine(std::span<const double>(remb), std::span<const double>(cemb));
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 2; ++h)
      CHECK(cs.ecs_resp[l][h] == doctest::Approx(want).epsilon(1e-12));

  // chunk pks at full width is the plain token mean
  for (int l = 0; l < 2; ++l) {
    double m = 0.0;
    for (int i = s.response_begin(); i < s.response_end(); ++i)
      m += pks_token(w, tr, i, l);
    m /= s.response.size();
    CHECK(cs.pks_resp[l] == doctest::Approx(m).epsilon(1e-12));
  }

  // ranges hold at small chunk sizes too
  const auto cs2 = chunk_scores(w, tr, s, 2);
  for (int l = 0; l < 2; ++l) {
    CHECK(cs2.pks_resp[l] >= 0.0);
    for (int h = 0; h < 2; ++h) {
      CHECK(cs2.ecs_resp[l][h] >= -1.0);
      CHECK(cs2.ecs_resp[l][h] <= 1.0);
    }
  }

  DetectorConfig dc;
  dc.heads = {HeadRef{0, 0}};
  dc.ffn_layers = {1};
  dc.chunk_size = 2;
  const double hc = h_chunk(w, tr, s, dc);
  CHECK(hc == doctest::Approx(cs2.pks_resp[1] - cs2.ecs_resp[0][0]).epsilon(1e-12));
  dc.ffn_layers = {7};
  CHECK_THROWS_AS(h_chunk(w, tr, s, dc), std::invalid_argument);
}

TEST_CASE("ffn ranking puts the label-tracking layer first, constants last") {
  auto s = make_synth(80, 1234);
  // force a constant column at layer 0
  for (auto& [id, t] : s.tables) t.pks_resp[0] = 0.7;
  const auto order = rank_ffn_layers(s.tables, s.ids, s.labels);
  REQUIRE(order.size() == 4);
  CHECK(order.front() == 3);
  CHECK(order.back() == 0);
  CHECK_THROWS_AS(rank_ffn_layers(s.tables, {}, {}), std::invalid_argument);
}

TEST_CASE("set selection clamps to what exists") {
  auto s = make_synth(40, 77);
  const auto rep = synth_report();
  auto [heads, ffn] = select_sets(rep, s.tables, s.ids, s.labels, 2, 1);
  REQUIRE(heads.size() == 2);
  CHECK(heads[0] == HeadRef{1, 2});
  CHECK(heads[1] == HeadRef{0, 0});
  REQUIRE(ffn.size() == 1);
  CHECK(ffn[0] == 3);
  auto [all_heads, all_ffn] = select_sets(rep, s.tables, s.ids, s.labels, 100, 100);
  CHECK(all_heads.size() == 6);
  CHECK(all_ffn.size() == 4);
  CHECK_THROWS_AS(select_sets(rep, s.tables, s.ids, s.labels, 0, 1),
                  std::invalid_argument);
  std::vector<int> ones(s.ids.size(), 1);
  CHECK_THROWS_AS(select_sets(rep, s.tables, s.ids, ones, 1, 1),
                  std::invalid_argument);
}

TEST_CASE("calibration recovers the planted signal deterministically") {
  auto s = make_synth(120, 2026);
  const auto rep = synth_report();
  const auto r1 = calibrate(rep, s.tables, s.ids, s.labels);
  CHECK(r1.validation_auc >= 0.95);
  REQUIRE_FALSE(r1.config.ffn_layers.empty());
  CHECK(r1.config.ffn_layers.front() == 3);
  REQUIRE_FALSE(r1.config.heads.empty());
  CHECK(r1.config.heads.front() == HeadRef{1, 2});
  CHECK(r1.config.alpha == doctest::Approx(1.0));

  // the chosen threshold separates the classes well on the same set
  std::vector<double> scores;
  for (const auto& id : s.ids) scores.push_back(h_token(s.tables.at(id), r1.config));
  const auto st = binary_stats(scores, s.labels, r1.config.threshold);
  CHECK(st.f1 >= 0.95);

  const auto r2 = calibrate(rep, s.tables, s.ids, s.labels);
  CHECK(r2.config.beta == r1.config.beta);
  CHECK(r2.config.threshold == r1.config.threshold);
  CHECK(r2.config.heads == r1.config.heads);
  CHECK(r2.config.ffn_layers == r1.config.ffn_layers);
  CHECK(r2.validation_auc == r1.validation_auc);

  std::vector<int> ones(s.ids.size(), 1);
  CHECK_THROWS_AS(calibrate(rep, s.tables, s.ids, ones), std::invalid_argument);
  CHECK_THROWS_AS(calibrate(rep, s.tables, {}, {}), std::invalid_argument);
  CalibrationGrid empty_grid;
  empty_grid.betas.clear();
  CHECK_THROWS_AS(calibrate(rep, s.tables, s.ids, s.labels, empty_grid),
                  std::invalid_argument);
}
