// Command-line front end: every stage of the toy RAG-hallucination pipeline
// as a subcommand with file-based inputs and outputs. Outputs are
// deterministic for fixed seeds, stdout carries a one-line JSON status, and
// the exit code is 0 only when the requested work fully succeeded.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "raglens/pipeline.hpp"

using namespace raglens;
using ordered_json = nlohmann::ordered_json;

namespace {

void emit(const ordered_json& j) { std::cout << j.dump() << "\n"; }

std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  return f;
}

std::vector<Sample> subset_samples(const std::vector<Sample>& samples,
                                   const std::string& split) {
  if (split == "all") return samples;
  const auto ids = split_for_calibration(samples);
  const auto& want = split == "calib" ? ids.calib_ids : ids.eval_ids;
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<Sample> out;
  for (const auto& id : want) out.push_back(*by_id.at(id));
  return out;
}

struct MakeCorpusArgs {
  uint64_t seed = 0;
  std::string out;
  CorpusParams params;
};

void cmd_make_corpus(const MakeCorpusArgs& a) {
  const Corpus c = generate_fact_corpus(a.seed, a.params);
  save_corpus(c, a.out);
  emit({{"corpus", a.out},
        {"facts", c.facts.size()},
        {"copy_relations",
         std::count(c.relation_is_copy.begin(), c.relation_is_copy.end(), 1)},
        {"training_sequences", c.training.size()},
        {"vocab_size", c.vocab_size()}});
}

struct TrainArgs {
  uint64_t seed = 0;
  std::string corpus, out;
  int layers = 4, heads = 4, d_model = 64, d_ffn = 256, max_seq = 32;
  TrainParams train;
};

void cmd_train_toy(const TrainArgs& a) {
  const Corpus c = load_corpus(a.corpus);
  ModelConfig cfg;
  cfg.n_layers = a.layers;
  cfg.n_heads = a.heads;
  cfg.d_model = a.d_model;
  cfg.d_ffn = a.d_ffn;
  cfg.vocab_size = c.vocab_size();
  cfg.max_seq_len = a.max_seq;
  cfg.rng_seed = a.seed;
  TrainParams tp = a.train;
  tp.seed = a.seed;
  TrainReport rep;
  const Weights w = train_toy<float>(cfg, c.training, tp, &rep);
  save_weights(w, a.out);
  emit({{"weights", a.out},
        {"steps", rep.steps_run},
        {"final_loss", rep.final_loss},
        {"fact_accuracy", fact_accuracy(w, c)}});
}

struct ConflictArgs {
  uint64_t seed = 0;
  std::string corpus, model, out;
  int max_samples = 384;
  double min_accuracy = 0.9;
  int max_new = 3;
};

void cmd_make_conflicts(const ConflictArgs& a) {
  const Corpus c = load_corpus(a.corpus);
  const Weights w = load_weights(a.model);
  const ConflictBuild b =
      build_conflict_samples(c, w, a.seed, a.max_samples, a.min_accuracy, a.max_new);
  save_samples(b.samples, a.out);
  int n1 = 0;
  for (const auto& s : b.samples) n1 += s.label;
  emit({{"samples", a.out},
        {"kept", b.samples.size()},
        {"label_0", b.samples.size() - n1},
        {"label_1", n1},
        {"discarded_both", b.discarded_both},
        {"discarded_neither", b.discarded_neither}});
}

struct TraceArgs {
  std::string model, samples, id, out;
  int position = -1;  // -1 = every position
};

void cmd_trace(const TraceArgs& a) {
  const Weights w = load_weights(a.model);
  const auto all = load_samples(a.samples);
  const Sample* s = nullptr;
  for (const auto& cand : all)
    if (cand.id == a.id) s = &cand;
  if (!s) throw std::invalid_argument("trace: no sample with id " + a.id);

  const auto tokens = s->full();
  const auto tr = forward_trace(w, tokens);
  const int T = tr.seq_len();
  if (a.position >= T)
    throw std::invalid_argument("trace: position out of range");

  ordered_json positions = ordered_json::array();
  const int lo = a.position < 0 ? 0 : a.position;
  const int hi = a.position < 0 ? T - 1 : a.position;
  for (int t = lo; t <= hi; ++t) {
    ordered_json layers = ordered_json::array();
    for (int l = 0; l < w.cfg.n_layers; ++l) {
      ordered_json heads = ordered_json::array();
      for (int h = 0; h < w.cfg.n_heads; ++h) {
        double n2 = 0.0;
        const float* row = tr.head_out[l][h].row(t);
        for (int j = 0; j < w.cfg.d_model; ++j) n2 += double(row[j]) * row[j];
        heads.push_back(std::sqrt(n2));
      }
      double f2 = 0.0;
      const float* frow = tr.ffn_out[l].row(t);
      for (int j = 0; j < w.cfg.d_model; ++j) f2 += double(frow[j]) * frow[j];
      layers.push_back({{"head_out_norms", std::move(heads)},
                        {"ffn_out_norm", std::sqrt(f2)}});
    }
    positions.push_back({{"position", t},
                         {"token", tokens[t]},
                         {"reconstruction_error", reconstruct_residual(tr, t)},
                         {"logit_argmax", argmax_row(tr.logits, t)},
                         {"layers", std::move(layers)}});
  }
  ordered_json j{{"id", s->id},
                 {"tokens", tokens},
                 {"query_len", s->query.size()},
                 {"context_len", s->context.size()},
                 {"response_len", s->response.size()},
                 {"positions", std::move(positions)}};
  open_out(a.out) << j.dump(2) << "\n";
  emit({{"trace", a.out}, {"positions", positions.size()}});
}

struct ScoresArgs {
  std::string model, samples, out, csv;
  double k_percent = 10.0;
};

void cmd_scores(const ScoresArgs& a) {
  const Weights w = load_weights(a.model);
  const auto samples = load_samples(a.samples);
  std::vector<ScoreTable> tables;
  tables.reserve(samples.size());
  for (const auto& s : samples) {
    const auto tr = forward_trace(w, s.full());
    tables.push_back(response_scores(w, tr, s, a.k_percent));
  }
  save_score_tables(tables, a.out);
  if (!a.csv.empty()) save_score_csv(tables, a.csv);
  emit({{"scores", a.out}, {"tables", tables.size()}});
}

struct CopyHeadsArgs {
  std::string model, out, csv;
  bool signed_trace = false;
  bool exact = false;
};

void cmd_copy_heads(const CopyHeadsArgs& a) {
  const Weights w = load_weights(a.model);
  CopyingScoreOptions opts;
  opts.signed_trace = a.signed_trace;
  opts.with_exact_ratio = a.exact;
  const auto rep = copying_head_scores(w, opts);
  save_copying_report_json(rep, a.out);
  if (!a.csv.empty()) save_copying_report_csv(rep, a.csv);
  emit({{"copying", a.out}, {"heads", rep.rows.size()}});
}

struct CalibrateArgs {
  std::string scores, samples, copying, model, out;
  double k_percent = 10.0;
  int chunk_size = 4;
  double alpha2 = 5.0, beta2 = 0.2;
};

void cmd_calibrate(const CalibrateArgs& a) {
  const auto tables = load_score_tables(a.scores);
  const auto samples = load_samples(a.samples);
  const auto copying = load_copying_report(a.copying);
  const auto split = split_for_calibration(samples);
  auto res = calibrate(copying, tables, split.calib_ids, split.calib_labels);
  res.config.chunk_size = a.chunk_size;
  res.config.alpha2 = a.alpha2;
  res.config.beta2 = a.beta2;
  if (!a.model.empty()) {
    const Weights w = load_weights(a.model);
    res.config.tau = calibrate_tau(w, samples, split.calib_ids, split.calib_labels,
                                   res.config, a.k_percent);
  }
  save_detector_config(res.config, a.out);
  ordered_json heads = ordered_json::array();
  for (const auto& h : res.config.heads)
    heads.push_back(ordered_json::array({h.layer, h.head}));
  emit({{"config", a.out},
        {"validation_auc", res.validation_auc},
        {"beta", res.config.beta},
        {"heads", std::move(heads)},
        {"ffn_layers", res.config.ffn_layers},
        {"threshold", res.config.threshold},
        {"tau", std::isfinite(res.config.tau) ? ordered_json(res.config.tau)
                                              : ordered_json("inf")}});
}

struct DetectArgs {
  std::string model, scores, samples, config, out, summary;
  std::string mode = "token";
  std::string split = "eval";
};

void cmd_detect(const DetectArgs& a) {
  if (a.mode != "token" && a.mode != "chunk")
    throw std::invalid_argument("detect: mode must be token or chunk");
  if (a.split != "calib" && a.split != "eval" && a.split != "all")
    throw std::invalid_argument("detect: split must be calib, eval, or all");
  const Weights w = load_weights(a.model);
  const auto tables = load_score_tables(a.scores);
  const auto cfg = load_detector_config(a.config);
  const auto chosen = subset_samples(load_samples(a.samples), a.split);
  if (chosen.empty()) throw std::runtime_error("detect: empty split");

  std::vector<double> drive;
  std::vector<int> labels;
  auto csv = open_out(a.out);
  csv << "sample_id,H_token,H_chunk,label,predicted\n";
  for (const auto& s : chosen) {
    const auto it = tables.find(s.id);
    if (it == tables.end())
      throw std::runtime_error("detect: no score table for sample " + s.id);
    const double ht = h_token(it->second, cfg);
    const auto tr = forward_trace(w, s.full());
    const double hc = h_chunk(w, tr, s, cfg);
    const double score = a.mode == "token" ? ht : hc;
    const int pred = score >= cfg.threshold ? 1 : 0;
    drive.push_back(score);
    labels.push_back(s.label);
    csv << s.id << ',' << fmt17(ht) << ',' << fmt17(hc) << ',' << s.label << ','
        << pred << "\n";
  }
  const auto sum = summarize_detection(drive, labels, cfg.threshold);
  ordered_json j{{"mode", a.mode},     {"split", a.split},
                 {"n", chosen.size()}, {"auc", sum.auc},
                 {"pcc", sum.pcc},     {"acc", sum.accuracy},
                 {"recall", sum.recall}, {"f1", sum.f1}};
  open_out(a.summary) << j.dump(2) << "\n";
  emit({{"report", a.out}, {"summary", a.summary}, {"auc", sum.auc}, {"f1", sum.f1}});
}

struct InterveneArgs {
  uint64_t seed = 0;
  std::string model, samples, config, corpus, scores;
  std::string kind;  // noise | amplify
  std::string rq2_out, rq3_out;
  double k = 10.0;
  int max_samples = 40;
};

void cmd_intervene(const InterveneArgs& a) {
  const Weights w = load_weights(a.model);
  const auto samples = load_samples(a.samples);
  const auto cfg = load_detector_config(a.config);
  ordered_json status;

  if (!a.rq2_out.empty()) {
    if (a.kind != "noise" && a.kind != "amplify")
      throw std::invalid_argument("intervene: kind must be noise or amplify");
    std::vector<Sample> truthful;
    for (const auto& s : samples) {
      if (s.label == 0) truthful.push_back(s);
      if (static_cast<int>(truthful.size()) >= a.max_samples) break;
    }
    InterventionSpec spec;
    if (a.kind == "noise") {
      spec.kind = InterventionKind::attention_noise;
      spec.heads = cfg.heads;
      spec.noise_seed = Rng::mix(a.seed, 0xA0153ull);
    } else {
      spec.kind = InterventionKind::ffn_amplify;
      spec.layers = cfg.ffn_layers;
      spec.k = a.k;
    }
    const auto rep = run_rq2(w, truthful, spec);
    save_rq2_csv(rep, a.rq2_out);
    status["rq2"] = a.rq2_out;
    status["experimental_mean"] = rep.experimental_mean;
    status["control_mean"] = rep.control_mean;
  }

  if (!a.rq3_out.empty()) {
    if (a.scores.empty() || a.corpus.empty())
      throw std::invalid_argument("intervene: --rq3-out needs --scores and --corpus");
    const auto tables = load_score_tables(a.scores);
    const Corpus corpus = load_corpus(a.corpus);
    const auto by_label = split_by_label(samples);
    const auto known = known_sample_ids(w, corpus, samples, by_label.truthful);
    const auto rep =
        run_rq3(tables, known, by_label.hallucinated, cfg.heads, cfg.ffn_layers);
    open_out(a.rq3_out) << rq3_to_json(rep).dump(2) << "\n";
    status["rq3"] = a.rq3_out;
    status["ecs_difference"] = rep.ecs_difference();
    status["pks_difference"] = rep.pks_difference();
  }

  if (status.empty())
    throw std::invalid_argument("intervene: nothing to do (pass --rq2-out or --rq3-out)");
  emit(status);
}

struct AarfArgs {
  std::string model, config, samples, out;
  double tau_override = std::numeric_limits<double>::quiet_NaN();
  double alpha2 = 0.0, beta2 = 0.0;  // 0 = keep config value
  int max_new = 3;
  double k_percent = 10.0;
};

void cmd_aarf_generate(const AarfArgs& a) {
  const Weights w = load_weights(a.model);
  DetectorConfig cfg = load_detector_config(a.config);
  if (!std::isnan(a.tau_override)) cfg.tau = a.tau_override;
  if (a.alpha2 > 0) cfg.alpha2 = a.alpha2;
  if (a.beta2 > 0) cfg.beta2 = a.beta2;
  const auto samples = load_samples(a.samples);

  auto f = open_out(a.out);
  size_t triggered_total = 0, steps_total = 0;
  for (const auto& s : samples) {
    std::vector<AarfStep> log;
    const auto full =
        aarf_decode(w, s.query, s.context, cfg, a.max_new, kTokEos, a.k_percent, &log);
    const size_t prompt_len = s.query.size() + s.context.size();
    std::vector<int> generated(full.begin() + prompt_len, full.end());
    std::string text;
    for (size_t i = 0; i < generated.size(); ++i) {
      if (i) text += ' ';
      text += std::to_string(generated[i]);
    }
    ordered_json steps = ordered_json::array();
    for (const auto& st : log) {
      steps.push_back({{"position", st.position},
                       {"h_t", st.h_t},
                       {"triggered", st.triggered}});
      triggered_total += st.triggered ? 1 : 0;
    }
    steps_total += log.size();
    ordered_json line{{"id", s.id},
                      {"generated_tokens", generated},
                      {"text", text},
                      {"steps", std::move(steps)}};
    f << line.dump() << "\n";
  }
  emit({{"generations", a.out},
        {"samples", samples.size()},
        {"steps", steps_total},
        {"triggered", triggered_total},
        {"tau", std::isfinite(cfg.tau) ? ordered_json(cfg.tau) : ordered_json("inf")}});
}

struct ReportArgs {
  std::string eval_csv, rq3, copying, out, plot_csv;
  std::vector<std::string> summaries, rq2;
};

void cmd_report(const ReportArgs& a) {
  ordered_json j;
  if (!a.eval_csv.empty()) {
    std::ifstream f(a.eval_csv, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + a.eval_csv);
    std::string line;
    std::getline(f, line);  // header
    ordered_json rows = ordered_json::array();
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string id, ht, hc, lab, pred;
      if (!std::getline(ss, id, ',') || !std::getline(ss, ht, ',') ||
          !std::getline(ss, hc, ',') || !std::getline(ss, lab, ',') ||
          !std::getline(ss, pred, ','))
        throw std::runtime_error("report: malformed row in " + a.eval_csv);
      rows.push_back({{"sample_id", id},
                      {"h_token", std::stod(ht)},
                      {"h_chunk", std::stod(hc)},
                      {"label", std::stoi(lab)},
                      {"predicted", std::stoi(pred)}});
    }
    if (!a.plot_csv.empty()) {
      auto pf = open_out(a.plot_csv);
      pf << "sample_id,h_token,h_chunk,label\n";
      for (const auto& r : rows)
        pf << r.at("sample_id").get<std::string>() << ','
           << fmt17(r.at("h_token").get<double>()) << ','
           << fmt17(r.at("h_chunk").get<double>()) << ','
           << r.at("label").get<int>() << "\n";
    }
    j["detection_rows"] = std::move(rows);
  }
  for (const auto& path : a.summaries) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    ordered_json s;
    f >> s;
    j["detection_summaries"].push_back(s);
  }
  for (const auto& path : a.rq2) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string line;
    std::getline(f, line);
    double exp_sum = 0, ctl_sum = 0;
    int exp_n = 0, ctl_n = 0;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string group, id, base, interv, delta;
      if (!std::getline(ss, group, ',') || !std::getline(ss, id, ',') ||
          !std::getline(ss, base, ',') || !std::getline(ss, interv, ',') ||
          !std::getline(ss, delta, ','))
        throw std::runtime_error("report: malformed row in " + path);
      if (group == "experimental") {
        exp_sum += std::stod(delta);
        ++exp_n;
      } else {
        ctl_sum += std::stod(delta);
        ++ctl_n;
      }
    }
    if (exp_n == 0 || ctl_n == 0)
      throw std::runtime_error("report: rq2 file missing a group: " + path);
    j["rq2"].push_back({{"file", path},
                        {"experimental_mean_delta", exp_sum / exp_n},
                        {"control_mean_delta", ctl_sum / ctl_n}});
  }
  if (!a.rq3.empty()) {
    std::ifstream f(a.rq3, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + a.rq3);
    ordered_json s;
    f >> s;
    j["rq3"] = s;
  }
  if (!a.copying.empty()) {
    const auto rep = load_copying_report(a.copying);
    ordered_json top = ordered_json::array();
    for (size_t i = 0; i < rep.rows.size() && i < 8; ++i)
      top.push_back({{"layer", rep.rows[i].layer},
                     {"head", rep.rows[i].head},
                     {"score", rep.rows[i].score}});
    j["top_copying_heads"] = std::move(top);
  }
  if (j.empty()) throw std::invalid_argument("report: no inputs given");
  open_out(a.out) << j.dump(2) << "\n";
  emit({{"report", a.out}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy RAG hallucination lens: training, scoring, detection, mitigation"};
  app.require_subcommand(1);

  MakeCorpusArgs mc;
  auto* c_mc = app.add_subcommand("make-corpus", "generate the synthetic fact corpus");
  c_mc->add_option("--seed", mc.seed, "rng seed");
  c_mc->add_option("--out", mc.out, "corpus json path")->required();
  c_mc->add_option("--entities", mc.params.n_entities, "entity count");
  c_mc->add_option("--relations", mc.params.n_relations, "relation count");
  c_mc->add_option("--fact-repeat", mc.params.fact_repeat, "fact sentence copies");
  c_mc->add_option("--demo-fraction", mc.params.demo_fraction, "facts given demos");
  c_mc->add_option("--demo-repeat", mc.params.demo_repeat, "demos per selected fact");
  c_mc->add_option("--copy-fraction", mc.params.copy_fraction,
                   "demos answering from context");
  c_mc->callback([&] { cmd_make_corpus(mc); });

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train-toy", "train the toy transformer");
  c_tr->add_option("--seed", tr.seed, "rng seed");
  c_tr->add_option("--corpus", tr.corpus, "corpus json path")->required();
  c_tr->add_option("--out", tr.out, "weights output path")->required();
  c_tr->add_option("--layers", tr.layers, "transformer layers");
  c_tr->add_option("--heads", tr.heads, "attention heads per layer");
  c_tr->add_option("--d-model", tr.d_model, "residual width");
  c_tr->add_option("--d-ffn", tr.d_ffn, "feed-forward width");
  c_tr->add_option("--max-seq", tr.max_seq, "maximum sequence length");
  c_tr->add_option("--steps", tr.train.steps, "optimizer steps");
  c_tr->add_option("--lr", tr.train.lr, "learning rate");
  c_tr->add_option("--batch", tr.train.batch_size, "batch size");
  c_tr->callback([&] { cmd_train_toy(tr); });

  ConflictArgs cf;
  auto* c_cf = app.add_subcommand("make-conflicts",
                                  "build auto-labeled context-conflict samples");
  c_cf->add_option("--seed", cf.seed, "rng seed");
  c_cf->add_option("--corpus", cf.corpus, "corpus json path")->required();
  c_cf->add_option("--model", cf.model, "weights path")->required();
  c_cf->add_option("--out", cf.out, "samples jsonl path")->required();
  c_cf->add_option("--max", cf.max_samples, "sample budget");
  c_cf->add_option("--min-accuracy", cf.min_accuracy, "required fact accuracy");
  c_cf->add_option("--max-new", cf.max_new, "decode length");
  c_cf->callback([&] { cmd_make_conflicts(cf); });

  TraceArgs ta;
  auto* c_ta = app.add_subcommand("trace", "dump a residual-stream trace for a sample");
  c_ta->add_option("--model", ta.model, "weights path")->required();
  c_ta->add_option("--samples", ta.samples, "samples jsonl path")->required();
  c_ta->add_option("--id", ta.id, "sample id")->required();
  c_ta->add_option("--out", ta.out, "trace json path")->required();
  c_ta->add_option("--position", ta.position, "single position (default: all)");
  c_ta->callback([&] { cmd_trace(ta); });

  ScoresArgs sc;
  auto* c_sc = app.add_subcommand("scores", "compute ECS/PKS score tables");
  c_sc->add_option("--model", sc.model, "weights path")->required();
  c_sc->add_option("--samples", sc.samples, "samples jsonl path")->required();
  c_sc->add_option("--out", sc.out, "score tables json path")->required();
  c_sc->add_option("--csv", sc.csv, "optional per-token csv path");
  c_sc->add_option("--k-percent", sc.k_percent, "attended top-k percent");
  c_sc->callback([&] { cmd_scores(sc); });

  CopyHeadsArgs ch;
  auto* c_ch = app.add_subcommand("copy-heads", "rank heads by copying behavior");
  c_ch->add_option("--model", ch.model, "weights path")->required();
  c_ch->add_option("--out", ch.out, "report json path")->required();
  c_ch->add_option("--csv", ch.csv, "optional csv path");
  c_ch->add_flag("--signed", ch.signed_trace, "rank by signed trace");
  c_ch->add_flag("--exact", ch.exact, "also compute exact eigenvalue ratios");
  c_ch->callback([&] { cmd_copy_heads(ch); });

  CalibrateArgs ca;
  auto* c_ca = app.add_subcommand("calibrate",
                                  "fit detector sets, weights, and thresholds");
  c_ca->add_option("--scores", ca.scores, "score tables json path")->required();
  c_ca->add_option("--samples", ca.samples, "samples jsonl path")->required();
  c_ca->add_option("--copying", ca.copying, "copying report json path")->required();
  c_ca->add_option("--out", ca.out, "detector config output path")->required();
  c_ca->add_option("--model", ca.model,
                   "weights path (enables decode-threshold fitting)");
  c_ca->add_option("--k-percent", ca.k_percent, "attended top-k percent");
  c_ca->add_option("--chunk-size", ca.chunk_size, "chunk width for chunk mode");
  c_ca->add_option("--alpha2", ca.alpha2, "decode-time attention boost");
  c_ca->add_option("--beta2", ca.beta2, "decode-time ffn damping");
  c_ca->callback([&] { cmd_calibrate(ca); });

  DetectArgs de;
  auto* c_de = app.add_subcommand("detect", "score samples and evaluate the detector");
  c_de->add_option("--model", de.model, "weights path")->required();
  c_de->add_option("--scores", de.scores, "score tables json path")->required();
  c_de->add_option("--samples", de.samples, "samples jsonl path")->required();
  c_de->add_option("--config", de.config, "detector config path")->required();
  c_de->add_option("--out", de.out, "evaluation csv path")->required();
  c_de->add_option("--summary", de.summary, "summary json path")->required();
  c_de->add_option("--mode", de.mode, "token or chunk");
  c_de->add_option("--split", de.split, "calib, eval, or all");
  c_de->callback([&] { cmd_detect(de); });

  InterveneArgs iv;
  auto* c_iv = app.add_subcommand("intervene",
                                  "causal interventions and score comparisons");
  c_iv->add_option("--seed", iv.seed, "rng seed");
  c_iv->add_option("--model", iv.model, "weights path")->required();
  c_iv->add_option("--samples", iv.samples, "samples jsonl path")->required();
  c_iv->add_option("--config", iv.config, "detector config path")->required();
  c_iv->add_option("--kind", iv.kind, "noise or amplify (for --rq2-out)");
  c_iv->add_option("--rq2-out", iv.rq2_out, "intervention csv path");
  c_iv->add_option("--rq3-out", iv.rq3_out, "known-vs-hallucinated json path");
  c_iv->add_option("--scores", iv.scores, "score tables (for --rq3-out)");
  c_iv->add_option("--corpus", iv.corpus, "corpus json (for --rq3-out)");
  c_iv->add_option("--k", iv.k, "ffn amplification factor");
  c_iv->add_option("--max-samples", iv.max_samples, "truthful sample budget");
  c_iv->callback([&] { cmd_intervene(iv); });

  AarfArgs ag;
  auto* c_ag = app.add_subcommand("aarf-generate",
                                  "decode with attention/ffn reweighting mitigation");
  c_ag->add_option("--model", ag.model, "weights path")->required();
  c_ag->add_option("--config", ag.config, "detector config path")->required();
  c_ag->add_option("--samples", ag.samples, "samples jsonl path")->required();
  c_ag->add_option("--out", ag.out, "generations jsonl path")->required();
  c_ag->add_option("--tau", ag.tau_override, "trigger threshold override");
  c_ag->add_option("--alpha2", ag.alpha2, "attention boost override");
  c_ag->add_option("--beta2", ag.beta2, "ffn damping override");
  c_ag->add_option("--max-new", ag.max_new, "tokens to generate");
  c_ag->add_option("--k-percent", ag.k_percent, "attended top-k percent");
  c_ag->callback([&] { cmd_aarf_generate(ag); });

  ReportArgs rp;
  auto* c_rp = app.add_subcommand("report", "aggregate run artifacts into one summary");
  c_rp->add_option("--eval", rp.eval_csv, "detect evaluation csv");
  c_rp->add_option("--summary", rp.summaries, "detect summary json (repeatable)");
  c_rp->add_option("--rq2", rp.rq2, "intervention csv (repeatable)");
  c_rp->add_option("--rq3", rp.rq3, "known-vs-hallucinated json");
  c_rp->add_option("--copying", rp.copying, "copying report json");
  c_rp->add_option("--out", rp.out, "aggregate json path")->required();
  c_rp->add_option("--plot-csv", rp.plot_csv, "plot-ready csv of detection rows");
  c_rp->callback([&] { cmd_report(rp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
