#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "raglens/funcs.hpp"
#include "raglens/mat.hpp"
#include "raglens/rng.hpp"
#include "raglens/weights.hpp"

namespace raglens {

struct HeadRef {
  int layer = 0;
  int head = 0;
  friend bool operator==(const HeadRef& a, const HeadRef& b) {
    return a.layer == b.layer && a.head == b.head;
  }
  friend bool operator<(const HeadRef& a, const HeadRef& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.head < b.head;
  }
};

// Optional modifications applied during a forward pass: rescaling of head or
// FFN contributions to the residual stream, and replacement of a head's
// pre-softmax attention scores with seeded Gaussian noise.
struct ForwardMods {
  std::vector<std::pair<HeadRef, double>> head_scale;
  std::vector<std::pair<int, double>> ffn_scale;
  std::vector<HeadRef> noise_heads;
  uint64_t noise_seed = 0;

  bool empty() const {
    return head_scale.empty() && ffn_scale.empty() && noise_heads.empty();
  }
};

// Everything the forward pass writes into or reads off the residual stream,
// kept per layer so the stream can be reassembled term by term.
template <typename S>
struct ResidualTraceT {
  ModelConfig cfg;
  std::vector<int> tokens;
  Mat<S> embed;                             // T x d, token + position embedding
  std::vector<std::vector<Mat<S>>> head_out;  // [layer][head], T x d
  std::vector<Mat<S>> ffn_out;              // [layer], T x d
  std::vector<Mat<S>> x_mid;                // [layer], stream after attention
  std::vector<Mat<S>> x_post;               // [layer], stream after FFN
  std::vector<std::vector<Mat<S>>> attn;    // [layer][head], T x T row-causal
  Mat<S> logits;                            // T x vocab

  int seq_len() const { return static_cast<int>(tokens.size()); }
};

using ResidualTrace = ResidualTraceT<float>;

template <typename S>
void layernorm_rows(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, S eps,
                    Mat<S>& out) {
  const int d = x.cols;
  for (int i = 0; i < x.rows; ++i) {
    const S* xi = x.row(i);
    S* oi = out.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += static_cast<double>(xi[j]);
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = static_cast<double>(xi[j]) - mean;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (int j = 0; j < d; ++j)
      oi[j] = g.at(0, j) * static_cast<S>((static_cast<double>(xi[j]) - mean) * inv) +
              b.at(0, j);
  }
}

namespace detail {

inline std::vector<std::vector<double>> expand_head_scales(const ModelConfig& cfg,
                                                           const ForwardMods& mods) {
  std::vector<std::vector<double>> s(cfg.n_layers,
                                     std::vector<double>(cfg.n_heads, 1.0));
  for (const auto& [ref, v] : mods.head_scale) {
    if (ref.layer < 0 || ref.layer >= cfg.n_layers || ref.head < 0 ||
        ref.head >= cfg.n_heads)
      throw std::invalid_argument("head scale out of range");
    s[ref.layer][ref.head] = v;
  }
  return s;
}

inline std::vector<double> expand_ffn_scales(const ModelConfig& cfg,
                                             const ForwardMods& mods) {
  std::vector<double> s(cfg.n_layers, 1.0);
  for (const auto& [l, v] : mods.ffn_scale) {
    if (l < 0 || l >= cfg.n_layers) throw std::invalid_argument("ffn scale out of range");
    s[l] = v;
  }
  return s;
}

}  // namespace detail

// Full forward pass recording the decomposition of the residual stream:
//   x_post[l] = x_prev + sum_h head_out[l][h] + ffn_out[l]
// Attention uses causal masking; every head of a layer reads the same
// layer-normed input, so head contributions are order-independent.
template <typename S>
ResidualTraceT<S> forward_trace(const WeightsT<S>& w, const std::vector<int>& tokens,
                                const ForwardMods& mods = {}) {
  const ModelConfig& cfg = w.cfg;
  const int T = static_cast<int>(tokens.size());
  if (T < 1) throw std::invalid_argument("forward_trace: empty token sequence");
  if (T > cfg.max_seq_len)
    throw std::invalid_argument("forward_trace: sequence longer than max_seq_len");
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw std::invalid_argument("forward_trace: token id out of range: " +
                                  std::to_string(t));

  const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head();
  const S inv_sqrt_dh = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));
  const auto head_scales = detail::expand_head_scales(cfg, mods);
  const auto ffn_scales = detail::expand_ffn_scales(cfg, mods);
  std::vector<std::vector<char>> noisy(cfg.n_layers, std::vector<char>(H, 0));
  for (const auto& ref : mods.noise_heads) {
    if (ref.layer < 0 || ref.layer >= cfg.n_layers || ref.head < 0 || ref.head >= H)
      throw std::invalid_argument("noise head out of range");
    noisy[ref.layer][ref.head] = 1;
  }

  ResidualTraceT<S> tr;
  tr.cfg = cfg;
  tr.tokens = tokens;
  tr.embed = Mat<S>(T, d);
  for (int i = 0; i < T; ++i) {
    const S* te = w.wte.row(tokens[i]);
    const S* pe = w.wpe.row(i);
    S* e = tr.embed.row(i);
    for (int j = 0; j < d; ++j) e[j] = te[j] + pe[j];
  }

  Mat<S> x = tr.embed;
  tr.head_out.resize(cfg.n_layers);
  tr.ffn_out.resize(cfg.n_layers);
  tr.x_mid.resize(cfg.n_layers);
  tr.x_post.resize(cfg.n_layers);
  tr.attn.resize(cfg.n_layers);

  Mat<S> n1(T, d), n2(T, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerT<S>& L = w.layers[l];
    layernorm_rows(x, L.ln1_g, L.ln1_b, static_cast<S>(cfg.ln_eps), n1);

    tr.head_out[l].assign(H, Mat<S>());
    tr.attn[l].assign(H, Mat<S>());
    for (int h = 0; h < H; ++h) {
      Mat<S> q(T, dh), k(T, dh), v(T, dh);
      matmul_acc(n1, L.heads[h].wq, q);
      matmul_acc(n1, L.heads[h].wk, k);
      matmul_acc(n1, L.heads[h].wv, v);

      Mat<S> a(T, T);
      if (noisy[l][h]) {
        Rng nr(Rng::mix(mods.noise_seed, static_cast<uint64_t>(l) * H + h));
        for (int i = 0; i < T; ++i)
          for (int j = 0; j <= i; ++j) a.at(i, j) = static_cast<S>(nr.next_normal());
      } else {
        for (int i = 0; i < T; ++i) {
          const S* qi = q.row(i);
          for (int j = 0; j <= i; ++j)
            a.at(i, j) = dot(qi, k.row(j), dh) * inv_sqrt_dh;
        }
      }
      for (int i = 0; i < T; ++i) softmax_inplace(a.row(i), i + 1);

      Mat<S> ctx(T, dh);
      for (int i = 0; i < T; ++i) {
        S* ci = ctx.row(i);
        for (int j = 0; j <= i; ++j) axpy(a.at(i, j), v.row(j), ci, dh);
      }
      Mat<S> ho(T, d);
      matmul_acc(ctx, L.heads[h].wo, ho);
      const double sc = head_scales[l][h];
      if (sc != 1.0)
        for (auto& e : ho.a) e = static_cast<S>(sc * static_cast<double>(e));
      for (size_t i = 0; i < x.a.size(); ++i) x.a[i] += ho.a[i];
      tr.head_out[l][h] = std::move(ho);
      tr.attn[l][h] = std::move(a);
    }
    tr.x_mid[l] = x;

    layernorm_rows(x, L.ln2_g, L.ln2_b, static_cast<S>(cfg.ln_eps), n2);
    Mat<S> z(T, cfg.d_ffn);
    matmul_bt_acc(n2, L.ffn_k, z);
    for (auto& e : z.a) e = gelu(e);
    Mat<S> fo(T, d);
    matmul_acc(z, L.ffn_v, fo);
    const double fs = ffn_scales[l];
    if (fs != 1.0)
      for (auto& e : fo.a) e = static_cast<S>(fs * static_cast<double>(e));
    for (size_t i = 0; i < x.a.size(); ++i) x.a[i] += fo.a[i];
    tr.ffn_out[l] = std::move(fo);
    tr.x_post[l] = x;
  }

  Mat<S> fin(T, d);
  layernorm_rows(x, w.lnf_g, w.lnf_b, static_cast<S>(cfg.ln_eps), fin);
  tr.logits = Mat<S>(T, cfg.vocab_size);
  matmul_acc(fin, w.unembed, tr.logits);
  return tr;
}

// Rebuilds the stream at the output of `layer` from the recorded terms:
// embedding plus every head and FFN contribution up to and including that
// layer.
template <typename S>
Mat<S> reconstruct_stream(const ResidualTraceT<S>& tr, int layer) {
  if (layer < 0 || layer >= tr.cfg.n_layers)
    throw std::invalid_argument("reconstruct_stream: layer out of range");
  Mat<S> acc = tr.embed;
  for (int l = 0; l <= layer; ++l) {
    for (const auto& ho : tr.head_out[l])
      for (size_t i = 0; i < acc.a.size(); ++i) acc.a[i] += ho.a[i];
    for (size_t i = 0; i < acc.a.size(); ++i) acc.a[i] += tr.ffn_out[l].a[i];
  }
  return acc;
}

// Relative error at one position between the recorded last-layer stream and
// its sum-of-contributions reconstruction:
//   |x_L - (x_0 + sum head_out + sum ffn_out)| / max(|x_L|, eps)
template <typename S>
double reconstruct_residual(const ResidualTraceT<S>& tr, int position) {
  if (position < 0 || position >= tr.seq_len())
    throw std::invalid_argument("reconstruct_residual: position out of range");
  const int d = tr.cfg.d_model;
  const int last = tr.cfg.n_layers - 1;
  std::vector<double> acc(d);
  for (int j = 0; j < d; ++j) acc[j] = static_cast<double>(tr.embed.at(position, j));
  for (int l = 0; l <= last; ++l) {
    for (const auto& ho : tr.head_out[l])
      for (int j = 0; j < d; ++j) acc[j] += static_cast<double>(ho.at(position, j));
    for (int j = 0; j < d; ++j)
      acc[j] += static_cast<double>(tr.ffn_out[l].at(position, j));
  }
  double diff2 = 0.0, ref2 = 0.0;
  for (int j = 0; j < d; ++j) {
    const double xr = static_cast<double>(tr.x_post[last].at(position, j));
    const double dd = acc[j] - xr;
    diff2 += dd * dd;
    ref2 += xr * xr;
  }
  return std::sqrt(diff2) / std::max(std::sqrt(ref2), 1e-12);
}

// Max abs difference between the recorded stream and its term-by-term
// reconstruction, across all layers (both the post-attention and post-FFN
// checkpoints).
template <typename S>
double reconstruction_error(const ResidualTraceT<S>& tr) {
  double worst = 0.0;
  Mat<S> acc = tr.embed;
  for (int l = 0; l < tr.cfg.n_layers; ++l) {
    for (const auto& ho : tr.head_out[l])
      for (size_t i = 0; i < acc.a.size(); ++i) acc.a[i] += ho.a[i];
    for (size_t i = 0; i < acc.a.size(); ++i) {
      double diff = std::abs(static_cast<double>(acc.a[i]) -
                             static_cast<double>(tr.x_mid[l].a[i]));
      if (diff > worst) worst = diff;
    }
    for (size_t i = 0; i < acc.a.size(); ++i) acc.a[i] += tr.ffn_out[l].a[i];
    for (size_t i = 0; i < acc.a.size(); ++i) {
      double diff = std::abs(static_cast<double>(acc.a[i]) -
                             static_cast<double>(tr.x_post[l].a[i]));
      if (diff > worst) worst = diff;
    }
  }
  return worst;
}

template <typename S>
int argmax_row(const Mat<S>& m, int row) {
  const S* p = m.row(row);
  int best = 0;
  for (int j = 1; j < m.cols; ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

// Greedy decoding by full recomputation each step (sequences here are short).
// Stops after emitting eos_id or after max_new tokens. Returns prompt plus
// generated tokens, including the eos if one was produced.
template <typename S>
std::vector<int> greedy_decode(const WeightsT<S>& w, const std::vector<int>& prompt,
                               int max_new, int eos_id, const ForwardMods& mods = {}) {
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  std::vector<int> seq = prompt;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(seq.size()) >= w.cfg.max_seq_len) break;
    auto tr = forward_trace(w, seq, mods);
    int next = argmax_row(tr.logits, tr.seq_len() - 1);
    seq.push_back(next);
    if (next == eos_id) break;
  }
  return seq;
}

// Per-position next-token negative log likelihoods: element i is the loss for
// predicting tokens[i+1] from position i. Computed in double off the final
// logits.
template <typename S>
std::vector<double> nll_terms(const WeightsT<S>& w, const std::vector<int>& tokens,
                              const ForwardMods& mods = {}) {
  if (tokens.size() < 2)
    throw std::invalid_argument("nll_terms: need at least two tokens");
  auto tr = forward_trace(w, tokens, mods);
  const int T = tr.seq_len(), V = w.cfg.vocab_size;
  std::vector<double> out(T - 1);
  for (int i = 0; i + 1 < T; ++i) {
    const S* row = tr.logits.row(i);
    double mx = static_cast<double>(row[0]);
    for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double lse = 0.0;
    for (int j = 0; j < V; ++j) lse += std::exp(static_cast<double>(row[j]) - mx);
    lse = mx + std::log(lse);
    out[i] = lse - static_cast<double>(row[tokens[i + 1]]);
  }
  return out;
}

template <typename S>
double mean_nll(const WeightsT<S>& w, const std::vector<int>& tokens,
                const ForwardMods& mods = {}) {
  auto terms = nll_terms(w, tokens, mods);
  double s = 0.0;
  for (double t : terms) s += t;
  return s / static_cast<double>(terms.size());
}

}  // namespace raglens
