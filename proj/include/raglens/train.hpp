#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "raglens/funcs.hpp"
#include "raglens/mat.hpp"
#include "raglens/rng.hpp"
#include "raglens/transformer.hpp"
#include "raglens/weights.hpp"

namespace raglens {

struct TrainParams {
  double lr = 0.05;
  int steps = 1000;
  int batch_size = 16;
  uint64_t seed = 0;
};

struct TrainReport {
  double final_loss = 0.0;
  int steps_run = 0;
};

namespace detail {

// Layernorm forward that keeps per-row mean and inverse stddev for backward.
template <typename S>
void ln_fwd(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, S eps, Mat<S>& out,
            std::vector<double>& mu, std::vector<double>& inv) {
  const int d = x.cols;
  mu.resize(x.rows);
  inv.resize(x.rows);
  for (int i = 0; i < x.rows; ++i) {
    const S* xi = x.row(i);
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += static_cast<double>(xi[j]);
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = static_cast<double>(xi[j]) - m;
      var += c * c;
    }
    var /= d;
    const double iv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    mu[i] = m;
    inv[i] = iv;
    S* oi = out.row(i);
    for (int j = 0; j < d; ++j)
      oi[j] = g.at(0, j) * static_cast<S>((static_cast<double>(xi[j]) - m) * iv) +
              b.at(0, j);
  }
}

// dx += layernorm backward; dg/db accumulate parameter gradients.
template <typename S>
void ln_bwd(const Mat<S>& x, const std::vector<double>& mu,
            const std::vector<double>& inv, const Mat<S>& g, const Mat<S>& dout,
            Mat<S>& dx, Mat<S>& dg, Mat<S>& db) {
  const int d = x.cols;
  std::vector<double> xhat(d), dxh(d);
  for (int i = 0; i < x.rows; ++i) {
    const S* xi = x.row(i);
    const S* doi = dout.row(i);
    for (int j = 0; j < d; ++j) {
      xhat[j] = (static_cast<double>(xi[j]) - mu[i]) * inv[i];
      const double dv = static_cast<double>(doi[j]);
      dg.at(0, j) += static_cast<S>(dv * xhat[j]);
      db.at(0, j) += static_cast<S>(dv);
      dxh[j] = dv * static_cast<double>(g.at(0, j));
    }
    double m1 = 0.0, m2 = 0.0;
    for (int j = 0; j < d; ++j) {
      m1 += dxh[j];
      m2 += dxh[j] * xhat[j];
    }
    m1 /= d;
    m2 /= d;
    S* dxi = dx.row(i);
    for (int j = 0; j < d; ++j)
      dxi[j] += static_cast<S>(inv[i] * (dxh[j] - m1 - xhat[j] * m2));
  }
}

template <typename S>
struct LayerCache {
  Mat<S> x_in, n1;
  std::vector<double> mu1, inv1;
  std::vector<Mat<S>> q, k, v, a, ctx;  // per head
  Mat<S> x_mid, n2;
  std::vector<double> mu2, inv2;
  Mat<S> z, g;  // FFN pre/post activation
};

}  // namespace detail

// Mean next-token cross entropy over every predicted position in `seqs`,
// with gradients written into `grads` (overwritten, not accumulated across
// calls). Mirrors forward_trace arithmetic but keeps backward caches.
template <typename S>
double loss_and_grad(const WeightsT<S>& w, const std::vector<std::vector<int>>& seqs,
                     WeightsT<S>& grads) {
  const ModelConfig& cfg = w.cfg;
  const int d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head(), V = cfg.vocab_size;
  const S inv_sqrt_dh = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));
  grads.zero();

  size_t total_preds = 0;
  for (const auto& s : seqs) {
    if (s.size() < 2) throw std::invalid_argument("training sequence shorter than 2");
    if (static_cast<int>(s.size()) > cfg.max_seq_len)
      throw std::invalid_argument("training sequence longer than max_seq_len");
    for (int t : s)
      if (t < 0 || t >= V) throw std::invalid_argument("training token out of range");
    total_preds += s.size() - 1;
  }
  if (total_preds == 0) throw std::invalid_argument("no predictions in batch");
  const double inv_total = 1.0 / static_cast<double>(total_preds);

  double loss = 0.0;
  for (const auto& toks : seqs) {
    const int T = static_cast<int>(toks.size());

    // ---- forward with caches ----
    Mat<S> x(T, d);
    for (int i = 0; i < T; ++i) {
      const S* te = w.wte.row(toks[i]);
      const S* pe = w.wpe.row(i);
      S* xi = x.row(i);
      for (int j = 0; j < d; ++j) xi[j] = te[j] + pe[j];
    }

    std::vector<detail::LayerCache<S>> caches(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
      auto& C = caches[l];
      const LayerT<S>& L = w.layers[l];
      C.x_in = x;
      C.n1 = Mat<S>(T, d);
      detail::ln_fwd(C.x_in, L.ln1_g, L.ln1_b, static_cast<S>(cfg.ln_eps), C.n1,
                     C.mu1, C.inv1);
      C.q.assign(H, Mat<S>());
      C.k.assign(H, Mat<S>());
      C.v.assign(H, Mat<S>());
      C.a.assign(H, Mat<S>());
      C.ctx.assign(H, Mat<S>());
      for (int h = 0; h < H; ++h) {
        C.q[h] = Mat<S>(T, dh);
        C.k[h] = Mat<S>(T, dh);
        C.v[h] = Mat<S>(T, dh);
        matmul_acc(C.n1, L.heads[h].wq, C.q[h]);
        matmul_acc(C.n1, L.heads[h].wk, C.k[h]);
        matmul_acc(C.n1, L.heads[h].wv, C.v[h]);
        Mat<S> a(T, T);
        for (int i = 0; i < T; ++i) {
          const S* qi = C.q[h].row(i);
          for (int j = 0; j <= i; ++j)
            a.at(i, j) = dot(qi, C.k[h].row(j), dh) * inv_sqrt_dh;
          softmax_inplace(a.row(i), i + 1);
        }
        Mat<S> ctx(T, dh);
        for (int i = 0; i < T; ++i)
          for (int j = 0; j <= i; ++j) axpy(a.at(i, j), C.v[h].row(j), ctx.row(i), dh);
        Mat<S> ho(T, d);
        matmul_acc(ctx, L.heads[h].wo, ho);
        for (size_t e = 0; e < x.a.size(); ++e) x.a[e] += ho.a[e];
        C.a[h] = std::move(a);
        C.ctx[h] = std::move(ctx);
      }
      C.x_mid = x;
      C.n2 = Mat<S>(T, d);
      detail::ln_fwd(C.x_mid, L.ln2_g, L.ln2_b, static_cast<S>(cfg.ln_eps), C.n2,
                     C.mu2, C.inv2);
      C.z = Mat<S>(T, cfg.d_ffn);
      matmul_bt_acc(C.n2, L.ffn_k, C.z);
      C.g = C.z;
      for (auto& e : C.g.a) e = gelu(e);
      Mat<S> fo(T, d);
      matmul_acc(C.g, L.ffn_v, fo);
      for (size_t e = 0; e < x.a.size(); ++e) x.a[e] += fo.a[e];
    }

    Mat<S> fin(T, d);
    std::vector<double> muF, invF;
    detail::ln_fwd(x, w.lnf_g, w.lnf_b, static_cast<S>(cfg.ln_eps), fin, muF, invF);
    Mat<S> logits(T, V);
    matmul_acc(fin, w.unembed, logits);

    // ---- loss and dlogits ----
    Mat<S> dlogits(T, V);
    for (int i = 0; i + 1 < T; ++i) {
      const S* row = logits.row(i);
      double mx = static_cast<double>(row[0]);
      for (int v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double sum = 0.0;
      for (int v = 0; v < V; ++v) sum += std::exp(static_cast<double>(row[v]) - mx);
      const double lse = mx + std::log(sum);
      loss += (lse - static_cast<double>(row[toks[i + 1]])) * inv_total;
      S* drow = dlogits.row(i);
      for (int v = 0; v < V; ++v) {
        const double p = std::exp(static_cast<double>(row[v]) - lse);
        drow[v] = static_cast<S>(p * inv_total);
      }
      drow[toks[i + 1]] -= static_cast<S>(inv_total);
    }

    // ---- backward ----
    Mat<S> dfin(T, d);
    matmul_bt_acc(dlogits, w.unembed, dfin);
    matmul_at_acc(fin, dlogits, grads.unembed);
    Mat<S> dx(T, d);
    detail::ln_bwd(x, muF, invF, w.lnf_g, dfin, dx, grads.lnf_g, grads.lnf_b);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
      auto& C = caches[l];
      const LayerT<S>& L = w.layers[l];
      LayerT<S>& G = grads.layers[l];

      // FFN: dx covers both the residual path and the FFN output.
      Mat<S> dg(T, cfg.d_ffn);
      matmul_bt_acc(dx, L.ffn_v, dg);
      matmul_at_acc(C.g, dx, G.ffn_v);
      Mat<S> dz = std::move(dg);
      for (size_t e = 0; e < dz.a.size(); ++e) dz.a[e] *= gelu_deriv(C.z.a[e]);
      matmul_at_acc(dz, C.n2, G.ffn_k);
      Mat<S> dn2(T, d);
      matmul_acc(dz, L.ffn_k, dn2);
      detail::ln_bwd(C.x_mid, C.mu2, C.inv2, L.ln2_g, dn2, dx, G.ln2_g, G.ln2_b);

      // attention heads; each head's output receives dx directly.
      Mat<S> dn1(T, d);
      for (int h = 0; h < H; ++h) {
        Mat<S> dctx(T, dh);
        matmul_bt_acc(dx, L.heads[h].wo, dctx);
        matmul_at_acc(C.ctx[h], dx, G.heads[h].wo);

        const Mat<S>& a = C.a[h];
        Mat<S> dq(T, dh), dk(T, dh), dv(T, dh);
        for (int i = 0; i < T; ++i) {
          const S* dci = dctx.row(i);
          // through the value mix and the softmax in one pass per row
          std::vector<S> da(i + 1);
          S dsum = S(0);
          for (int j = 0; j <= i; ++j) {
            da[j] = dot(dci, C.v[h].row(j), dh);
            axpy(a.at(i, j), dci, dv.row(j), dh);
            dsum += da[j] * a.at(i, j);
          }
          for (int j = 0; j <= i; ++j) {
            const S ds = a.at(i, j) * (da[j] - dsum) * inv_sqrt_dh;
            axpy(ds, C.k[h].row(j), dq.row(i), dh);
            axpy(ds, C.q[h].row(i), dk.row(j), dh);
          }
        }
        matmul_at_acc(C.n1, dq, G.heads[h].wq);
        matmul_at_acc(C.n1, dk, G.heads[h].wk);
        matmul_at_acc(C.n1, dv, G.heads[h].wv);
        matmul_bt_acc(dq, L.heads[h].wq, dn1);
        matmul_bt_acc(dk, L.heads[h].wk, dn1);
        matmul_bt_acc(dv, L.heads[h].wv, dn1);
      }
      detail::ln_bwd(C.x_in, C.mu1, C.inv1, L.ln1_g, dn1, dx, G.ln1_g, G.ln1_b);
    }

    for (int i = 0; i < T; ++i) {
      axpy(S(1), dx.row(i), grads.wte.row(toks[i]), d);
      axpy(S(1), dx.row(i), grads.wpe.row(i), d);
    }
  }
  return loss;
}

// Per-parameter adaptive step with no momentum: accumulate squared gradients,
// divide the step by their root.
template <typename S>
class Adagrad {
 public:
  Adagrad(const ModelConfig& cfg, double lr) : accum_(cfg), lr_(lr) {}

  void step(WeightsT<S>& w, const WeightsT<S>& g) {
    std::vector<const Mat<S>*> gs;
    g.for_each_tensor([&](const std::string&, const Mat<S>& m) { gs.push_back(&m); });
    std::vector<Mat<S>*> as;
    accum_.for_each_tensor([&](const std::string&, Mat<S>& m) { as.push_back(&m); });
    size_t t = 0;
    w.for_each_tensor([&](const std::string&, Mat<S>& m) {
      const Mat<S>& gm = *gs[t];
      Mat<S>& am = *as[t];
      ++t;
      for (size_t i = 0; i < m.a.size(); ++i) {
        const double gv = static_cast<double>(gm.a[i]);
        const double acc = static_cast<double>(am.a[i]) + gv * gv;
        am.a[i] = static_cast<S>(acc);
        m.a[i] -= static_cast<S>(lr_ * gv / (std::sqrt(acc) + 1e-8));
      }
    });
  }

 private:
  WeightsT<S> accum_;
  double lr_;
};

// Trains from scratch on the token corpus with minibatch sampling from a
// seeded stream. Throws if the loss stops being finite, naming the step.
template <typename S = float>
WeightsT<S> train_toy(const ModelConfig& cfg, const std::vector<std::vector<int>>& corpus,
                      const TrainParams& p, TrainReport* report = nullptr) {
  if (corpus.empty()) throw std::invalid_argument("train_toy: empty corpus");
  if (p.steps < 0 || p.batch_size < 1 || !(p.lr >= 0))
    throw std::invalid_argument("train_toy: bad hyperparameters");

  WeightsT<S> w = init_weights<S>(cfg);
  WeightsT<S> grads(cfg);
  Adagrad<S> opt(cfg, p.lr);
  Rng batch_rng(Rng::mix(p.seed, 0xBA7C8ull));

  double last_loss = 0.0;
  for (int step = 0; step < p.steps; ++step) {
    std::vector<std::vector<int>> batch(p.batch_size);
    for (auto& b : batch) b = corpus[batch_rng.next_below(corpus.size())];
    last_loss = loss_and_grad(w, batch, grads);
    if (!std::isfinite(last_loss))
      throw std::runtime_error("train_toy: loss diverged at step " +
                               std::to_string(step));
    opt.step(w, grads);
  }
  if (report) {
    report->final_loss = last_loss;
    report->steps_run = p.steps;
  }
  return w;
}

}  // namespace raglens
