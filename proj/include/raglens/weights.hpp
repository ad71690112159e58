#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "raglens/config.hpp"
#include "raglens/mat.hpp"
#include "raglens/rng.hpp"

namespace raglens {

template <typename S>
struct AttnHeadT {
  Mat<S> wq, wk, wv;  // d_model x d_head
  Mat<S> wo;          // d_head x d_model
};

template <typename S>
struct LayerT {
  Mat<S> ln1_g, ln1_b;  // 1 x d_model
  std::vector<AttnHeadT<S>> heads;
  Mat<S> ln2_g, ln2_b;  // 1 x d_model
  Mat<S> ffn_k;         // d_ffn x d_model, pre-activation keys
  Mat<S> ffn_v;         // d_ffn x d_model, value rows summed into the stream
};

// All parameters of the model. The residual stream has width d_model; each
// attention head reads and writes it through its own low-rank projections, so
// the stream update decomposes exactly into per-head and per-FFN terms.
template <typename S>
struct WeightsT {
  ModelConfig cfg;
  Mat<S> wte;  // vocab x d_model
  Mat<S> wpe;  // max_seq x d_model
  std::vector<LayerT<S>> layers;
  Mat<S> lnf_g, lnf_b;  // 1 x d_model
  Mat<S> unembed;       // d_model x vocab

  explicit WeightsT(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    const int d = cfg.d_model, dh = cfg.d_head();
    wte = Mat<S>(cfg.vocab_size, d);
    wpe = Mat<S>(cfg.max_seq_len, d);
    layers.resize(cfg.n_layers);
    for (auto& L : layers) {
      L.ln1_g = Mat<S>(1, d);
      L.ln1_b = Mat<S>(1, d);
      L.heads.resize(cfg.n_heads);
      for (auto& h : L.heads) {
        h.wq = Mat<S>(d, dh);
        h.wk = Mat<S>(d, dh);
        h.wv = Mat<S>(d, dh);
        h.wo = Mat<S>(dh, d);
      }
      L.ln2_g = Mat<S>(1, d);
      L.ln2_b = Mat<S>(1, d);
      L.ffn_k = Mat<S>(cfg.d_ffn, d);
      L.ffn_v = Mat<S>(cfg.d_ffn, d);
    }
    lnf_g = Mat<S>(1, d);
    lnf_b = Mat<S>(1, d);
    unembed = Mat<S>(d, cfg.vocab_size);
  }

  // Visits every tensor in a fixed order. Serialization, gradient buffers and
  // the optimizer all rely on this order being stable.
  template <typename F>
  void for_each_tensor(F&& f) {
    f("wte", wte);
    f("wpe", wpe);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "ln1.g", L.ln1_g);
      f(p + "ln1.b", L.ln1_b);
      for (int h = 0; h < cfg.n_heads; ++h) {
        const std::string hp = p + "head." + std::to_string(h) + ".";
        f(hp + "wq", L.heads[h].wq);
        f(hp + "wk", L.heads[h].wk);
        f(hp + "wv", L.heads[h].wv);
        f(hp + "wo", L.heads[h].wo);
      }
      f(p + "ln2.g", L.ln2_g);
      f(p + "ln2.b", L.ln2_b);
      f(p + "ffn.k", L.ffn_k);
      f(p + "ffn.v", L.ffn_v);
    }
    f("lnf.g", lnf_g);
    f("lnf.b", lnf_b);
    f("unembed", unembed);
  }

  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<WeightsT*>(this)->for_each_tensor(
        [&](const std::string& n, Mat<S>& m) { f(n, static_cast<const Mat<S>&>(m)); });
  }

  size_t param_count() const {
    size_t n = 0;
    for_each_tensor([&](const std::string&, const Mat<S>& m) { n += m.size(); });
    return n;
  }

  void zero() {
    for_each_tensor([](const std::string&, Mat<S>& m) { m.fill(S(0)); });
  }
};

using Weights = WeightsT<float>;

// Gaussian init, std 0.02, except layernorm gains (1) and biases (0). One RNG
// stream consumed in for_each_tensor order keeps the result seed-reproducible.
template <typename S>
WeightsT<S> init_weights(const ModelConfig& cfg) {
  WeightsT<S> w(cfg);
  Rng rng(Rng::mix(cfg.rng_seed, 0xC0DEull));
  w.for_each_tensor([&](const std::string& name, Mat<S>& m) {
    bool gain = name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    bool bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (gain) {
      m.fill(S(1));
    } else if (bias) {
      m.fill(S(0));
    } else {
      for (auto& v : m.a) v = static_cast<S>(0.02 * rng.next_normal());
    }
  });
  return w;
}

template <typename To, typename From>
WeightsT<To> cast_weights(const WeightsT<From>& src) {
  WeightsT<To> dst(src.cfg);
  std::vector<const Mat<From>*> in;
  src.for_each_tensor([&](const std::string&, const Mat<From>& m) { in.push_back(&m); });
  size_t i = 0;
  dst.for_each_tensor([&](const std::string&, Mat<To>& m) {
    const Mat<From>& s = *in[i++];
    for (size_t k = 0; k < m.a.size(); ++k) m.a[k] = static_cast<To>(s.a[k]);
  });
  return dst;
}

// File layout: u64 little-endian header length, a JSON header mapping tensor
// name -> {dtype, shape, offset}, then raw little-endian row-major f32 data.
// The header also carries the model config under "__config__".
inline void save_weights(const Weights& w, const std::string& path) {
  nlohmann::ordered_json header;
  uint64_t offset = 0;
  w.for_each_tensor([&](const std::string& name, const Mat<float>& m) {
    header[name] = {{"dtype", "f32"},
                    {"shape", {m.rows, m.cols}},
                    {"offset", offset}};
    offset += m.size() * sizeof(float);
  });
  header["__config__"] = to_json(w.cfg);
  const std::string hs = header.dump();
  const uint64_t hlen = hs.size();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  w.for_each_tensor([&](const std::string&, const Mat<float>& m) {
    f.write(reinterpret_cast<const char*>(m.a.data()),
            static_cast<std::streamsize>(m.a.size() * sizeof(float)));
  });
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Weights load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!f || hlen == 0 || hlen > (64ull << 20))
    throw std::runtime_error("corrupt weights header: " + path);
  std::string hs(hlen, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error("truncated weights header: " + path);
  nlohmann::json header = nlohmann::json::parse(hs);
  ModelConfig cfg = config_from_json(header.at("__config__"));

  Weights w(cfg);
  const std::streampos data_start = f.tellg();
  w.for_each_tensor([&](const std::string& name, Mat<float>& m) {
    const auto& e = header.at(name);
    if (e.at("dtype").get<std::string>() != "f32")
      throw std::runtime_error("unsupported dtype for tensor " + name);
    const auto shape = e.at("shape").get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] != m.rows || shape[1] != m.cols)
      throw std::runtime_error("shape mismatch for tensor " + name);
    const uint64_t off = e.at("offset").get<uint64_t>();
    f.seekg(data_start + static_cast<std::streamoff>(off));
    f.read(reinterpret_cast<char*>(m.a.data()),
           static_cast<std::streamsize>(m.a.size() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated tensor data: " + name);
  });
  return w;
}

}  // namespace raglens
