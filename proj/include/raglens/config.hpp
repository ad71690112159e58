#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace raglens {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_ffn = 256;
  int vocab_size = 64;
  int max_seq_len = 256;
  float ln_eps = 1e-5f;
  uint64_t rng_seed = 0;

  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ffn < 1 || max_seq_len < 1)
      throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
    if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    if (!(ln_eps > 0)) throw std::invalid_argument("ModelConfig: ln_eps must be positive");
  }
};

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return nlohmann::ordered_json{
      {"n_layers", c.n_layers},   {"n_heads", c.n_heads},
      {"d_model", c.d_model},     {"d_ffn", c.d_ffn},
      {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
      {"ln_eps", c.ln_eps},       {"rng_seed", c.rng_seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.ln_eps = j.at("ln_eps").get<float>();
  c.rng_seed = j.at("rng_seed").get<uint64_t>();
  c.validate();
  return c;
}

inline void save_config(const ModelConfig& c, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << to_json(c).dump(2) << "\n";
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  f >> j;
  return config_from_json(j);
}

}  // namespace raglens
