#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace raglens {

// One RAG datum: query, retrieved context, response, and a hallucination
// label (1 = parametric override, 0 = context-following). Token spans over
// the concatenated sequence are recovered from the stored part lengths.
struct Sample {
  std::string id;
  std::vector<int> query;
  std::vector<int> context;
  std::vector<int> response;
  int label = 0;
  std::string provenance = "synthetic";

  std::vector<int> full() const {
    std::vector<int> t;
    t.reserve(query.size() + context.size() + response.size());
    t.insert(t.end(), query.begin(), query.end());
    t.insert(t.end(), context.begin(), context.end());
    t.insert(t.end(), response.begin(), response.end());
    return t;
  }
  int context_begin() const { return static_cast<int>(query.size()); }
  int context_end() const { return static_cast<int>(query.size() + context.size()); }
  int response_begin() const { return context_end(); }
  int response_end() const {
    return static_cast<int>(query.size() + context.size() + response.size());
  }

  void validate() const {
    if (query.empty() || context.empty() || response.empty())
      throw std::invalid_argument("sample " + id + ": empty part");
    if (label != 0 && label != 1)
      throw std::invalid_argument("sample " + id + ": label must be 0 or 1");
  }
};

inline nlohmann::ordered_json sample_to_json(const Sample& s) {
  return nlohmann::ordered_json{{"id", s.id},
                                {"query_tokens", s.query},
                                {"context_tokens", s.context},
                                {"response_tokens", s.response},
                                {"label", s.label},
                                {"provenance", s.provenance}};
}

inline Sample sample_from_json(const nlohmann::json& j, int line_no = -1) {
  const auto where = [&](const std::string& field) {
    std::string msg = "sample missing field \"" + field + "\"";
    if (line_no >= 1) msg += " at line " + std::to_string(line_no);
    return msg;
  };
  Sample s;
  for (const char* f : {"id", "query_tokens", "context_tokens", "response_tokens",
                        "label", "provenance"})
    if (!j.contains(f)) throw std::runtime_error(where(f));
  s.id = j.at("id").get<std::string>();
  s.query = j.at("query_tokens").get<std::vector<int>>();
  s.context = j.at("context_tokens").get<std::vector<int>>();
  s.response = j.at("response_tokens").get<std::vector<int>>();
  s.label = j.at("label").get<int>();
  s.provenance = j.at("provenance").get<std::string>();
  s.validate();
  return s;
}

// JSON-lines persistence: one sample object per line.
inline void save_samples(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& s : samples) f << sample_to_json(s).dump() << "\n";
}

inline std::vector<Sample> load_samples(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  std::vector<Sample> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("malformed sample at line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    out.push_back(sample_from_json(j, line_no));
  }
  return out;
}

// Label-partitioned id sets for analysis splits.
struct DatasetSplit {
  std::vector<std::string> truthful;      // label 0
  std::vector<std::string> hallucinated;  // label 1
};

inline DatasetSplit split_by_label(const std::vector<Sample>& samples) {
  DatasetSplit sp;
  for (const auto& s : samples)
    (s.label == 1 ? sp.hallucinated : sp.truthful).push_back(s.id);
  return sp;
}

}  // namespace raglens
