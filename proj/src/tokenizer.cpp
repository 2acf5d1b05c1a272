// SPDX-License-Identifier: Apache-2.0
#include "weave/tokenizer.hpp"

#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

namespace weave {

using nlohmann::json;

static std::vector<std::string> split_ws(const std::string& text) {
  std::istringstream s(text);
  std::vector<std::string> out;
  std::string w;
  while (s >> w) out.push_back(w);
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus) {
  Tokenizer t;
  std::set<std::string> vocab;  // sorted: build order independent of corpus order
  for (const auto& text : corpus)
    for (auto& w : split_ws(text)) vocab.insert(w);
  for (const auto& w : vocab) {
    t.word_to_id_.emplace(w, kWordBase + static_cast<int>(t.words_.size()));
    t.words_.push_back(w);
  }
  return t;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : split_ws(text)) {
    auto it = word_to_id_.find(w);
    if (it != word_to_id_.end()) {
      ids.push_back(it->second);
    } else {
      for (unsigned char c : w) ids.push_back(kByteBase + c);
    }
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  bool in_bytes = false;
  for (int id : ids) {
    if (id >= kWordBase) {
      int w = id - kWordBase;
      if (w >= static_cast<int>(words_.size())) continue;
      if (!out.empty()) out += ' ';
      out += words_[w];
      in_bytes = false;
    } else if (id >= kByteBase) {
      if (!in_bytes && !out.empty()) out += ' ';
      out += static_cast<char>(id - kByteBase);
      in_bytes = true;
    }  // special tokens render as nothing
  }
  return out;
}

json Tokenizer::to_json() const { return json{{"words", words_}}; }

Tokenizer Tokenizer::from_json(const json& j) {
  Tokenizer t;
  t.words_ = j.at("words").get<std::vector<std::string>>();
  for (size_t i = 0; i < t.words_.size(); ++i)
    t.word_to_id_.emplace(t.words_[i], kWordBase + static_cast<int>(i));
  return t;
}

}  // namespace weave
