// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>
#include <unordered_map>
#include <vector>

#include "weave/datamodel.hpp"

namespace weave {

// Whitespace tokenizer with byte fallback. Vocabulary layout:
//   [0..3]    special tokens (pad, eos, <SOI>, <IMG>)
//   [4..259]  raw bytes
//   [260..)   words
class Tokenizer {
 public:
  static constexpr int kByteBase = 4;
  static constexpr int kWordBase = kByteBase + 256;

  Tokenizer() = default;
  static Tokenizer build(const std::vector<std::string>& corpus);

  int vocab_size() const { return kWordBase + static_cast<int>(words_.size()); }
  const SpecialTokens& special() const { return special_; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

 private:
  SpecialTokens special_;
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> word_to_id_;
};

}  // namespace weave
