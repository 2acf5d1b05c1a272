// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <vector>

#include "weave/nn/blocks.hpp"
#include "weave/sequence.hpp"

namespace weave {

struct LmConfig {
  int vocab = 0;
  int dim = 128;
  int layers = 4;
  int heads = 4;
  int max_len = kDefaultMaxContext;
  bool tied_head = false;
};

// Toy causal decoder over mixed text/image-token sequences.
class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(const LmConfig& cfg, std::mt19937_64& rng);

  const LmConfig& config() const { return cfg_; }

  // Word embeddings everywhere except <IMG> runs, which are overwritten by
  // the resampled image tokens, in document order. Adds learned positions.
  nn::Tensor embed_sequence(const PackedSequence& seq,
                            const std::vector<nn::Tensor>& image_embeddings) const;

  nn::Tensor decode(const nn::Tensor& embeddings) const;  // {K,C} -> {K,C}
  nn::Tensor logits(const nn::Tensor& states) const;      // {K,C} -> {K,V}

  // Mean NLL of token_ids[i] under the head applied to states[i-1], over
  // positions with ntp_mask[i] = 1. Zero-mask inputs return 0 and bump the
  // starved counter.
  nn::Tensor ntp_loss(const nn::Tensor& states, const std::vector<int>& token_ids,
                      const std::vector<uint8_t>& ntp_mask,
                      int* starved_batches = nullptr) const;

  void register_params(nn::ParamList& out);

 private:
  LmConfig cfg_;
  nn::Tensor word_emb_;  // {V, C}
  nn::Tensor pos_emb_;   // {max_len, C}
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm final_norm_;
  nn::Linear head_;      // unused when tied_head
};

}  // namespace weave
