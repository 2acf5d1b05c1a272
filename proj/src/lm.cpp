// SPDX-License-Identifier: Apache-2.0
#include "weave/lm.hpp"

#include <numeric>
#include <stdexcept>

namespace weave {

using nn::Tensor;

LanguageModel::LanguageModel(const LmConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      word_emb_(nn::make_param({cfg.vocab, cfg.dim}, rng)),
      pos_emb_(nn::make_param({cfg.max_len, cfg.dim}, rng)),
      final_norm_(cfg.dim) {
  for (int l = 0; l < cfg.layers; ++l) blocks_.emplace_back(cfg.dim, cfg.heads, rng);
  if (!cfg.tied_head) head_ = nn::Linear(cfg.dim, cfg.vocab, rng);
}

Tensor LanguageModel::embed_sequence(
    const PackedSequence& seq, const std::vector<Tensor>& image_embeddings) const {
  if (image_embeddings.size() != seq.embedding_slots.size())
    throw std::invalid_argument("slot/embedding count mismatch");
  const int k = static_cast<int>(seq.length());
  if (k > cfg_.max_len)
    throw std::invalid_argument("sequence exceeds max context length");
  std::vector<Tensor> parts;
  int pos = 0;
  size_t slot = 0;
  while (pos < k) {
    if (slot < seq.embedding_slots.size() &&
        seq.embedding_slots[slot].first == pos) {
      const Tensor& img = image_embeddings[seq.embedding_slots[slot].second];
      parts.push_back(img);
      pos += img.dim(0);
      ++slot;
    } else {
      int end = pos;
      while (end < k && (slot >= seq.embedding_slots.size() ||
                         end < seq.embedding_slots[slot].first))
        ++end;
      parts.push_back(nn::gather_rows(
          word_emb_, std::vector<int>(seq.token_ids.begin() + pos,
                                      seq.token_ids.begin() + end)));
      pos = end;
    }
  }
  Tensor e = parts.size() == 1 ? parts[0] : nn::concat_rows(parts);
  if (e.dim(0) != k)
    throw std::invalid_argument("embedding slot layout inconsistent");
  std::vector<int> iota(k);
  std::iota(iota.begin(), iota.end(), 0);
  return nn::add(e, nn::gather_rows(pos_emb_, iota));
}

Tensor LanguageModel::decode(const Tensor& embeddings) const {
  Tensor x = embeddings;
  for (const auto& blk : blocks_) x = blk.apply(x, /*causal=*/true);
  return final_norm_.apply(x);
}

Tensor LanguageModel::logits(const Tensor& states) const {
  if (cfg_.tied_head) return nn::matmul_nt(states, word_emb_);
  return head_.apply(states);
}

Tensor LanguageModel::ntp_loss(const Tensor& states,
                               const std::vector<int>& token_ids,
                               const std::vector<uint8_t>& ntp_mask,
                               int* starved_batches) const {
  const int k = states.dim(0);
  if (static_cast<int>(token_ids.size()) != k ||
      static_cast<int>(ntp_mask.size()) != k)
    throw std::invalid_argument("ntp_loss: shape mismatch");
  if (k < 2) {
    if (starved_batches) ++*starved_batches;
    return Tensor::scalar(0.0f);
  }
  Tensor pred = nn::slice_rows(states, 0, k - 1);
  std::vector<int> targets(token_ids.begin() + 1, token_ids.end());
  std::vector<uint8_t> mask(ntp_mask.begin() + 1, ntp_mask.end());
  return nn::cross_entropy(logits(pred), targets, mask, starved_batches);
}

void LanguageModel::register_params(nn::ParamList& out) {
  out.push_back({word_emb_, "lm.word_emb", nn::ParamGroup::LLM});
  out.push_back({pos_emb_, "lm.pos_emb", nn::ParamGroup::LLM});
  for (size_t l = 0; l < blocks_.size(); ++l)
    blocks_[l].register_params(out, "lm.block" + std::to_string(l),
                               nn::ParamGroup::LLM);
  final_norm_.register_params(out, "lm.final_norm", nn::ParamGroup::LLM);
  if (!cfg_.tied_head) head_.register_params(out, "lm.head", nn::ParamGroup::LLM);
}

}  // namespace weave
