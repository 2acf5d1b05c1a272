// SPDX-License-Identifier: Apache-2.0
#include "weave/sequence.hpp"

#include <algorithm>
#include <stdexcept>

#include "weave/core/rng.hpp"

namespace weave {

std::optional<InterleavedDocument> filter_interleaved(
    const InterleavedDocument& doc, std::mt19937_64& rng) {
  validate_document(doc);
  // Score-rank image occurrences, keep the 6 best above threshold.
  std::vector<std::pair<float, int>> scored;  // (score, element index)
  for (size_t i = 0; i < doc.elements.size(); ++i) {
    if (const auto* img = std::get_if<ImageRecord>(&doc.elements[i])) {
      if (!img->similarity_score)
        throw std::invalid_argument(
            "interleaved-corpus image missing similarity_score");
      if (*img->similarity_score >= kSimilarityThreshold)
        scored.push_back({*img->similarity_score, static_cast<int>(i)});
    }
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  if (static_cast<int>(scored.size()) > kMaxImagesPerDoc)
    scored.resize(kMaxImagesPerDoc);
  std::vector<bool> keep(doc.elements.size(), false);
  for (const auto& [score, idx] : scored) keep[idx] = true;

  int n_images = static_cast<int>(scored.size());
  if (n_images == 0) return std::nullopt;
  if (n_images == 1 && rand_uniform(rng) < 0.5f) return std::nullopt;

  InterleavedDocument out;
  out.doc_id = doc.doc_id;
  for (size_t i = 0; i < doc.elements.size(); ++i) {
    if (std::holds_alternative<TextSpan>(doc.elements[i]) || keep[i])
      out.elements.push_back(doc.elements[i]);
  }
  return out;
}

bool caption_long_enough(const std::string& caption) {
  return static_cast<int>(caption.size()) >= kMinCaptionChars;
}

InterleavedDocument pair_to_document(const std::string& caption,
                                     const ImageRecord& image,
                                     std::mt19937_64& rng) {
  if (caption.empty()) throw std::invalid_argument("empty caption");
  InterleavedDocument doc;
  if (rand_uniform(rng) < 0.5f) {
    doc.elements = {image, TextSpan{caption}};
  } else {
    doc.elements = {TextSpan{caption}, image};
  }
  return doc;
}

PackedSequence assemble(const InterleavedDocument& doc,
                        const Tokenizer& tokenizer, int m_llm) {
  validate_document(doc);
  const SpecialTokens& st = tokenizer.special();
  PackedSequence seq;
  for (const auto& e : doc.elements) {
    if (const auto* t = std::get_if<TextSpan>(&e)) {
      for (int id : tokenizer.encode(t->text)) {
        seq.token_ids.push_back(id);
        seq.ntp_mask.push_back(1);
      }
    } else {
      const auto& img = std::get<ImageRecord>(e);
      int soi_pos = static_cast<int>(seq.token_ids.size());
      seq.token_ids.push_back(st.soi_id);
      seq.ntp_mask.push_back(1);  // <SOI> is supervised like ordinary text
      for (int k = 0; k < m_llm; ++k) {
        seq.token_ids.push_back(st.img_id);
        seq.ntp_mask.push_back(0);
      }
      seq.embedding_slots.push_back(
          {soi_pos + 1, static_cast<int>(seq.image_entries.size())});
      ImageEntry entry;
      entry.image = img;
      entry.is_first_in_sequence = (soi_pos == 0);
      seq.image_entries.push_back(std::move(entry));
    }
  }
  return seq;
}

std::vector<PackedSequence> pack(const std::vector<PackedSequence>& fragments,
                                 int max_len) {
  std::vector<PackedSequence> out;
  PackedSequence cur;
  auto flush = [&] {
    if (!cur.token_ids.empty()) {
      out.push_back(std::move(cur));
      cur = PackedSequence{};
    }
  };
  for (const auto& frag : fragments) {
    if (static_cast<int>(frag.length()) > max_len)
      throw std::invalid_argument("fragment longer than max context length");
    if (static_cast<int>(cur.length() + frag.length()) > max_len) flush();
    int base = static_cast<int>(cur.length());
    int img_base = static_cast<int>(cur.image_entries.size());
    cur.token_ids.insert(cur.token_ids.end(), frag.token_ids.begin(),
                         frag.token_ids.end());
    cur.ntp_mask.insert(cur.ntp_mask.end(), frag.ntp_mask.begin(),
                        frag.ntp_mask.end());
    for (const auto& [pos, idx] : frag.embedding_slots)
      cur.embedding_slots.push_back({base + pos, img_base + idx});
    for (const auto& entry : frag.image_entries)
      cur.image_entries.push_back(entry);
  }
  flush();
  // An image is first-in-sequence iff its <SOI> sits at absolute position 0.
  for (auto& seq : out)
    for (auto& [pos, idx] : seq.embedding_slots)
      seq.image_entries[idx].is_first_in_sequence = (pos == 1);
  return out;
}

PackedSequence mark_condition_dropout(PackedSequence seq, float p,
                                      std::mt19937_64& rng) {
  for (auto& entry : seq.image_entries) {
    entry.condition_dropped =
        !entry.is_first_in_sequence && rand_uniform(rng) < p;
  }
  return seq;
}

}  // namespace weave
