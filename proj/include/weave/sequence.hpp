// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <random>
#include <vector>

#include "weave/datamodel.hpp"
#include "weave/tokenizer.hpp"

namespace weave {

struct ImageEntry {
  ImageRecord image;
  bool is_first_in_sequence = false;  // first-in-sequence images get no NIP loss
  bool condition_dropped = false;     // CFG dropout flag
};

// Token ids + embedding slots + loss masks; the unit fed to the decoder.
// Each image occupies one <SOI> token followed by m_llm <IMG> placeholders;
// embedding_slots[i] = (position of the first <IMG> of image i, i).
struct PackedSequence {
  std::vector<int> token_ids;
  std::vector<std::pair<int, int>> embedding_slots;
  std::vector<uint8_t> ntp_mask;  // 0 on <IMG> placeholders and padding
  std::vector<ImageEntry> image_entries;

  size_t length() const { return token_ids.size(); }
};

inline constexpr int kDefaultMaxContext = 2048;
inline constexpr float kSimilarityThreshold = 0.24f;
inline constexpr int kMaxImagesPerDoc = 6;
inline constexpr int kMinCaptionChars = 10;

// Interleaved-corpus filtering: drop images scored below 0.24, keep at most
// the 6 best-scoring images, always drop 0-image docs, drop half of 1-image
// docs. Returns nothing when the document is discarded.
std::optional<InterleavedDocument> filter_interleaved(
    const InterleavedDocument& doc, std::mt19937_64& rng);

// Caption too short (< kMinCaptionChars characters) => filtered out upstream.
bool caption_long_enough(const std::string& caption);

// Image inserted before or after its caption with equal probability.
InterleavedDocument pair_to_document(const std::string& caption,
                                     const ImageRecord& image,
                                     std::mt19937_64& rng);

// Tokenize a document into one sequence fragment.
PackedSequence assemble(const InterleavedDocument& doc,
                        const Tokenizer& tokenizer, int m_llm);

// Greedy in-order concatenation up to max_len; fragments are never split or
// reordered. First-image flags are recomputed per packed output.
std::vector<PackedSequence> pack(const std::vector<PackedSequence>& fragments,
                                 int max_len = kDefaultMaxContext);

// Marks condition_dropped on non-first images independently with prob p.
PackedSequence mark_condition_dropout(PackedSequence seq, float p,
                                      std::mt19937_64& rng);

}  // namespace weave
