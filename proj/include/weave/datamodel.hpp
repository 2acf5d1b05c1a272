// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace weave {

// H x W x 3 pixel tensor in [0,1] with an optional binary region mask.
// An absent mask means all-ones.
struct ImageRecord {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;          // H*W*3, row-major, RGB
  std::vector<float> mask;            // H*W in {0,1}; empty = all ones
  std::optional<float> similarity_score;  // image-text similarity in [-1,1]

  bool has_mask() const { return !mask.empty(); }
  float pixel(int y, int x, int c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

struct TextSpan {
  std::string text;
};

using DocElement = std::variant<TextSpan, ImageRecord>;

// Ordered mixture of text spans and images; the unit of training data.
struct InterleavedDocument {
  std::string doc_id;
  std::vector<DocElement> elements;

  int image_count() const;
};

struct SpecialTokens {
  int soi_id = 2;   // <SOI>: start-of-image control token
  int img_id = 3;   // <IMG>: per-visual-token placeholder
  int eos_id = 1;
  int pad_id = 0;
};

// Throws std::invalid_argument naming the first violated invariant;
// returns its argument untouched otherwise. Idempotent.
const InterleavedDocument& validate_document(const InterleavedDocument& doc);
void validate_image(const ImageRecord& img);
void validate_special_tokens(const SpecialTokens& st);

// Line-delimited document file; pixel/mask tensors go out-of-line into
// "<stem>_tensors/" next to the file, referenced by relative path + FNV-1a
// content hash. Returns the number of records written.
size_t serialize_docs(const std::vector<InterleavedDocument>& docs,
                      const std::filesystem::path& path);
std::vector<InterleavedDocument> deserialize_docs(
    const std::filesystem::path& path);

// Raw float tensor container (magic "WTEN", dims, float32 payload).
void write_tensor_file(const std::filesystem::path& path,
                       const std::vector<int>& shape,
                       const std::vector<float>& data);
void read_tensor_file(const std::filesystem::path& path,
                      std::vector<int>& shape, std::vector<float>& data);
uint64_t fnv1a_file(const std::filesystem::path& path);

// Lossless 8-bit image dump for eyeballing results.
void write_ppm(const std::filesystem::path& path, const ImageRecord& img);

bool images_equal(const ImageRecord& a, const ImageRecord& b);
bool documents_equal(const InterleavedDocument& a,
                     const InterleavedDocument& b);

}  // namespace weave
