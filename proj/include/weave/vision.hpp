// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <vector>

#include "weave/datamodel.hpp"
#include "weave/nn/blocks.hpp"

namespace weave {

struct VisionConfig {
  int dim = 128;     // channel dim C, shared with the language decoder
  int stride = 16;   // total spatial downsampling, power of two
  int depth = 2;     // resampler cross-attention blocks
  int heads = 4;
  int m_llm = 8;     // query count, llm-side resampler
  int m_enc = 8;     // query count, encoder-side resampler
};

struct ImageEmbedding {
  nn::Tensor tokens;  // {N, C}
  int grid_h = 0;
  int grid_w = 0;
};

// Strided conv stack standing in for a pretrained vision foundation model.
// Produces (H/stride)*(W/stride) tokens of width dim.
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const VisionConfig& cfg, std::mt19937_64& rng);

  ImageEmbedding apply(const nn::Tensor& chw) const;  // {3, H, W}
  ImageEmbedding encode(const ImageRecord& img) const;

  void register_params(nn::ParamList& out, nn::ParamGroup group);

 private:
  std::vector<nn::Tensor> conv_w_, conv_b_;
  std::vector<int> channels_;
  nn::LayerNorm out_norm_;
  int stride_ = 16;
};

nn::Tensor image_to_tensor(const ImageRecord& img, bool requires_grad = false);

// Fig.-3-style region extraction: area-average the mask onto the token grid,
// binarize at 0.5, multiply tokens by their cell value. All-ones mask is the
// identity.
ImageEmbedding mask_aware_extract(const ImageEmbedding& e,
                                  const std::vector<float>& mask, int mask_h,
                                  int mask_w);

// Learned-query cross-attention resampler: any {N, C} to a fixed {M, C}.
class Resampler {
 public:
  Resampler() = default;
  Resampler(int dim, int queries, int depth, int heads, std::mt19937_64& rng);

  nn::Tensor apply(const nn::Tensor& tokens) const;
  int query_count() const { return queries_.defined() ? queries_.dim(0) : 0; }

  void register_params(nn::ParamList& out, const std::string& prefix,
                       nn::ParamGroup group);

 private:
  nn::Tensor queries_;  // {M, C}
  std::vector<nn::CrossBlock> blocks_;
  nn::LayerNorm out_norm_;
};

enum class ResamplerSide { LlmSide, EncoderSide };

// Encoder plus the two independently parameterized resampler connectors.
struct VisionModule {
  VisionConfig cfg;
  ImageEncoder encoder;
  Resampler resampler_llm;  // feeds D_LLM inputs and the NIP condition
  Resampler resampler_enc;  // feeds the CSR condition

  VisionModule() = default;
  VisionModule(const VisionConfig& cfg, std::mt19937_64& rng);

  nn::Tensor resample(const nn::Tensor& tokens, ResamplerSide side) const;
  void register_params(nn::ParamList& out);
};

}  // namespace weave
