// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json_fwd.hpp>

#include "weave/diffusion.hpp"
#include "weave/lm.hpp"
#include "weave/vision.hpp"

namespace weave {

// One knob set for the whole stack; dim is shared by encoder, resamplers,
// decoder and the diffusion condition.
struct ModelConfig {
  int dim = 128;
  int lm_layers = 4;
  int lm_heads = 4;
  int max_len = kDefaultMaxContext;
  bool tied_head = false;

  int enc_stride = 16;
  int resampler_depth = 2;
  int resampler_heads = 4;
  int m_llm = 8;
  int m_enc = 8;

  int dm_timesteps = 100;
  int dm_base_channels = 32;
  int dm_null_tokens = 4;
  float dm_beta_start = 1e-4f;
  float dm_beta_end = 2e-2f;
  float guidance_scale = 3.0f;

  int resolution = 32;  // training/sampling image extent

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  // Stable content hash over the serialized config, for checkpoint manifests.
  uint64_t hash() const;
};

struct Model {
  ModelConfig cfg;
  Tokenizer tokenizer;
  VisionModule vision;
  LanguageModel lm;
  DiffusionModule diffusion;
  nn::ParamList params;

  Model(const ModelConfig& cfg, Tokenizer tokenizer, uint64_t seed);

  // E_M(E_V(x), M) -> llm-side resampler: the <IMG> run content for x.
  nn::Tensor image_input_tokens(const ImageRecord& img) const;
  ImageEmbedding masked_embedding(const ImageRecord& img) const;

  // CSR condition: the image's own tokens through the encoder-side resampler.
  DiffusionCondition encoder_condition(const ImageRecord& img) const;
  // NIP / generation condition: resampled decoder states over [0, last_pos].
  DiffusionCondition llm_condition(const nn::Tensor& states, int last_pos) const;

  std::vector<nn::Tensor> image_inputs(const PackedSequence& seq) const;
};

}  // namespace weave
