// SPDX-License-Identifier: Apache-2.0
#include "weave/model.hpp"

#include <nlohmann/json.hpp>

#include "weave/core/rng.hpp"

namespace weave {

using nlohmann::json;
using nn::Tensor;

json ModelConfig::to_json() const {
  return json{{"dim", dim},
              {"lm_layers", lm_layers},
              {"lm_heads", lm_heads},
              {"max_len", max_len},
              {"tied_head", tied_head},
              {"enc_stride", enc_stride},
              {"resampler_depth", resampler_depth},
              {"resampler_heads", resampler_heads},
              {"m_llm", m_llm},
              {"m_enc", m_enc},
              {"dm_timesteps", dm_timesteps},
              {"dm_base_channels", dm_base_channels},
              {"dm_null_tokens", dm_null_tokens},
              {"dm_beta_start", dm_beta_start},
              {"dm_beta_end", dm_beta_end},
              {"guidance_scale", guidance_scale},
              {"resolution", resolution}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.dim = j.at("dim");
  c.lm_layers = j.at("lm_layers");
  c.lm_heads = j.at("lm_heads");
  c.max_len = j.at("max_len");
  c.tied_head = j.at("tied_head");
  c.enc_stride = j.at("enc_stride");
  c.resampler_depth = j.at("resampler_depth");
  c.resampler_heads = j.at("resampler_heads");
  c.m_llm = j.at("m_llm");
  c.m_enc = j.at("m_enc");
  c.dm_timesteps = j.at("dm_timesteps");
  c.dm_base_channels = j.at("dm_base_channels");
  c.dm_null_tokens = j.at("dm_null_tokens");
  c.dm_beta_start = j.at("dm_beta_start");
  c.dm_beta_end = j.at("dm_beta_end");
  c.guidance_scale = j.at("guidance_scale");
  c.resolution = j.at("resolution");
  return c;
}

uint64_t ModelConfig::hash() const {
  std::string s = to_json().dump();
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

static VisionConfig vision_config(const ModelConfig& c) {
  VisionConfig v;
  v.dim = c.dim;
  v.stride = c.enc_stride;
  v.depth = c.resampler_depth;
  v.heads = c.resampler_heads;
  v.m_llm = c.m_llm;
  v.m_enc = c.m_enc;
  return v;
}

static DiffusionConfig diffusion_config(const ModelConfig& c) {
  DiffusionConfig d;
  d.timesteps = c.dm_timesteps;
  d.base_channels = c.dm_base_channels;
  d.cond_dim = c.dim;
  d.heads = c.resampler_heads;
  d.null_tokens = c.dm_null_tokens;
  d.beta_start = c.dm_beta_start;
  d.beta_end = c.dm_beta_end;
  d.guidance_scale = c.guidance_scale;
  return d;
}

static LmConfig lm_config(const ModelConfig& c, int vocab) {
  LmConfig l;
  l.vocab = vocab;
  l.dim = c.dim;
  l.layers = c.lm_layers;
  l.heads = c.lm_heads;
  l.max_len = c.max_len;
  l.tied_head = c.tied_head;
  return l;
}

Model::Model(const ModelConfig& cfg, Tokenizer tok, uint64_t seed)
    : cfg(cfg), tokenizer(std::move(tok)) {
  RngPool pool(seed);
  auto rv = pool.stream("init.vision");
  vision = VisionModule(vision_config(cfg), rv);
  auto rl = pool.stream("init.lm");
  lm = LanguageModel(lm_config(cfg, tokenizer.vocab_size()), rl);
  auto rd = pool.stream("init.dm");
  diffusion = DiffusionModule(diffusion_config(cfg), rd);
  vision.register_params(params);
  lm.register_params(params);
  diffusion.register_params(params);
}

ImageEmbedding Model::masked_embedding(const ImageRecord& img) const {
  ImageEmbedding e = vision.encoder.encode(img);
  if (img.has_mask())
    e = mask_aware_extract(e, img.mask, img.height, img.width);
  return e;
}

Tensor Model::image_input_tokens(const ImageRecord& img) const {
  return vision.resample(masked_embedding(img).tokens, ResamplerSide::LlmSide);
}

DiffusionCondition Model::encoder_condition(const ImageRecord& img) const {
  DiffusionCondition c;
  c.tokens = vision.resample(masked_embedding(img).tokens,
                             ResamplerSide::EncoderSide);
  c.source = DiffusionCondition::Source::EncoderTokens;
  return c;
}

DiffusionCondition Model::llm_condition(const Tensor& states,
                                        int last_pos) const {
  DiffusionCondition c;
  c.tokens = vision.resample(nn::slice_rows(states, 0, last_pos + 1),
                             ResamplerSide::LlmSide);
  c.source = DiffusionCondition::Source::LlmContext;
  return c;
}

std::vector<Tensor> Model::image_inputs(const PackedSequence& seq) const {
  std::vector<Tensor> out;
  out.reserve(seq.image_entries.size());
  for (const auto& entry : seq.image_entries)
    out.push_back(image_input_tokens(entry.image));
  return out;
}

}  // namespace weave
