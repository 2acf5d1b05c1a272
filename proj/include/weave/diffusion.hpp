// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <vector>

#include "weave/datamodel.hpp"
#include "weave/nn/blocks.hpp"

namespace weave {

struct NoiseSchedule {
  int steps = 0;                 // T
  std::vector<float> beta;       // T entries, each in (0,1)
  std::vector<float> alpha_bar;  // strictly decreasing, alpha_bar[0] near 1

  static NoiseSchedule linear(int steps, float beta_start = 1e-4f,
                              float beta_end = 2e-2f);
  void validate() const;
};

struct DiffusionConfig {
  int timesteps = 100;
  float beta_start = 1e-4f;
  float beta_end = 2e-2f;
  int base_channels = 32;   // bottleneck uses 2x
  int cond_dim = 128;       // matches the model channel dim C
  int heads = 4;
  int null_tokens = 4;      // learned null-condition token count
  float guidance_scale = 3.0f;
};

struct DiffusionCondition {
  enum class Source { LlmContext, EncoderTokens, Null };
  nn::Tensor tokens;  // {M, cond_dim}; undefined for Null
  Source source = Source::Null;
};

// Toy conditional epsilon-prediction net: two strided conv downs, a
// cross-attention bottleneck over the condition tokens, two nearest-up
// stages with a skip.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DiffusionConfig& cfg, std::mt19937_64& rng);

  nn::Tensor apply(const nn::Tensor& x_t, int t, int timesteps,
                   const nn::Tensor& cond_tokens) const;

  void register_params(nn::ParamList& out, nn::ParamGroup group);

 private:
  nn::Tensor time_embedding(int t, int timesteps) const;
  nn::Tensor down1_w_, down1_b_, down2_w_, down2_b_;
  nn::Tensor up1_w_, up1_b_, out_w_, out_b_;
  nn::Linear t_proj1_, t_proj2_, cond_proj_;
  nn::CrossBlock bottleneck_;
  int base_ = 32;
};

// Schedule + denoiser + learned null condition; owns Eqs. for forward
// noising, the two noise-prediction losses, guided sampling and partial
// reconstruction.
class DiffusionModule {
 public:
  DiffusionModule() = default;
  DiffusionModule(const DiffusionConfig& cfg, std::mt19937_64& rng);

  const DiffusionConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const nn::Tensor& null_condition() const { return null_cond_; }

  // x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps
  nn::Tensor add_noise(const nn::Tensor& x0, int t, const nn::Tensor& eps) const;

  nn::Tensor predict_noise(const nn::Tensor& x_t, int t,
                           const DiffusionCondition& cond) const;

  // Draws t ~ U[0,T) and eps ~ N(0,1); one shared code path for NIP and CSR.
  nn::Tensor denoise_loss(const nn::Tensor& x0, const DiffusionCondition& cond,
                          std::mt19937_64& rng) const;
  // Deterministic variant for finite-difference checks and ablation replays.
  nn::Tensor denoise_loss_at(const nn::Tensor& x0,
                             const DiffusionCondition& cond, int t,
                             const nn::Tensor& eps) const;

  nn::Tensor nip_loss(const nn::Tensor& x0, const DiffusionCondition& cond,
                      std::mt19937_64& rng) const;
  nn::Tensor csr_loss(const nn::Tensor& x0, const DiffusionCondition& cond,
                      std::mt19937_64& rng) const;

  // Ancestral sampling from pure noise over `steps` evenly spaced timesteps.
  // Guided prediction: eps_null + g (eps_cond - eps_null); g = 1 uses the
  // conditional branch directly so the identity is exact; g = 0 is
  // unconditional. Output clipped to [0,1].
  ImageRecord sample(const DiffusionCondition& cond, int steps,
                     float guidance_scale, std::mt19937_64& rng, int height,
                     int width) const;

  // Starts from add_noise(x0, floor(noise_frac*(T-1))) and denoises to 0.
  ImageRecord reconstruct_partial(const ImageRecord& x0, float noise_frac,
                                  const DiffusionCondition& cond,
                                  std::mt19937_64& rng) const;

  void register_params(nn::ParamList& out);

 private:
  ImageRecord denoise_steps(std::vector<float> x, int height, int width,
                            const std::vector<int>& ts,
                            const DiffusionCondition& cond,
                            float guidance_scale, std::mt19937_64& rng) const;
  nn::Tensor guided_eps(const nn::Tensor& x_t, int t,
                        const DiffusionCondition& cond,
                        float guidance_scale) const;

  DiffusionConfig cfg_;
  NoiseSchedule schedule_;
  Denoiser denoiser_;
  nn::Tensor null_cond_;  // learned, lives with the connectors
};

nn::Tensor gaussian_like(const std::vector<int>& shape, std::mt19937_64& rng);

}  // namespace weave
