// SPDX-License-Identifier: Apache-2.0
#include "weave/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "weave/core/rng.hpp"

namespace weave {

using nn::Tensor;

NoiseSchedule NoiseSchedule::linear(int steps, float beta_start, float beta_end) {
  NoiseSchedule s;
  s.steps = steps;
  s.beta.resize(steps);
  s.alpha_bar.resize(steps);
  double ab = 1.0;
  for (int t = 0; t < steps; ++t) {
    s.beta[t] = steps == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * t / (steps - 1);
    ab *= 1.0 - s.beta[t];
    s.alpha_bar[t] = static_cast<float>(ab);
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
  float prev = 1.0f;
  for (int t = 0; t < steps; ++t) {
    if (!(beta[t] > 0.0f && beta[t] < 1.0f))
      throw std::invalid_argument("beta out of (0,1)");
    if (!(alpha_bar[t] < prev))
      throw std::invalid_argument("alpha_bar not strictly decreasing");
    prev = alpha_bar[t];
  }
}

Tensor gaussian_like(const std::vector<int>& shape, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.data()) v = rand_normal(rng);
  return t;
}

// ------------------------------------------------------------------ denoiser

Denoiser::Denoiser(const DiffusionConfig& cfg, std::mt19937_64& rng)
    : base_(cfg.base_channels) {
  const int c1 = base_, c2 = 2 * base_;
  auto conv_init = [&](int cout, int cin, int k) {
    return nn::make_param({cout, cin * k * k}, rng,
                          1.0f / std::sqrt(static_cast<float>(cin * k * k)));
  };
  down1_w_ = conv_init(c1, 3, 3);
  down1_b_ = nn::make_const_param({c1}, 0.0f);
  down2_w_ = conv_init(c2, c1, 3);
  down2_b_ = nn::make_const_param({c2}, 0.0f);
  up1_w_ = conv_init(c1, c2, 3);
  up1_b_ = nn::make_const_param({c1}, 0.0f);
  out_w_ = conv_init(3, c1, 3);
  out_b_ = nn::make_const_param({3}, 0.0f);
  t_proj1_ = nn::Linear(16, c1, rng);
  t_proj2_ = nn::Linear(16, c2, rng);
  cond_proj_ = nn::Linear(cfg.cond_dim, c2, rng);
  bottleneck_ = nn::CrossBlock(c2, cfg.heads, rng);
}

Tensor Denoiser::time_embedding(int t, int timesteps) const {
  std::vector<float> e(16);
  const float pos = static_cast<float>(t) / static_cast<float>(timesteps);
  for (int i = 0; i < 8; ++i) {
    float freq = std::pow(100.0f, static_cast<float>(i) / 8.0f);
    e[2 * i] = std::sin(pos * freq);
    e[2 * i + 1] = std::cos(pos * freq);
  }
  return Tensor::from({1, 16}, std::move(e));
}

Tensor Denoiser::apply(const Tensor& x_t, int t, int timesteps,
                       const Tensor& cond_tokens) const {
  if (x_t.shape().size() != 3 || x_t.dim(0) != 3)
    throw std::invalid_argument("denoiser expects {3, H, W}");
  if (x_t.dim(1) % 4 != 0 || x_t.dim(2) % 4 != 0)
    throw std::invalid_argument("image extent must divide 4");
  Tensor temb = time_embedding(t, timesteps);
  Tensor tb1 = t_proj1_.apply(temb);  // {1, c1}
  Tensor tb2 = t_proj2_.apply(temb);  // {1, c2}
  Tensor d1 = nn::silu(nn::add_channel_bias(
      nn::conv2d(x_t, down1_w_, down1_b_, 3, 3, 2, 1), tb1));
  Tensor d2 = nn::silu(nn::add_channel_bias(
      nn::conv2d(d1, down2_w_, down2_b_, 3, 3, 2, 1), tb2));
  Tensor tokens = nn::chw_to_nc(d2);
  tokens = bottleneck_.apply(tokens, cond_proj_.apply(cond_tokens));
  Tensor b = nn::nc_to_chw(tokens, d2.dim(0), d2.dim(1), d2.dim(2));
  Tensor u1 = nn::silu(nn::conv2d(nn::upsample2(b), up1_w_, up1_b_, 3, 3, 1, 1));
  u1 = nn::add(u1, d1);  // skip
  return nn::conv2d(nn::upsample2(u1), out_w_, out_b_, 3, 3, 1, 1);
}

void Denoiser::register_params(nn::ParamList& out, nn::ParamGroup group) {
  out.push_back({down1_w_, "dm.down1.w", group});
  out.push_back({down1_b_, "dm.down1.b", group});
  out.push_back({down2_w_, "dm.down2.w", group});
  out.push_back({down2_b_, "dm.down2.b", group});
  out.push_back({up1_w_, "dm.up1.w", group});
  out.push_back({up1_b_, "dm.up1.b", group});
  out.push_back({out_w_, "dm.out.w", group});
  out.push_back({out_b_, "dm.out.b", group});
  t_proj1_.register_params(out, "dm.t_proj1", group);
  t_proj2_.register_params(out, "dm.t_proj2", group);
  cond_proj_.register_params(out, "dm.cond_proj", group);
  bottleneck_.register_params(out, "dm.bottleneck", group);
}

// -------------------------------------------------------------------- module

DiffusionModule::DiffusionModule(const DiffusionConfig& cfg,
                                 std::mt19937_64& rng)
    : cfg_(cfg),
      schedule_(NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)),
      denoiser_(cfg, rng),
      null_cond_(nn::make_param({cfg.null_tokens, cfg.cond_dim}, rng)) {}

Tensor DiffusionModule::add_noise(const Tensor& x0, int t,
                                  const Tensor& eps) const {
  if (t < 0 || t >= schedule_.steps)
    throw std::out_of_range("add_noise: t out of range");
  if (x0.numel() != eps.numel())
    throw std::invalid_argument("add_noise: eps shape mismatch");
  const float ab = schedule_.alpha_bar[t];
  return nn::add_scaled(nn::scale(x0, std::sqrt(ab)), eps,
                        std::sqrt(1.0f - ab));
}

Tensor DiffusionModule::predict_noise(const Tensor& x_t, int t,
                                      const DiffusionCondition& cond) const {
  const Tensor& tokens =
      cond.source == DiffusionCondition::Source::Null ? null_cond_ : cond.tokens;
  if (!tokens.defined())
    throw std::invalid_argument("predict_noise: condition tokens missing");
  return denoiser_.apply(x_t, t, schedule_.steps, tokens);
}

Tensor DiffusionModule::denoise_loss_at(const Tensor& x0,
                                        const DiffusionCondition& cond, int t,
                                        const Tensor& eps) const {
  Tensor x_t = add_noise(x0, t, eps);
  return nn::mse(eps, predict_noise(x_t, t, cond));
}

Tensor DiffusionModule::denoise_loss(const Tensor& x0,
                                     const DiffusionCondition& cond,
                                     std::mt19937_64& rng) const {
  int t = rand_int(rng, 0, schedule_.steps - 1);
  Tensor eps = gaussian_like(x0.shape(), rng);
  return denoise_loss_at(x0, cond, t, eps);
}

Tensor DiffusionModule::nip_loss(const Tensor& x0,
                                 const DiffusionCondition& cond,
                                 std::mt19937_64& rng) const {
  if (cond.source == DiffusionCondition::Source::EncoderTokens)
    throw std::invalid_argument("nip_loss: condition must be llm context or null");
  return denoise_loss(x0, cond, rng);
}

Tensor DiffusionModule::csr_loss(const Tensor& x0,
                                 const DiffusionCondition& cond,
                                 std::mt19937_64& rng) const {
  if (cond.source != DiffusionCondition::Source::EncoderTokens)
    throw std::invalid_argument("csr_loss: condition must be encoder tokens");
  return denoise_loss(x0, cond, rng);
}

Tensor DiffusionModule::guided_eps(const Tensor& x_t, int t,
                                   const DiffusionCondition& cond,
                                   float g) const {
  DiffusionCondition null_c;
  null_c.source = DiffusionCondition::Source::Null;
  if (cond.source == DiffusionCondition::Source::Null || g == 0.0f)
    return predict_noise(x_t, t, null_c);
  if (g == 1.0f) return predict_noise(x_t, t, cond);
  Tensor e_c = predict_noise(x_t, t, cond);
  Tensor e_n = predict_noise(x_t, t, null_c);
  return nn::add_scaled(e_n, nn::sub(e_c, e_n), g);
}

ImageRecord DiffusionModule::denoise_steps(std::vector<float> x, int height,
                                           int width,
                                           const std::vector<int>& ts,
                                           const DiffusionCondition& cond,
                                           float guidance_scale,
                                           std::mt19937_64& rng) const {
  // ts descending; ancestral update between consecutive retained steps.
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const float ab_t = schedule_.alpha_bar[t];
    Tensor xt = Tensor::from({3, height, width}, x);
    std::vector<float> eps = guided_eps(xt, t, cond, guidance_scale).data();
    std::vector<float> x0_hat(x.size());
    const float inv_sab = 1.0f / std::sqrt(ab_t);
    const float s1ab = std::sqrt(1.0f - ab_t);
    for (size_t j = 0; j < x.size(); ++j) {
      x0_hat[j] = std::clamp((x[j] - s1ab * eps[j]) * inv_sab, 0.0f, 1.0f);
    }
    if (i + 1 == ts.size()) {
      x = std::move(x0_hat);
      break;
    }
    const float ab_p = schedule_.alpha_bar[ts[i + 1]];
    const float var = (1.0f - ab_t / ab_p) * (1.0f - ab_p) / (1.0f - ab_t);
    const float sigma = std::sqrt(std::max(0.0f, var));
    const float dir = std::sqrt(std::max(0.0f, 1.0f - ab_p - sigma * sigma));
    const float sab_p = std::sqrt(ab_p);
    for (size_t j = 0; j < x.size(); ++j)
      x[j] = sab_p * x0_hat[j] + dir * eps[j] + sigma * rand_normal(rng);
  }
  ImageRecord out;
  out.height = height;
  out.width = width;
  out.pixels.resize(x.size());
  const int hw = height * width;
  for (int p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c)
      out.pixels[p * 3 + c] = std::clamp(x[c * hw + p], 0.0f, 1.0f);
  return out;
}

ImageRecord DiffusionModule::sample(const DiffusionCondition& cond, int steps,
                                    float guidance_scale, std::mt19937_64& rng,
                                    int height, int width) const {
  if (steps < 1 || steps > schedule_.steps)
    throw std::invalid_argument("sample: steps must be in [1, T]");
  std::vector<int> ts;
  for (int j = steps - 1; j >= 0; --j)
    ts.push_back(static_cast<int>(
        static_cast<int64_t>(j) * schedule_.steps / steps));
  std::vector<float> x(static_cast<size_t>(3) * height * width);
  for (auto& v : x) v = rand_normal(rng);
  return denoise_steps(std::move(x), height, width, ts, cond, guidance_scale,
                       rng);
}

ImageRecord DiffusionModule::reconstruct_partial(const ImageRecord& x0,
                                                 float noise_frac,
                                                 const DiffusionCondition& cond,
                                                 std::mt19937_64& rng) const {
  if (!(noise_frac > 0.0f && noise_frac <= 1.0f))
    throw std::invalid_argument("noise_frac outside (0,1]");
  const int t_star =
      static_cast<int>(std::floor(noise_frac * (schedule_.steps - 1)));
  const int hw = x0.height * x0.width;
  std::vector<float> x(static_cast<size_t>(3) * hw);
  const float sab = std::sqrt(schedule_.alpha_bar[t_star]);
  const float s1ab = std::sqrt(1.0f - schedule_.alpha_bar[t_star]);
  for (int p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c)
      x[c * hw + p] = sab * x0.pixels[p * 3 + c] + s1ab * rand_normal(rng);
  std::vector<int> ts;
  for (int t = t_star; t >= 0; --t) ts.push_back(t);
  // Reconstruction is conditioned on the image's own tokens; guidance 1.
  return denoise_steps(std::move(x), x0.height, x0.width, ts, cond, 1.0f, rng);
}

void DiffusionModule::register_params(nn::ParamList& out) {
  denoiser_.register_params(out, nn::ParamGroup::DM);
  out.push_back({null_cond_, "dm.null_cond", nn::ParamGroup::Connectors});
}

}  // namespace weave
