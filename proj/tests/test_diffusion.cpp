// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "weave/diffusion.hpp"

using namespace weave;
using nn::Tensor;

namespace {

DiffusionConfig small_cfg() {
  DiffusionConfig c;
  c.timesteps = 20;
  c.base_channels = 8;
  c.cond_dim = 16;
  c.heads = 2;
  c.null_tokens = 2;
  return c;
}

Tensor flat_image(int h, int w, float v) {
  return Tensor::from({3, h, w}, std::vector<float>(3 * h * w, v));
}

DiffusionCondition enc_cond(const Tensor& tokens) {
  DiffusionCondition c;
  c.tokens = tokens;
  c.source = DiffusionCondition::Source::EncoderTokens;
  return c;
}

DiffusionCondition llm_cond(const Tensor& tokens) {
  DiffusionCondition c;
  c.tokens = tokens;
  c.source = DiffusionCondition::Source::LlmContext;
  return c;
}

}  // namespace

TEST_CASE("linear schedule endpoints and monotonicity") {
  auto s = NoiseSchedule::linear(100);
  CHECK(s.beta[0] == doctest::Approx(1e-4f));
  CHECK(s.beta[99] == doctest::Approx(2e-2f));
  // Double-precision recomputation of the cumulative product.
  double ab = 1.0;
  for (int t = 0; t < 100; ++t) {
    double beta = 1e-4 + (2e-2 - 1e-4) * t / 99.0;
    ab *= 1.0 - beta;
    CHECK(s.alpha_bar[t] == doctest::Approx(ab).epsilon(1e-5));
  }
  CHECK(s.alpha_bar[0] > 0.999f);
  CHECK(s.alpha_bar[99] < 0.40f);
  CHECK_NOTHROW(s.validate());
  CHECK_THROWS_AS(NoiseSchedule::linear(0), std::invalid_argument);
  auto bad = s;
  bad.alpha_bar[5] = bad.alpha_bar[4] + 0.1f;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("add_noise matches the closed form") {
  std::mt19937_64 rng(1);
  DiffusionModule dm(small_cfg(), rng);
  Tensor x0 = flat_image(4, 4, 0.8f);
  Tensor eps = flat_image(4, 4, -0.5f);
  int t = 7;
  float ab = dm.schedule().alpha_bar[t];
  Tensor xt = dm.add_noise(x0, t, eps);
  float want = std::sqrt(ab) * 0.8f + std::sqrt(1.0f - ab) * -0.5f;
  for (float v : xt.data()) CHECK(v == doctest::Approx(want));

  CHECK_THROWS_AS(dm.add_noise(x0, -1, eps), std::out_of_range);
  CHECK_THROWS_AS(dm.add_noise(x0, 20, eps), std::out_of_range);
  CHECK_THROWS_AS(dm.add_noise(x0, 3, flat_image(2, 2, 0.0f)),
                  std::invalid_argument);
}

TEST_CASE("forward-noised marginals have the scheduled variance") {
  std::mt19937_64 rng(2);
  DiffusionModule dm(small_cfg(), rng);
  Tensor x0 = flat_image(4, 4, 0.0f);
  int t = 12;
  float want_var = 1.0f - dm.schedule().alpha_bar[t];
  const int draws = 5000;
  double s = 0, s2 = 0;
  long n = 0;
  for (int i = 0; i < draws; ++i) {
    Tensor eps = gaussian_like(x0.shape(), rng);
    Tensor xt = dm.add_noise(x0, t, eps);
    // One coordinate per draw keeps the samples independent.
    double v = xt.data()[i % xt.numel()];
    s += v;
    s2 += v * v;
    ++n;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  double sd = want_var * std::sqrt(2.0 / (n - 1));
  CHECK(std::abs(mean) < 4.0 * std::sqrt(want_var / n));
  CHECK(std::abs(var - want_var) < 5.0 * sd + 1e-3);
}

TEST_CASE("gaussian_like is standard normal to sampling error") {
  std::mt19937_64 rng(3);
  Tensor e = gaussian_like({100}, rng);
  double s2 = 0;
  for (int i = 0; i < 100; ++i) s2 += e.data()[i] * e.data()[i];
  CHECK(s2 / 100 == doctest::Approx(1.0).epsilon(0.35));
}

TEST_CASE("nip and csr share one loss code path") {
  std::mt19937_64 rng(4);
  DiffusionModule dm(small_cfg(), rng);
  Tensor x0 = flat_image(8, 8, 0.5f);
  Tensor tokens = Tensor::zeros({3, 16});
  testutil::fill_normal(tokens, rng);

  std::mt19937_64 r1(99), r2(99);
  float nip = dm.nip_loss(x0, llm_cond(tokens), r1).item();
  float csr = dm.csr_loss(x0, enc_cond(tokens), r2).item();
  CHECK(nip == csr);  // same tokens, same draws, bitwise equal

  CHECK_THROWS_AS(dm.nip_loss(x0, enc_cond(tokens), r1), std::invalid_argument);
  CHECK_THROWS_AS(dm.csr_loss(x0, llm_cond(tokens), r1), std::invalid_argument);
}

TEST_CASE("denoise_loss_at is sensitive to the condition and differentiable") {
  std::mt19937_64 rng(5);
  DiffusionModule dm(small_cfg(), rng);
  Tensor x0 = flat_image(8, 8, 0.6f);
  Tensor eps = gaussian_like(x0.shape(), rng);
  Tensor tokens = Tensor::zeros({3, 16}, true);
  testutil::fill_normal(tokens, rng);

  float a = dm.denoise_loss_at(x0, enc_cond(tokens), 5, eps).item();
  Tensor other = Tensor::zeros({3, 16});
  testutil::fill_normal(other, rng);
  float b = dm.denoise_loss_at(x0, enc_cond(other), 5, eps).item();
  CHECK(a != b);

  auto loss = [&] { return dm.denoise_loss_at(x0, enc_cond(tokens), 5, eps); };
  std::vector<size_t> coords;
  for (size_t i = 0; i < tokens.numel(); i += 7) coords.push_back(i);
  CHECK(testutil::grad_check(loss, tokens, coords) < 1e-2);
}

TEST_CASE("a fresh model predicts noise with roughly unit-free magnitude") {
  std::mt19937_64 rng(6);
  DiffusionModule dm(small_cfg(), rng);
  Tensor x0 = flat_image(8, 8, 0.5f);
  Tensor tokens = Tensor::zeros({2, 16});
  testutil::fill_normal(tokens, rng);
  // Untrained net vs unit noise: mse stays within an order of magnitude of 1.
  double total = 0;
  for (int i = 0; i < 20; ++i)
    total += dm.denoise_loss(x0, enc_cond(tokens), rng).item();
  CHECK(total / 20 > 0.1);
  CHECK(total / 20 < 10.0);
}

TEST_CASE("sampling is deterministic given the rng state") {
  std::mt19937_64 rng(7);
  DiffusionModule dm(small_cfg(), rng);
  Tensor tokens = Tensor::zeros({2, 16});
  testutil::fill_normal(tokens, rng);
  std::mt19937_64 r1(5), r2(5);
  ImageRecord a = dm.sample(enc_cond(tokens), 10, 2.0f, r1, 8, 8);
  ImageRecord b = dm.sample(enc_cond(tokens), 10, 2.0f, r2, 8, 8);
  CHECK(a.pixels == b.pixels);
  for (float p : a.pixels) {
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
  }
  CHECK_THROWS_AS(dm.sample(enc_cond(tokens), 0, 1.0f, r1, 8, 8),
                  std::invalid_argument);
  CHECK_THROWS_AS(dm.sample(enc_cond(tokens), 21, 1.0f, r1, 8, 8),
                  std::invalid_argument);
}

TEST_CASE("guidance 0 ignores the condition entirely") {
  std::mt19937_64 rng(8);
  DiffusionModule dm(small_cfg(), rng);
  Tensor t1 = Tensor::zeros({2, 16});
  Tensor t2 = Tensor::zeros({5, 16});
  testutil::fill_normal(t1, rng);
  testutil::fill_normal(t2, rng);
  std::mt19937_64 r1(3), r2(3), r3(3);
  ImageRecord a = dm.sample(enc_cond(t1), 8, 0.0f, r1, 8, 8);
  ImageRecord b = dm.sample(enc_cond(t2), 8, 0.0f, r2, 8, 8);
  DiffusionCondition null_c;
  ImageRecord c = dm.sample(null_c, 8, 3.0f, r3, 8, 8);
  CHECK(a.pixels == b.pixels);
  CHECK(a.pixels == c.pixels);
}

TEST_CASE("guidance 1 is exactly the conditional branch") {
  // Replay a single-step sample by hand via predict_noise and compare.
  std::mt19937_64 rng(9);
  DiffusionModule dm(small_cfg(), rng);
  Tensor tokens = Tensor::zeros({2, 16});
  testutil::fill_normal(tokens, rng);
  const int h = 8, w = 8;

  std::mt19937_64 r1(11);
  ImageRecord got = dm.sample(enc_cond(tokens), 1, 1.0f, r1, h, w);

  std::mt19937_64 r2(11);
  Tensor x = gaussian_like({3, h, w}, r2);
  // One retained timestep: t = 0.
  Tensor eps = dm.predict_noise(x, 0, enc_cond(tokens));
  float ab = dm.schedule().alpha_bar[0];
  const float inv_sab = 1.0f / std::sqrt(ab);
  const float s1ab = std::sqrt(1.0f - ab);
  const int hw = h * w;
  for (int p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) {
      float x0 = (x.data()[c * hw + p] - s1ab * eps.data()[c * hw + p]) * inv_sab;
      CHECK(got.pixels[p * 3 + c] == std::clamp(x0, 0.0f, 1.0f));
    }
}

TEST_CASE("partial reconstruction at tiny noise stays close to the input") {
  std::mt19937_64 rng(10);
  DiffusionModule dm(small_cfg(), rng);
  ImageRecord src;
  src.height = 8;
  src.width = 8;
  src.pixels.resize(8 * 8 * 3);
  std::uniform_real_distribution<float> u(0.1f, 0.9f);
  for (auto& p : src.pixels) p = u(rng);
  Tensor tokens = Tensor::zeros({2, 16});
  testutil::fill_normal(tokens, rng);
  std::mt19937_64 r(21);
  ImageRecord out = dm.reconstruct_partial(src, 0.02f, enc_cond(tokens), r);
  double mae = 0;
  for (size_t i = 0; i < src.pixels.size(); ++i)
    mae += std::abs(out.pixels[i] - src.pixels[i]);
  mae /= src.pixels.size();
  CHECK(mae < 0.05);

  CHECK_THROWS_AS(dm.reconstruct_partial(src, 0.0f, enc_cond(tokens), r),
                  std::invalid_argument);
  CHECK_THROWS_AS(dm.reconstruct_partial(src, 1.5f, enc_cond(tokens), r),
                  std::invalid_argument);
}
