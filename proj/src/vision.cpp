// SPDX-License-Identifier: Apache-2.0
#include "weave/vision.hpp"

#include <cmath>
#include <stdexcept>

namespace weave {

using nn::Tensor;

ImageEncoder::ImageEncoder(const VisionConfig& cfg, std::mt19937_64& rng)
    : out_norm_(cfg.dim), stride_(cfg.stride) {
  if (cfg.stride < 2 || (cfg.stride & (cfg.stride - 1)) != 0)
    throw std::invalid_argument("encoder stride must be a power of two >= 2");
  int levels = 0;
  for (int s = cfg.stride; s > 1; s >>= 1) ++levels;
  channels_ = {3};
  for (int l = 0; l < levels; ++l) {
    int c = (l == levels - 1) ? cfg.dim : std::min(cfg.dim, 16 << l);
    channels_.push_back(c);
  }
  for (int l = 0; l < levels; ++l) {
    int cin = channels_[l], cout = channels_[l + 1];
    float std_dev = 1.0f / std::sqrt(static_cast<float>(cin * 9));
    conv_w_.push_back(nn::make_param({cout, cin * 9}, rng, std_dev));
    conv_b_.push_back(nn::make_const_param({cout}, 0.0f));
  }
}

Tensor image_to_tensor(const ImageRecord& img, bool requires_grad) {
  // HWC -> CHW
  std::vector<float> chw(img.pixels.size());
  const int hw = img.height * img.width;
  for (int p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) chw[c * hw + p] = img.pixels[p * 3 + c];
  return Tensor::from({3, img.height, img.width}, std::move(chw),
                      requires_grad);
}

ImageEmbedding ImageEncoder::apply(const Tensor& chw) const {
  if (chw.shape().size() != 3 || chw.dim(0) != 3)
    throw std::invalid_argument("encoder expects {3, H, W}");
  if (chw.dim(1) % stride_ != 0 || chw.dim(2) % stride_ != 0)
    throw std::invalid_argument("image extent must divide encoder stride");
  Tensor x = chw;
  for (size_t l = 0; l < conv_w_.size(); ++l)
    x = nn::silu(nn::conv2d(x, conv_w_[l], conv_b_[l], 3, 3, 2, 1));
  ImageEmbedding e;
  e.grid_h = x.dim(1);
  e.grid_w = x.dim(2);
  e.tokens = out_norm_.apply(nn::chw_to_nc(x));
  return e;
}

ImageEmbedding ImageEncoder::encode(const ImageRecord& img) const {
  validate_image(img);
  return apply(image_to_tensor(img));
}

void ImageEncoder::register_params(nn::ParamList& out, nn::ParamGroup group) {
  for (size_t l = 0; l < conv_w_.size(); ++l) {
    out.push_back({conv_w_[l], "encoder.conv" + std::to_string(l) + ".w", group});
    out.push_back({conv_b_[l], "encoder.conv" + std::to_string(l) + ".b", group});
  }
  out_norm_.register_params(out, "encoder.norm", group);
}

ImageEmbedding mask_aware_extract(const ImageEmbedding& e,
                                  const std::vector<float>& mask, int mask_h,
                                  int mask_w) {
  if (static_cast<int>(mask.size()) != mask_h * mask_w)
    throw std::invalid_argument("mask shape mismatch");
  if (mask_h % e.grid_h != 0 || mask_w % e.grid_w != 0)
    throw std::invalid_argument("mask shape mismatch");
  const int cy = mask_h / e.grid_h, cx = mask_w / e.grid_w;
  std::vector<float> cell(static_cast<size_t>(e.grid_h) * e.grid_w);
  for (int gy = 0; gy < e.grid_h; ++gy)
    for (int gx = 0; gx < e.grid_w; ++gx) {
      double acc = 0.0;
      for (int y = 0; y < cy; ++y)
        for (int x = 0; x < cx; ++x)
          acc += mask[(gy * cy + y) * mask_w + gx * cx + x];
      cell[gy * e.grid_w + gx] =
          (acc / (cy * cx) >= 0.5) ? 1.0f : 0.0f;
    }
  ImageEmbedding out;
  out.grid_h = e.grid_h;
  out.grid_w = e.grid_w;
  out.tokens = nn::scale_rows(e.tokens, cell);
  return out;
}

Resampler::Resampler(int dim, int queries, int depth, int heads,
                     std::mt19937_64& rng)
    : queries_(nn::make_param({queries, dim}, rng)), out_norm_(dim) {
  for (int d = 0; d < depth; ++d) blocks_.emplace_back(dim, heads, rng);
}

Tensor Resampler::apply(const Tensor& tokens) const {
  if (tokens.dim(0) < 1) throw std::invalid_argument("resampler needs N >= 1");
  Tensor x = queries_;
  for (const auto& blk : blocks_) x = blk.apply(x, tokens);
  return out_norm_.apply(x);
}

void Resampler::register_params(nn::ParamList& out, const std::string& prefix,
                                nn::ParamGroup group) {
  out.push_back({queries_, prefix + ".queries", group});
  for (size_t d = 0; d < blocks_.size(); ++d)
    blocks_[d].register_params(out, prefix + ".block" + std::to_string(d),
                               group);
  out_norm_.register_params(out, prefix + ".norm", group);
}

VisionModule::VisionModule(const VisionConfig& cfg, std::mt19937_64& rng)
    : cfg(cfg),
      encoder(cfg, rng),
      resampler_llm(cfg.dim, cfg.m_llm, cfg.depth, cfg.heads, rng),
      resampler_enc(cfg.dim, cfg.m_enc, cfg.depth, cfg.heads, rng) {}

Tensor VisionModule::resample(const Tensor& tokens, ResamplerSide side) const {
  return side == ResamplerSide::LlmSide ? resampler_llm.apply(tokens)
                                        : resampler_enc.apply(tokens);
}

void VisionModule::register_params(nn::ParamList& out) {
  encoder.register_params(out, nn::ParamGroup::VFM);
  resampler_llm.register_params(out, "resampler_llm",
                                nn::ParamGroup::Connectors);
  resampler_enc.register_params(out, "resampler_enc",
                                nn::ParamGroup::Connectors);
}

}  // namespace weave
