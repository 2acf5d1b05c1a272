// SPDX-License-Identifier: Apache-2.0
#include "weave/nn/blocks.hpp"

#include <cmath>
#include <stdexcept>

#include "weave/core/rng.hpp"

namespace weave::nn {

Tensor make_param(std::vector<int> shape, std::mt19937_64& rng, float std_dev) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  for (auto& v : t.data()) v = rand_normal(rng) * std_dev;
  return t;
}

Tensor make_const_param(std::vector<int> shape, float fill) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  for (auto& v : t.data()) v = fill;
  return t;
}

Linear::Linear(int in, int out, std::mt19937_64& rng, float std_dev)
    : w(make_param({in, out}, rng, std_dev)),
      b(make_const_param({out}, 0.0f)) {}

Tensor Linear::apply(const Tensor& x) const {
  return add_row_broadcast(matmul(x, w), b);
}

void Linear::register_params(ParamList& out, const std::string& prefix,
                             ParamGroup group) {
  out.push_back({w, prefix + ".w", group});
  out.push_back({b, prefix + ".b", group});
}

LayerNorm::LayerNorm(int dim)
    : gain(make_const_param({dim}, 1.0f)), bias(make_const_param({dim}, 0.0f)) {}

Tensor LayerNorm::apply(const Tensor& x) const {
  return layer_norm(x, gain, bias);
}

void LayerNorm::register_params(ParamList& out, const std::string& prefix,
                                ParamGroup group) {
  out.push_back({gain, prefix + ".gain", group});
  out.push_back({bias, prefix + ".bias", group});
}

Attention::Attention(int dim, int heads, std::mt19937_64& rng)
    : q_proj(dim, dim, rng),
      k_proj(dim, dim, rng),
      v_proj(dim, dim, rng),
      out_proj(dim, dim, rng),
      heads(heads) {
  if (dim % heads != 0)
    throw std::invalid_argument("Attention: dim must divide by heads");
}

Tensor Attention::apply(const Tensor& x, const Tensor& ctx, bool causal) const {
  const int dim = q_proj.w.dim(0);
  const int dh = dim / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor q = q_proj.apply(x);
  Tensor k = k_proj.apply(ctx);
  Tensor v = v_proj.apply(ctx);
  std::vector<int> valid;
  if (causal) {
    valid.resize(x.dim(0));
    for (int i = 0; i < x.dim(0); ++i) valid[i] = i + 1;
  }
  std::vector<Tensor> head_out;
  head_out.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor att = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), valid);
    head_out.push_back(matmul(att, vh));
  }
  return out_proj.apply(concat_cols(head_out));
}

void Attention::register_params(ParamList& out, const std::string& prefix,
                                ParamGroup group) {
  q_proj.register_params(out, prefix + ".q", group);
  k_proj.register_params(out, prefix + ".k", group);
  v_proj.register_params(out, prefix + ".v", group);
  out_proj.register_params(out, prefix + ".o", group);
}

Mlp::Mlp(int dim, int hidden, std::mt19937_64& rng)
    : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

Tensor Mlp::apply(const Tensor& x) const {
  return fc2.apply(silu(fc1.apply(x)));
}

void Mlp::register_params(ParamList& out, const std::string& prefix,
                          ParamGroup group) {
  fc1.register_params(out, prefix + ".fc1", group);
  fc2.register_params(out, prefix + ".fc2", group);
}

TransformerBlock::TransformerBlock(int dim, int heads, std::mt19937_64& rng)
    : ln1(dim), ln2(dim), attn(dim, heads, rng), mlp(dim, 4 * dim, rng) {}

Tensor TransformerBlock::apply(const Tensor& x, bool causal) const {
  Tensor h = ln1.apply(x);
  Tensor y = add(x, attn.apply(h, h, causal));
  return add(y, mlp.apply(ln2.apply(y)));
}

void TransformerBlock::register_params(ParamList& out, const std::string& prefix,
                                       ParamGroup group) {
  ln1.register_params(out, prefix + ".ln1", group);
  ln2.register_params(out, prefix + ".ln2", group);
  attn.register_params(out, prefix + ".attn", group);
  mlp.register_params(out, prefix + ".mlp", group);
}

CrossBlock::CrossBlock(int dim, int heads, std::mt19937_64& rng)
    : ln_q(dim), ln_ctx(dim), ln2(dim), xattn(dim, heads, rng),
      mlp(dim, 4 * dim, rng) {}

Tensor CrossBlock::apply(const Tensor& x, const Tensor& ctx) const {
  Tensor y = add(x, xattn.apply(ln_q.apply(x), ln_ctx.apply(ctx), false));
  return add(y, mlp.apply(ln2.apply(y)));
}

void CrossBlock::register_params(ParamList& out, const std::string& prefix,
                                 ParamGroup group) {
  ln_q.register_params(out, prefix + ".ln_q", group);
  ln_ctx.register_params(out, prefix + ".ln_ctx", group);
  ln2.register_params(out, prefix + ".ln2", group);
  xattn.register_params(out, prefix + ".xattn", group);
  mlp.register_params(out, prefix + ".mlp", group);
}

}  // namespace weave::nn
