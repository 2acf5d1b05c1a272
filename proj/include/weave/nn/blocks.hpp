// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <vector>

#include "weave/nn/tensor.hpp"

namespace weave::nn {

// Parameter groups follow the freeze schedule: vision foundation model,
// language model, diffusion model, and the connectors ("others").
enum class ParamGroup { VFM, LLM, DM, Connectors };

struct ParamRef {
  Tensor t;
  std::string name;
  ParamGroup group;
};
using ParamList = std::vector<ParamRef>;

Tensor make_param(std::vector<int> shape, std::mt19937_64& rng,
                  float std_dev = 0.02f);
Tensor make_const_param(std::vector<int> shape, float fill);

struct Linear {
  Tensor w;  // {in, out}
  Tensor b;  // {out}

  Linear() = default;
  Linear(int in, int out, std::mt19937_64& rng, float std_dev = 0.02f);
  Tensor apply(const Tensor& x) const;  // x {R, in} -> {R, out}
  void register_params(ParamList& out, const std::string& prefix,
                       ParamGroup group);
};

struct LayerNorm {
  Tensor gain, bias;

  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Tensor apply(const Tensor& x) const;
  void register_params(ParamList& out, const std::string& prefix,
                       ParamGroup group);
};

// Multi-head scaled dot-product attention. Queries come from x; keys/values
// from ctx (pass x itself for self-attention). causal limits row i of a
// self-attention map to keys [0, i].
struct Attention {
  Linear q_proj, k_proj, v_proj, out_proj;
  int heads = 1;

  Attention() = default;
  Attention(int dim, int heads, std::mt19937_64& rng);
  Tensor apply(const Tensor& x, const Tensor& ctx, bool causal) const;
  void register_params(ParamList& out, const std::string& prefix,
                       ParamGroup group);
};

struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(int dim, int hidden, std::mt19937_64& rng);
  Tensor apply(const Tensor& x) const;
  void register_params(ParamList& out, const std::string& prefix,
                       ParamGroup group);
};

// Pre-norm transformer block, optionally causal self-attention.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  Attention attn;
  Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(int dim, int heads, std::mt19937_64& rng);
  Tensor apply(const Tensor& x, bool causal) const;
  void register_params(ParamList& out, const std::string& prefix,
                       ParamGroup group);
};

// Pre-norm cross-attention block: x attends to ctx, then an MLP.
struct CrossBlock {
  LayerNorm ln_q, ln_ctx, ln2;
  Attention xattn;
  Mlp mlp;

  CrossBlock() = default;
  CrossBlock(int dim, int heads, std::mt19937_64& rng);
  Tensor apply(const Tensor& x, const Tensor& ctx) const;
  void register_params(ParamList& out, const std::string& prefix,
                       ParamGroup group);
};

}  // namespace weave::nn
