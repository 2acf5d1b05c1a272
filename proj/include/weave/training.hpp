// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include "weave/core/rng.hpp"
#include "weave/model.hpp"

namespace weave {

enum class Stage { S1, S2, S3 };

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

// Per-stage schedule. Freeze flags follow the published recipe: stage one
// unfreezes the vision encoder only; later stages unfreeze the language
// model only; the diffusion model stays frozen throughout. Connectors
// ("others") always train.
struct StageConfig {
  Stage stage = Stage::S1;
  float lambda = 5.0f;
  float lr_encoder_decoder = 2e-5f;  // VFM and DM groups
  float lr_language_model = 1e-6f;
  float lr_others = 1e-4f;
  int warmup_steps = 100;
  int total_steps = 1000;
  int batch_size = 16;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.995f;
  float adam_eps = 1e-6f;
  float weight_decay = 0.05f;
  float grad_clip = 1.0f;
  float cfg_dropout_p = 0.1f;
  int input_resolution = 32;
  // Ablation switches. csr_enabled=false skips the CSR computation entirely;
  // csr_weight scales its contribution. Independent rng streams per loss
  // keep the two routes step-identical.
  bool csr_enabled = true;
  float csr_weight = 1.0f;
  int checkpoint_every = 0;  // 0 = final only
  int log_every = 10;

  static StageConfig defaults(Stage s);
  void validate() const;
  bool frozen_vfm() const { return stage != Stage::S1; }
  bool frozen_llm() const { return stage == Stage::S1; }
  bool frozen_dm() const { return true; }

  nlohmann::json to_json() const;
  static StageConfig from_json(const nlohmann::json& j);
};

struct LossBreakdown {
  float ntp = 0.0f, nip = 0.0f, csr = 0.0f, total = 0.0f;
  int ntp_positions = 0, nip_images = 0, csr_images = 0;
};

// S1: ntp + lambda (nip + csr); S2: ntp + lambda csr; S3: ntp.
float stage_loss(const StageConfig& cfg, float ntp, float nip, float csr);
nn::Tensor stage_loss_graph(const StageConfig& cfg, const nn::Tensor& ntp,
                            const nn::Tensor& nip, const nn::Tensor& csr);

// Sets requires_grad on the model's parameter groups; returns trainable
// groups (always includes the connectors).
std::vector<nn::ParamGroup> apply_freeze(const StageConfig& cfg, Model& model);

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const nn::ParamList& params);

  // lr per group is supplied by the caller each step (warmup/cosine).
  void step(nn::ParamList& params,
            const std::function<float(nn::ParamGroup)>& lr, float beta1,
            float beta2, float eps, float weight_decay);
  void zero_grad(nn::ParamList& params);
  int64_t step_count() const { return t_; }

  std::vector<std::vector<float>> m, v;  // exposed for checkpointing
  int64_t t_ = 0;
};

float global_grad_norm(const nn::ParamList& params);
void clip_gradients(nn::ParamList& params, float max_norm);

// One forward/backward/update over a packed batch. Losses honor the ntp
// mask, the first-image NIP exclusion and per-image condition dropout.
// Throws on non-finite loss, naming the offending component.
LossBreakdown train_step(Model& model, const std::vector<PackedSequence>& batch,
                         const StageConfig& cfg, AdamW& opt,
                         std::mt19937_64& rng_nip, std::mt19937_64& rng_csr,
                         bool update = true);

// Samples batches from pre-assembled fragments; repacks and re-marks CFG
// dropout per draw.
class DataLoader {
 public:
  DataLoader(std::vector<PackedSequence> fragments, int max_len, float dropout_p,
             std::mt19937_64 rng);
  std::vector<PackedSequence> next_batch(int batch_size);

 private:
  std::vector<PackedSequence> fragments_;
  int max_len_;
  float dropout_p_;
  std::mt19937_64 rng_;
};

struct StageRunResult {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  LossBreakdown first_logged, last;
};

// Warmup + cosine decay to zero, line-delimited metrics records
// {step, ntp, nip, csr, total, lr}, checkpoint at the end (and periodically
// when configured).
StageRunResult run_stage(Model& model, DataLoader& loader,
                         const StageConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const RngPool& pool);

float lr_at(const StageConfig& cfg, int step, float peak);

// Single-container checkpoint: JSON header (model config, tokenizer, stage
// metadata, config hash) + raw parameter and optimizer payload.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const AdamW* opt, const StageConfig* stage_meta);
Model load_checkpoint(const std::filesystem::path& path, uint64_t seed = 0,
                      AdamW* opt = nullptr);

}  // namespace weave
