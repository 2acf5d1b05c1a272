// SPDX-License-Identifier: Apache-2.0
#include "weave/training.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace weave {

using nlohmann::json;
using nn::ParamGroup;
using nn::Tensor;

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::S1: return "S1";
    case Stage::S2: return "S2";
    case Stage::S3: return "S3";
  }
  return "?";
}

Stage stage_from_name(const std::string& name) {
  if (name == "S1") return Stage::S1;
  if (name == "S2") return Stage::S2;
  if (name == "S3") return Stage::S3;
  throw std::invalid_argument("unknown stage: " + name);
}

StageConfig StageConfig::defaults(Stage s) {
  StageConfig c;
  c.stage = s;
  if (s == Stage::S1) {
    c.lr_encoder_decoder = 2e-5f;
    c.lr_language_model = 1e-6f;
    c.lr_others = 1e-4f;
    c.adam_beta2 = 0.995f;
    c.adam_eps = 1e-6f;
  } else {
    c.lr_encoder_decoder = 2e-5f;
    c.lr_language_model = 1e-6f;
    c.lr_others = 1e-5f;
    c.adam_beta2 = 0.999f;
    c.adam_eps = 1e-8f;
  }
  return c;
}

void StageConfig::validate() const {
  if (!(lambda > 0.0f)) throw std::invalid_argument("lambda must be > 0");
  if (batch_size < 1 || total_steps < 1)
    throw std::invalid_argument("bad schedule sizes");
  if (cfg_dropout_p < 0.0f || cfg_dropout_p > 1.0f)
    throw std::invalid_argument("dropout probability out of range");
}

json StageConfig::to_json() const {
  return json{{"stage", stage_name(stage)},
              {"lambda", lambda},
              {"lr_encoder_decoder", lr_encoder_decoder},
              {"lr_language_model", lr_language_model},
              {"lr_others", lr_others},
              {"warmup_steps", warmup_steps},
              {"total_steps", total_steps},
              {"batch_size", batch_size},
              {"adam_beta1", adam_beta1},
              {"adam_beta2", adam_beta2},
              {"adam_eps", adam_eps},
              {"weight_decay", weight_decay},
              {"grad_clip", grad_clip},
              {"cfg_dropout_p", cfg_dropout_p},
              {"input_resolution", input_resolution},
              {"csr_enabled", csr_enabled},
              {"csr_weight", csr_weight},
              {"checkpoint_every", checkpoint_every},
              {"log_every", log_every}};
}

StageConfig StageConfig::from_json(const json& j) {
  StageConfig c = defaults(stage_from_name(j.at("stage")));
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k);
  };
  get("lambda", c.lambda);
  get("lr_encoder_decoder", c.lr_encoder_decoder);
  get("lr_language_model", c.lr_language_model);
  get("lr_others", c.lr_others);
  get("warmup_steps", c.warmup_steps);
  get("total_steps", c.total_steps);
  get("batch_size", c.batch_size);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_eps", c.adam_eps);
  get("weight_decay", c.weight_decay);
  get("grad_clip", c.grad_clip);
  get("cfg_dropout_p", c.cfg_dropout_p);
  get("input_resolution", c.input_resolution);
  get("csr_enabled", c.csr_enabled);
  get("csr_weight", c.csr_weight);
  get("checkpoint_every", c.checkpoint_every);
  get("log_every", c.log_every);
  return c;
}

float stage_loss(const StageConfig& cfg, float ntp, float nip, float csr) {
  if (!std::isfinite(ntp) || !std::isfinite(nip) || !std::isfinite(csr))
    throw std::invalid_argument("non-finite loss component");
  const float w_csr = cfg.lambda * cfg.csr_weight;
  switch (cfg.stage) {
    case Stage::S1: return ntp + cfg.lambda * nip + w_csr * csr;
    case Stage::S2: return ntp + w_csr * csr;
    case Stage::S3: return ntp;
  }
  return ntp;
}

Tensor stage_loss_graph(const StageConfig& cfg, const Tensor& ntp,
                        const Tensor& nip, const Tensor& csr) {
  const float w_csr = cfg.lambda * cfg.csr_weight;
  switch (cfg.stage) {
    case Stage::S1:
      return nn::add_scaled(nn::add_scaled(ntp, nip, cfg.lambda), csr, w_csr);
    case Stage::S2:
      return nn::add_scaled(ntp, csr, w_csr);
    case Stage::S3:
      return ntp;
  }
  return ntp;
}

std::vector<ParamGroup> apply_freeze(const StageConfig& cfg, Model& model) {
  std::vector<ParamGroup> trainable{ParamGroup::Connectors};
  if (!cfg.frozen_vfm()) trainable.push_back(ParamGroup::VFM);
  if (!cfg.frozen_llm()) trainable.push_back(ParamGroup::LLM);
  if (!cfg.frozen_dm()) trainable.push_back(ParamGroup::DM);
  for (auto& p : model.params) {
    bool on = false;
    for (auto g : trainable) on |= (p.group == g);
    p.t.set_requires_grad(on);
  }
  return trainable;
}

AdamW::AdamW(const nn::ParamList& params) {
  m.resize(params.size());
  v.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    m[i].assign(params[i].t.numel(), 0.0f);
    v[i].assign(params[i].t.numel(), 0.0f);
  }
}

void AdamW::step(nn::ParamList& params,
                 const std::function<float(ParamGroup)>& lr, float beta1,
                 float beta2, float eps, float weight_decay) {
  ++t_;
  const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.t.requires_grad()) continue;
    const float rate = lr(p.group);
    auto& val = p.t.data();
    auto& g = p.t.grad();
    for (size_t j = 0; j < val.size(); ++j) {
      m[i][j] = beta1 * m[i][j] + (1.0f - beta1) * g[j];
      v[i][j] = beta2 * v[i][j] + (1.0f - beta2) * g[j] * g[j];
      float mh = m[i][j] / bc1;
      float vh = v[i][j] / bc2;
      val[j] -= rate * (mh / (std::sqrt(vh) + eps) + weight_decay * val[j]);
    }
  }
}

void AdamW::zero_grad(nn::ParamList& params) {
  for (auto& p : params) {
    auto& n = *p.t.node();
    if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0f);
  }
}

float global_grad_norm(const nn::ParamList& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    if (!p.t.requires_grad()) continue;
    const auto& g = p.t.node()->grad;
    for (float v : g) acc += static_cast<double>(v) * v;
  }
  return static_cast<float>(std::sqrt(acc));
}

void clip_gradients(nn::ParamList& params, float max_norm) {
  float norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0f) return;
  float s = max_norm / norm;
  for (auto& p : params) {
    if (!p.t.requires_grad()) continue;
    for (auto& v : p.t.node()->grad) v *= s;
  }
}

LossBreakdown train_step(Model& model, const std::vector<PackedSequence>& batch,
                         const StageConfig& cfg, AdamW& opt,
                         std::mt19937_64& rng_nip, std::mt19937_64& rng_csr,
                         bool update) {
  cfg.validate();
  LossBreakdown out;
  std::vector<Tensor> ntp_parts, nip_parts, csr_parts;
  int total_ntp_positions = 0;
  std::vector<std::pair<Tensor, int>> ntp_raw;

  const bool want_nip = cfg.stage == Stage::S1;
  const bool want_csr =
      (cfg.stage == Stage::S1 || cfg.stage == Stage::S2) && cfg.csr_enabled;

  for (const auto& seq : batch) {
    // Encode each image once; reuse for the <IMG> run and the CSR condition.
    std::vector<ImageEmbedding> embs;
    std::vector<Tensor> inputs;
    for (const auto& entry : seq.image_entries) {
      embs.push_back(model.masked_embedding(entry.image));
      inputs.push_back(
          model.vision.resample(embs.back().tokens, ResamplerSide::LlmSide));
    }
    Tensor states = model.lm.decode(model.lm.embed_sequence(seq, inputs));

    int count = 0;
    for (size_t i = 1; i < seq.ntp_mask.size(); ++i) count += seq.ntp_mask[i];
    if (count > 0) {
      ntp_raw.push_back({model.lm.ntp_loss(states, seq.token_ids, seq.ntp_mask),
                         count});
      total_ntp_positions += count;
    }

    for (size_t s = 0; s < seq.embedding_slots.size(); ++s) {
      const auto& [pos, idx] = seq.embedding_slots[s];
      const auto& entry = seq.image_entries[idx];
      Tensor x0 = image_to_tensor(entry.image);
      if (want_nip && !entry.is_first_in_sequence) {
        DiffusionCondition cond;
        if (entry.condition_dropped) {
          cond.source = DiffusionCondition::Source::Null;
        } else {
          cond = model.llm_condition(states, pos - 1);  // context incl. <SOI>
        }
        nip_parts.push_back(model.diffusion.nip_loss(x0, cond, rng_nip));
        ++out.nip_images;
      }
      if (want_csr) {
        DiffusionCondition cond;
        cond.tokens = model.vision.resample(embs[idx].tokens,
                                            ResamplerSide::EncoderSide);
        cond.source = DiffusionCondition::Source::EncoderTokens;
        csr_parts.push_back(model.diffusion.csr_loss(x0, cond, rng_csr));
        ++out.csr_images;
      }
    }
  }

  auto mean_of = [](std::vector<Tensor>& parts) {
    if (parts.empty()) return Tensor::scalar(0.0f);
    Tensor acc = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) acc = nn::add(acc, parts[i]);
    return nn::scale(acc, 1.0f / static_cast<float>(parts.size()));
  };
  Tensor ntp = Tensor::scalar(0.0f);
  if (total_ntp_positions > 0) {
    for (auto& [t, c] : ntp_raw) {
      ntp = nn::add_scaled(
          ntp, t, static_cast<float>(c) / static_cast<float>(total_ntp_positions));
    }
  }
  out.ntp_positions = total_ntp_positions;
  Tensor nip = mean_of(nip_parts);
  Tensor csr = mean_of(csr_parts);
  Tensor total = stage_loss_graph(cfg, ntp, nip, csr);

  out.ntp = ntp.item();
  out.nip = nip.item();
  out.csr = csr.item();
  out.total = total.item();
  if (!std::isfinite(out.ntp)) throw std::runtime_error("non-finite NTP loss");
  if (!std::isfinite(out.nip)) throw std::runtime_error("non-finite NIP loss");
  if (!std::isfinite(out.csr)) throw std::runtime_error("non-finite CSR loss");

  if (update) {
    nn::backward(total);
    clip_gradients(model.params, cfg.grad_clip);
    // lr supplied by the caller through run_stage; direct train_step calls
    // use the configured peaks.
    opt.step(model.params,
             [&](ParamGroup g) {
               switch (g) {
                 case ParamGroup::VFM:
                 case ParamGroup::DM: return cfg.lr_encoder_decoder;
                 case ParamGroup::LLM: return cfg.lr_language_model;
                 default: return cfg.lr_others;
               }
             },
             cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    opt.zero_grad(model.params);
  }
  return out;
}

DataLoader::DataLoader(std::vector<PackedSequence> fragments, int max_len,
                       float dropout_p, std::mt19937_64 rng)
    : fragments_(std::move(fragments)),
      max_len_(max_len),
      dropout_p_(dropout_p),
      rng_(rng) {
  if (fragments_.empty()) throw std::invalid_argument("empty dataset");
}

std::vector<PackedSequence> DataLoader::next_batch(int batch_size) {
  std::vector<PackedSequence> picked;
  for (int i = 0; i < batch_size; ++i)
    picked.push_back(
        fragments_[rand_int(rng_, 0, static_cast<int>(fragments_.size()) - 1)]);
  std::vector<PackedSequence> packed = pack(picked, max_len_);
  for (auto& seq : packed)
    seq = mark_condition_dropout(std::move(seq), dropout_p_, rng_);
  return packed;
}

float lr_at(const StageConfig& cfg, int step, float peak) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return peak * static_cast<float>(step) / cfg.warmup_steps;
  const int decay_span = std::max(1, cfg.total_steps - cfg.warmup_steps);
  float u = static_cast<float>(step - cfg.warmup_steps) / decay_span;
  u = std::min(1.0f, std::max(0.0f, u));
  return peak * 0.5f * (1.0f + std::cos(3.14159265358979323846f * u));
}

StageRunResult run_stage(Model& model, DataLoader& loader,
                         const StageConfig& cfg,
                         const std::filesystem::path& out_dir,
                         const RngPool& pool) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  apply_freeze(cfg, model);
  AdamW opt(model.params);
  auto rng_nip = pool.stream("train.nip");
  auto rng_csr = pool.stream("train.csr");

  std::ofstream metrics(out_dir / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot open metrics log");
  StageRunResult res;
  res.metrics = out_dir / "metrics.jsonl";
  res.checkpoint = out_dir / "checkpoint.wckp";
  bool first = true;
  int bad_streak = 0;
  for (int step = 0; step < cfg.total_steps; ++step) {
    auto batch = loader.next_batch(cfg.batch_size);
    // lr schedule applied by patching the configured peaks for this step
    StageConfig step_cfg = cfg;
    step_cfg.lr_encoder_decoder = lr_at(cfg, step, cfg.lr_encoder_decoder);
    step_cfg.lr_language_model = lr_at(cfg, step, cfg.lr_language_model);
    step_cfg.lr_others = lr_at(cfg, step, cfg.lr_others);
    LossBreakdown b;
    try {
      b = train_step(model, batch, step_cfg, opt, rng_nip, rng_csr);
      bad_streak = 0;
    } catch (const std::runtime_error&) {
      if (++bad_streak >= 5) throw;
      continue;
    }
    if (first || step % std::max(1, cfg.log_every) == 0 ||
        step == cfg.total_steps - 1) {
      metrics << json{{"step", step},
                      {"ntp", b.ntp},
                      {"nip", b.nip},
                      {"csr", b.csr},
                      {"total", b.total},
                      {"lr", lr_at(cfg, step, cfg.lr_others)}}
                     .dump()
              << "\n";
      metrics.flush();
    }
    if (first) {
      res.first_logged = b;
      first = false;
    }
    res.last = b;
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(out_dir / ("checkpoint_" + std::to_string(step + 1) +
                                 ".wckp"),
                      model, &opt, &cfg);
  }
  save_checkpoint(res.checkpoint, model, &opt, &cfg);
  return res;
}

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const AdamW* opt, const StageConfig* stage_meta) {
  json header{{"config", model.cfg.to_json()},
              {"config_hash", model.cfg.hash()},
              {"tokenizer", model.tokenizer.to_json()},
              {"has_opt", opt != nullptr}};
  if (stage_meta) header["stage"] = stage_meta->to_json();
  if (opt) header["opt_t"] = opt->t_;
  json plist = json::array();
  for (const auto& p : model.params)
    plist.push_back({{"name", p.name}, {"numel", p.t.numel()}});
  header["params"] = std::move(plist);
  std::string hs = header.dump();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f.write("WCKP", 4);
  uint64_t len = hs.size();
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  auto dump = [&](const std::vector<float>& v) {
    f.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
  };
  for (const auto& p : model.params) dump(p.t.data());
  if (opt) {
    for (const auto& v : opt->m) dump(v);
    for (const auto& v : opt->v) dump(v);
  }
  if (!f) throw std::runtime_error("checkpoint write failed");
}

Model load_checkpoint(const std::filesystem::path& path, uint64_t seed,
                      AdamW* opt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (std::string(magic, 4) != "WCKP")
    throw std::runtime_error("bad checkpoint magic");
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 8);
  std::string hs(len, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(len));
  json header = json::parse(hs);
  ModelConfig cfg = ModelConfig::from_json(header.at("config"));
  Model model(cfg, Tokenizer::from_json(header.at("tokenizer")), seed);
  const auto& plist = header.at("params");
  if (plist.size() != model.params.size())
    throw std::runtime_error("checkpoint parameter list mismatch");
  auto slurp = [&](std::vector<float>& v) {
    f.read(reinterpret_cast<char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(float)));
  };
  for (size_t i = 0; i < model.params.size(); ++i) {
    if (plist[i].at("name") != model.params[i].name)
      throw std::runtime_error("checkpoint parameter name mismatch");
    slurp(model.params[i].t.data());
  }
  if (header.at("has_opt").get<bool>()) {
    AdamW tmp(model.params);
    for (auto& v : tmp.m) slurp(v);
    for (auto& v : tmp.v) slurp(v);
    tmp.t_ = header.at("opt_t").get<int64_t>();
    if (opt) *opt = std::move(tmp);
  }
  if (!f) throw std::runtime_error("truncated checkpoint");
  return model;
}

}  // namespace weave
