// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <nlohmann/json.hpp>

#include "test_util.hpp"
#include "weave/training.hpp"

using namespace weave;
using nn::ParamGroup;
using nn::Tensor;

namespace {

ModelConfig tiny_model_cfg() {
  ModelConfig c;
  c.dim = 16;
  c.lm_layers = 1;
  c.lm_heads = 2;
  c.max_len = 96;
  c.enc_stride = 8;
  c.resampler_depth = 1;
  c.resampler_heads = 2;
  c.m_llm = 2;
  c.m_enc = 2;
  c.dm_timesteps = 10;
  c.dm_base_channels = 4;
  c.dm_null_tokens = 2;
  c.resolution = 16;
  return c;
}

Tokenizer tiny_tokenizer() {
  Tokenizer tok = Tokenizer::build({"a red circle on a dark background", "a blue square shape"});
  return tok;
}

ImageRecord tiny_image(std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageRecord img;
  img.height = 16;
  img.width = 16;
  img.pixels.resize(16 * 16 * 3);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

// Two-image fragment starting with an image: image, text, image, text.
std::vector<PackedSequence> tiny_batch(const Tokenizer& tok, std::mt19937_64& rng,
                                       bool second_image = true) {
  InterleavedDocument doc;
  doc.doc_id = "d";
  doc.elements.push_back(tiny_image(rng));
  doc.elements.push_back(TextSpan{"a red circle"});
  if (second_image) {
    doc.elements.push_back(tiny_image(rng));
    doc.elements.push_back(TextSpan{"a blue square"});
  }
  return {assemble(doc, tok, 2)};
}

std::vector<std::vector<float>> snapshot(const nn::ParamList& params,
                                         ParamGroup g) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params)
    if (p.group == g) out.push_back(p.t.data());
  return out;
}

}  // namespace

TEST_CASE("stage_loss composition") {
  StageConfig s1 = StageConfig::defaults(Stage::S1);
  CHECK(stage_loss(s1, 2.0f, 0.3f, 0.5f) == doctest::Approx(6.0f));
  StageConfig s2 = StageConfig::defaults(Stage::S2);
  CHECK(stage_loss(s2, 2.0f, 0.3f, 0.5f) == doctest::Approx(4.5f));
  StageConfig s3 = StageConfig::defaults(Stage::S3);
  CHECK(stage_loss(s3, 2.0f, 0.3f, 0.5f) == doctest::Approx(2.0f));

  // csr_weight scales only the csr term.
  s1.csr_weight = 0.5f;
  CHECK(stage_loss(s1, 2.0f, 0.3f, 0.5f) == doctest::Approx(2.0f + 5.0f * (0.3f + 0.25f)));
  Tensor g = stage_loss_graph(s1, Tensor::scalar(2.0f), Tensor::scalar(0.3f),
                              Tensor::scalar(0.5f));
  CHECK(g.item() == doctest::Approx(2.0f + 5.0f * 0.55f));
}

TEST_CASE("stage defaults follow the published recipe") {
  auto s1 = StageConfig::defaults(Stage::S1);
  CHECK(s1.lambda == 5.0f);
  CHECK(s1.lr_encoder_decoder == doctest::Approx(2e-5f));
  CHECK(s1.lr_others == doctest::Approx(1e-4f));
  CHECK(s1.adam_beta2 == doctest::Approx(0.995f));
  CHECK(s1.adam_eps == doctest::Approx(1e-6f));
  CHECK_FALSE(s1.frozen_vfm());
  CHECK(s1.frozen_llm());
  CHECK(s1.frozen_dm());

  for (Stage st : {Stage::S2, Stage::S3}) {
    auto s = StageConfig::defaults(st);
    CHECK(s.lr_language_model == doctest::Approx(1e-6f));
    CHECK(s.lr_others == doctest::Approx(1e-5f));
    CHECK(s.adam_beta2 == doctest::Approx(0.999f));
    CHECK(s.adam_eps == doctest::Approx(1e-8f));
    CHECK(s.frozen_vfm());
    CHECK_FALSE(s.frozen_llm());
    CHECK(s.frozen_dm());
  }
  CHECK(StageConfig::defaults(Stage::S1).weight_decay == doctest::Approx(0.05f));
}

TEST_CASE("stage name round trip and config json round trip") {
  for (Stage s : {Stage::S1, Stage::S2, Stage::S3})
    CHECK(stage_from_name(stage_name(s)) == s);
  CHECK_THROWS_AS(stage_from_name("bogus"), std::invalid_argument);
  auto cfg = StageConfig::defaults(Stage::S2);
  cfg.total_steps = 77;
  cfg.csr_weight = 0.25f;
  auto back = StageConfig::from_json(cfg.to_json());
  CHECK(back.stage == Stage::S2);
  CHECK(back.total_steps == 77);
  CHECK(back.csr_weight == 0.25f);
}

TEST_CASE("apply_freeze sets group trainability per stage") {
  Model model(tiny_model_cfg(), tiny_tokenizer(), 1);
  auto check_stage = [&](Stage st, bool vfm_on, bool llm_on) {
    StageConfig cfg = StageConfig::defaults(st);
    auto groups = apply_freeze(cfg, model);
    bool has_conn = false;
    for (auto g : groups) has_conn |= g == ParamGroup::Connectors;
    CHECK(has_conn);
    for (const auto& p : model.params) {
      switch (p.group) {
        case ParamGroup::VFM: CHECK(p.t.requires_grad() == vfm_on); break;
        case ParamGroup::LLM: CHECK(p.t.requires_grad() == llm_on); break;
        case ParamGroup::DM: CHECK_FALSE(p.t.requires_grad()); break;
        case ParamGroup::Connectors: CHECK(p.t.requires_grad()); break;
      }
    }
  };
  check_stage(Stage::S1, true, false);
  check_stage(Stage::S2, false, true);
  check_stage(Stage::S3, false, true);
}

TEST_CASE("adamw single-step hand check") {
  Tensor w = Tensor::from({2}, {1.0f, -2.0f}, true);
  w.grad() = {0.5f, -0.25f};
  nn::ParamList params;
  params.push_back({w, "w", ParamGroup::Connectors});
  AdamW opt(params);
  opt.step(params, [](ParamGroup) { return 0.1f; }, 0.9f, 0.999f, 1e-8f, 0.01f);
  // First step: mhat = g, vhat = g^2, update = lr (g/(|g|+eps) + wd w).
  float w0 = 1.0f - 0.1f * (0.5f / (0.5f + 1e-8f) + 0.01f * 1.0f);
  float w1 = -2.0f - 0.1f * (-0.25f / (0.25f + 1e-8f) + 0.01f * -2.0f);
  CHECK(w.data()[0] == doctest::Approx(w0).epsilon(1e-5));
  CHECK(w.data()[1] == doctest::Approx(w1).epsilon(1e-5));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("gradient clipping caps the global norm") {
  Tensor a = Tensor::from({2}, {0.0f, 0.0f}, true);
  Tensor b = Tensor::from({1}, {0.0f}, true);
  a.grad() = {3.0f, 0.0f};
  b.grad() = {4.0f};
  nn::ParamList params;
  params.push_back({a, "a", ParamGroup::Connectors});
  params.push_back({b, "b", ParamGroup::Connectors});
  CHECK(global_grad_norm(params) == doctest::Approx(5.0f));
  clip_gradients(params, 1.0f);
  CHECK(global_grad_norm(params) == doctest::Approx(1.0f));
  CHECK(a.grad()[0] == doctest::Approx(0.6f));
  CHECK(b.grad()[0] == doctest::Approx(0.8f));
}

TEST_CASE("train_step loss bookkeeping per stage") {
  std::mt19937_64 data_rng(5);
  Model model(tiny_model_cfg(), tiny_tokenizer(), 2);
  auto batch = tiny_batch(model.tokenizer, data_rng);

  auto run = [&](Stage st) {
    StageConfig cfg = StageConfig::defaults(st);
    cfg.batch_size = 1;
    apply_freeze(cfg, model);
    AdamW opt(model.params);
    std::mt19937_64 rn(1), rc(2);
    return train_step(model, batch, cfg, opt, rn, rc, /*update=*/false);
  };

  auto s1 = run(Stage::S1);
  CHECK(s1.ntp > 0.0f);
  CHECK(s1.nip_images == 1);  // first image excluded
  CHECK(s1.csr_images == 2);  // every image gets csr in stage one
  CHECK(s1.nip > 0.0f);
  CHECK(s1.csr > 0.0f);
  CHECK(s1.total ==
        doctest::Approx(s1.ntp + 5.0f * (s1.nip + s1.csr)).epsilon(1e-5));

  auto s2 = run(Stage::S2);
  CHECK(s2.nip_images == 0);
  CHECK(s2.csr_images == 2);
  CHECK(s2.nip == 0.0f);

  auto s3 = run(Stage::S3);
  CHECK(s3.nip_images == 0);
  CHECK(s3.csr_images == 0);
  CHECK(s3.total == doctest::Approx(s3.ntp));
}

TEST_CASE("a batch whose only image starts the sequence gets no nip") {
  std::mt19937_64 data_rng(6);
  Model model(tiny_model_cfg(), tiny_tokenizer(), 3);
  InterleavedDocument doc;
  doc.doc_id = "d";
  doc.elements.push_back(tiny_image(data_rng));
  doc.elements.push_back(TextSpan{"a red circle"});
  auto batch = std::vector<PackedSequence>{assemble(doc, model.tokenizer, 2)};
  StageConfig cfg = StageConfig::defaults(Stage::S1);
  apply_freeze(cfg, model);
  AdamW opt(model.params);
  std::mt19937_64 rn(1), rc(2);
  auto out = train_step(model, batch, cfg, opt, rn, rc, false);
  CHECK(out.nip_images == 0);
  CHECK(out.nip == 0.0f);
  CHECK(out.csr_images == 1);
  CHECK(out.csr > 0.0f);
}

TEST_CASE("frozen groups are bit-identical after ten update steps") {
  std::mt19937_64 data_rng(7);
  Model model(tiny_model_cfg(), tiny_tokenizer(), 4);
  StageConfig cfg = StageConfig::defaults(Stage::S1);
  cfg.warmup_steps = 2;
  cfg.total_steps = 10;
  apply_freeze(cfg, model);
  auto llm_before = snapshot(model.params, ParamGroup::LLM);
  auto dm_before = snapshot(model.params, ParamGroup::DM);
  auto vfm_before = snapshot(model.params, ParamGroup::VFM);
  auto conn_before = snapshot(model.params, ParamGroup::Connectors);

  AdamW opt(model.params);
  std::mt19937_64 rn(1), rc(2);
  for (int i = 0; i < 10; ++i) {
    auto batch = tiny_batch(model.tokenizer, data_rng);
    train_step(model, batch, cfg, opt, rn, rc, true);
  }
  CHECK(snapshot(model.params, ParamGroup::LLM) == llm_before);
  CHECK(snapshot(model.params, ParamGroup::DM) == dm_before);
  CHECK(snapshot(model.params, ParamGroup::VFM) != vfm_before);
  CHECK(snapshot(model.params, ParamGroup::Connectors) != conn_before);
}

TEST_CASE("training is deterministic end to end") {
  auto run = [&] {
    std::mt19937_64 data_rng(8);
    Model model(tiny_model_cfg(), tiny_tokenizer(), 5);
    StageConfig cfg = StageConfig::defaults(Stage::S1);
    apply_freeze(cfg, model);
    AdamW opt(model.params);
    std::mt19937_64 rn(1), rc(2);
    std::vector<float> totals;
    for (int i = 0; i < 5; ++i) {
      auto batch = tiny_batch(model.tokenizer, data_rng);
      totals.push_back(train_step(model, batch, cfg, opt, rn, rc, true).total);
    }
    return totals;
  };
  CHECK(run() == run());
}

TEST_CASE("csr disabled and csr weight zero take identical update steps") {
  auto run = [&](bool enabled) {
    std::mt19937_64 data_rng(9);
    Model model(tiny_model_cfg(), tiny_tokenizer(), 6);
    StageConfig cfg = StageConfig::defaults(Stage::S1);
    cfg.csr_enabled = enabled;
    cfg.csr_weight = enabled ? 0.0f : 1.0f;
    apply_freeze(cfg, model);
    AdamW opt(model.params);
    std::mt19937_64 rn(1), rc(2);
    for (int i = 0; i < 3; ++i) {
      auto batch = tiny_batch(model.tokenizer, data_rng);
      train_step(model, batch, cfg, opt, rn, rc, true);
    }
    std::vector<float> all;
    for (const auto& p : model.params)
      all.insert(all.end(), p.t.data().begin(), p.t.data().end());
    return all;
  };
  CHECK(run(true) == run(false));
}

TEST_CASE("warmup and cosine schedule endpoints") {
  StageConfig cfg = StageConfig::defaults(Stage::S1);
  cfg.warmup_steps = 10;
  cfg.total_steps = 110;
  const float peak = 1e-3f;
  CHECK(lr_at(cfg, 0, peak) == 0.0f);
  CHECK(lr_at(cfg, 5, peak) == doctest::Approx(peak * 0.5f));
  CHECK(lr_at(cfg, 10, peak) == doctest::Approx(peak));
  CHECK(lr_at(cfg, 60, peak) == doctest::Approx(peak * 0.5f).epsilon(1e-3));
  CHECK(lr_at(cfg, 110, peak) == doctest::Approx(0.0f).epsilon(1e-6));
  // Monotone decay after warmup.
  float prev = lr_at(cfg, 10, peak);
  for (int s = 11; s <= 110; ++s) {
    float cur = lr_at(cfg, s, peak);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("checkpoint round trip preserves params and optimizer state") {
  namespace fs = std::filesystem;
  std::mt19937_64 data_rng(10);
  Model model(tiny_model_cfg(), tiny_tokenizer(), 7);
  StageConfig cfg = StageConfig::defaults(Stage::S1);
  apply_freeze(cfg, model);
  AdamW opt(model.params);
  std::mt19937_64 rn(1), rc(2);
  for (int i = 0; i < 2; ++i)
    train_step(model, tiny_batch(model.tokenizer, data_rng), cfg, opt, rn, rc,
               true);

  fs::path dir = fs::temp_directory_path() / "weave_ckpt_test";
  fs::create_directories(dir);
  fs::path path = dir / "m.ckpt";
  save_checkpoint(path, model, &opt, &cfg);

  AdamW opt2;
  Model back = load_checkpoint(path, 0, &opt2);
  REQUIRE(back.params.size() == model.params.size());
  for (size_t i = 0; i < model.params.size(); ++i) {
    CHECK(back.params[i].name == model.params[i].name);
    CHECK(back.params[i].t.data() == model.params[i].t.data());
  }
  CHECK(opt2.step_count() == opt.step_count());
  CHECK(opt2.m == opt.m);
  CHECK(opt2.v == opt.v);

  // Training resumed from the checkpoint matches training continued in place.
  std::mt19937_64 rn2 = rn, rc2 = rc;
  std::mt19937_64 dr1 = data_rng, dr2 = data_rng;
  apply_freeze(cfg, back);
  auto a = train_step(model, tiny_batch(model.tokenizer, dr1), cfg, opt, rn, rc, true);
  auto b = train_step(back, tiny_batch(back.tokenizer, dr2), cfg, opt2, rn2, rc2, true);
  CHECK(a.total == doctest::Approx(b.total).epsilon(1e-6));
}

TEST_CASE("run_stage writes metrics and a checkpoint and the loss moves") {
  namespace fs = std::filesystem;
  std::mt19937_64 data_rng(11);
  Model model(tiny_model_cfg(), tiny_tokenizer(), 8);
  std::vector<PackedSequence> frags;
  for (int i = 0; i < 4; ++i) {
    auto b = tiny_batch(model.tokenizer, data_rng);
    frags.insert(frags.end(), b.begin(), b.end());
  }
  StageConfig cfg = StageConfig::defaults(Stage::S3);
  cfg.total_steps = 8;
  cfg.warmup_steps = 2;
  cfg.batch_size = 2;
  cfg.log_every = 1;
  DataLoader loader(frags, model.cfg.max_len, cfg.cfg_dropout_p,
                    std::mt19937_64(12));
  fs::path dir = fs::temp_directory_path() / "weave_stage_test";
  fs::remove_all(dir);
  RngPool pool(123);
  auto res = run_stage(model, loader, cfg, dir, pool);
  CHECK(fs::exists(res.checkpoint));
  CHECK(fs::exists(res.metrics));
  CHECK(res.last.total > 0.0f);
  // Metrics file has one json record per logged step.
  std::ifstream f(res.metrics);
  int lines = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 8);
}
