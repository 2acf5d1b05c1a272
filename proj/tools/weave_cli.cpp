// SPDX-License-Identifier: Apache-2.0
//
// Single entry point for the pipeline: synthetic data generation, staged
// training, generation, reconstruction, benchmark build and evaluation.
// Exit codes: 0 ok, 1 usage or validation error, 2 data error, 3 numeric
// failure. Every command echoes its resolved configuration and seed into
// the output directory as manifest.json.

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "weave/generate.hpp"
#include "weave/robustvqa.hpp"
#include "weave/sequence.hpp"
#include "weave/synth.hpp"
#include "weave/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace weave;

namespace {

constexpr const char* kEnvPrefix = "WEAVE_";

// Flat key/value file with [s1]/[s2]/[s3] stage tables. '#' starts a
// comment; unknown keys are rejected. Environment variables override file
// values: WEAVE_<KEY> for top-level keys, WEAVE_S1_<KEY> for stage keys.
struct RunConfig {
  uint64_t seed = 7;
  std::string train_docs;
  ModelConfig model;
  StageConfig stages[3] = {StageConfig::defaults(Stage::S1),
                           StageConfig::defaults(Stage::S2),
                           StageConfig::defaults(Stage::S3)};

  json to_json() const {
    json j;
    j["seed"] = seed;
    j["train_docs"] = train_docs;
    j["model"] = model.to_json();
    j["s1"] = stages[0].to_json();
    j["s2"] = stages[1].to_json();
    j["s3"] = stages[2].to_json();
    return j;
  }
};

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("boolean expected, got '" + v + "'");
}

// Applies one key to the config; throws invalid_argument on unknown keys.
void apply_key(RunConfig& rc, const std::string& section, const std::string& key,
               const std::string& value) {
  auto f = [&] { return std::stof(value); };
  auto i = [&] { return std::stoi(value); };
  if (section.empty()) {
    ModelConfig& m = rc.model;
    if (key == "seed") rc.seed = std::stoull(value);
    else if (key == "train_docs") rc.train_docs = value;
    else if (key == "dim") m.dim = i();
    else if (key == "lm_layers") m.lm_layers = i();
    else if (key == "lm_heads") m.lm_heads = i();
    else if (key == "max_len") m.max_len = i();
    else if (key == "tied_head") m.tied_head = parse_bool(value);
    else if (key == "enc_stride") m.enc_stride = i();
    else if (key == "resampler_depth") m.resampler_depth = i();
    else if (key == "resampler_heads") m.resampler_heads = i();
    else if (key == "m_llm") m.m_llm = i();
    else if (key == "m_enc") m.m_enc = i();
    else if (key == "dm_timesteps") m.dm_timesteps = i();
    else if (key == "dm_base_channels") m.dm_base_channels = i();
    else if (key == "dm_null_tokens") m.dm_null_tokens = i();
    else if (key == "guidance_scale") m.guidance_scale = f();
    else if (key == "resolution") m.resolution = i();
    else
      throw std::invalid_argument("unknown config key: " + key);
    return;
  }
  int idx = section == "s1" ? 0 : section == "s2" ? 1 : section == "s3" ? 2 : -1;
  if (idx < 0) throw std::invalid_argument("unknown config section: " + section);
  StageConfig& sc = rc.stages[idx];
  if (key == "lambda") sc.lambda = f();
  else if (key == "lr_encoder_decoder") sc.lr_encoder_decoder = f();
  else if (key == "lr_language_model") sc.lr_language_model = f();
  else if (key == "lr_others") sc.lr_others = f();
  else if (key == "warmup_steps") sc.warmup_steps = i();
  else if (key == "total_steps") sc.total_steps = i();
  else if (key == "batch_size") sc.batch_size = i();
  else if (key == "adam_beta1") sc.adam_beta1 = f();
  else if (key == "adam_beta2") sc.adam_beta2 = f();
  else if (key == "adam_eps") sc.adam_eps = f();
  else if (key == "weight_decay") sc.weight_decay = f();
  else if (key == "grad_clip") sc.grad_clip = f();
  else if (key == "cfg_dropout_p") sc.cfg_dropout_p = f();
  else if (key == "input_resolution") sc.input_resolution = i();
  else if (key == "csr_enabled") sc.csr_enabled = parse_bool(value);
  else if (key == "csr_weight") sc.csr_weight = f();
  else if (key == "checkpoint_every") sc.checkpoint_every = i();
  else if (key == "log_every") sc.log_every = i();
  else
    throw std::invalid_argument("unknown config key: " + section + "." + key);
}

const std::vector<std::string>& top_level_keys() {
  static const std::vector<std::string> k = {
      "seed", "train_docs", "dim", "lm_layers", "lm_heads", "max_len",
      "tied_head", "enc_stride", "resampler_depth", "resampler_heads",
      "m_llm", "m_enc", "dm_timesteps", "dm_base_channels", "dm_null_tokens",
      "guidance_scale", "resolution"};
  return k;
}

const std::vector<std::string>& stage_keys() {
  static const std::vector<std::string> k = {
      "lambda", "lr_encoder_decoder", "lr_language_model", "lr_others",
      "warmup_steps", "total_steps", "batch_size", "adam_beta1", "adam_beta2",
      "adam_eps", "weight_decay", "grad_clip", "cfg_dropout_p",
      "input_resolution", "csr_enabled", "csr_weight", "checkpoint_every",
      "log_every"};
  return k;
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

void apply_env_overrides(RunConfig& rc) {
  for (const auto& key : top_level_keys())
    if (const char* v = std::getenv((kEnvPrefix + upper(key)).c_str()))
      apply_key(rc, "", key, v);
  for (const std::string section : {"s1", "s2", "s3"})
    for (const auto& key : stage_keys())
      if (const char* v = std::getenv(
              (kEnvPrefix + upper(section) + "_" + upper(key)).c_str()))
        apply_key(rc, section, key, v);
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path.string());
  RunConfig rc;
  std::string line, section;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (auto pos = line.find('#'); pos != std::string::npos) line.erase(pos);
    std::string trimmed;
    std::istringstream is(line);
    std::string word;
    while (is >> word) trimmed += (trimmed.empty() ? "" : " ") + word;
    if (trimmed.empty()) continue;
    if (trimmed.front() == '[' && trimmed.back() == ']') {
      section = trimmed.substr(1, trimmed.size() - 2);
      continue;
    }
    auto eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path.string() + ":" +
                                  std::to_string(lineno) + ": expected key = value");
    std::string key = trimmed.substr(0, eq);
    std::string value = trimmed.substr(eq + 1);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    while (!value.empty() && value.front() == ' ') value.erase(value.begin());
    apply_key(rc, section, key, value);
  }
  apply_env_overrides(rc);
  return rc;
}

void write_manifest(const fs::path& out_dir, const std::string& command,
                    uint64_t seed, const json& resolved) {
  fs::create_directories(out_dir);
  json m;
  m["command"] = command;
  m["seed"] = seed;
  m["config"] = resolved;
  std::ofstream f(out_dir / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest");
  f << m.dump(2) << "\n";
}

ImageRecord load_image(const fs::path& path) {
  std::vector<int> shape;
  std::vector<float> data;
  read_tensor_file(path, shape, data);
  if (shape.size() != 3 || shape[2] != 3)
    throw std::runtime_error("expected HxWx3 tensor: " + path.string());
  ImageRecord img;
  img.height = shape[0];
  img.width = shape[1];
  img.pixels = std::move(data);
  validate_image(img);
  return img;
}

void save_image(const fs::path& stem, const ImageRecord& img) {
  write_tensor_file(fs::path(stem.string() + ".bin"),
                    {img.height, img.width, 3}, img.pixels);
  write_ppm(fs::path(stem.string() + ".ppm"), img);
}

int cmd_synth_data(int n_train, int n_ood, uint64_t seed, int size,
                   const fs::path& out) {
  SynthConfig cfg;
  cfg.n_train = n_train;
  cfg.n_ood = n_ood;
  cfg.seed = seed;
  cfg.size = size;
  SynthDataset ds = make_synth_dataset(cfg);
  write_synth_dataset(out, ds);
  json resolved = {{"n_train", n_train}, {"n_ood", n_ood}, {"size", size}};
  write_manifest(out, "synth-data", seed, resolved);
  std::cout << "wrote " << ds.train_docs.size() << " train docs, "
            << ds.ood.size() << " ood items to " << out.string() << "\n";
  return 0;
}

int cmd_train(const fs::path& config_path, const std::string& stage_name_str,
              const fs::path& out, const std::string& init_ckpt) {
  RunConfig rc = load_run_config(config_path);
  if (rc.train_docs.empty())
    throw std::invalid_argument("config missing train_docs");
  Stage stage = stage_from_name(upper(stage_name_str));
  StageConfig cfg = rc.stages[static_cast<int>(stage)];
  cfg.stage = stage;
  cfg.validate();

  std::vector<InterleavedDocument> docs = deserialize_docs(rc.train_docs);
  if (docs.empty()) throw std::runtime_error("empty training corpus");

  Model model = [&] {
    if (!init_ckpt.empty()) return load_checkpoint(init_ckpt, rc.seed);
    std::vector<std::string> corpus;
    for (const auto& d : docs)
      for (const auto& el : d.elements)
        if (const auto* t = std::get_if<TextSpan>(&el)) corpus.push_back(t->text);
    return Model(rc.model, Tokenizer::build(corpus), rc.seed);
  }();

  std::vector<PackedSequence> frags;
  frags.reserve(docs.size());
  for (const auto& d : docs)
    frags.push_back(assemble(d, model.tokenizer, model.cfg.m_llm));

  RngPool pool(rc.seed);
  DataLoader loader(std::move(frags), model.cfg.max_len, cfg.cfg_dropout_p,
                    pool.stream("cli.loader"));
  apply_freeze(cfg, model);
  write_manifest(out, "train " + stage_name_str, rc.seed, rc.to_json());
  StageRunResult res = run_stage(model, loader, cfg, out, pool);
  std::cout << "checkpoint: " << res.checkpoint.string() << "\n"
            << "final loss: " << res.last.total << "\n";
  return 0;
}

int cmd_generate(const fs::path& ckpt, const std::string& prompt,
                 const std::vector<std::string>& images, uint64_t seed,
                 const GenerateOptions& opts, const fs::path& out) {
  Model model = load_checkpoint(ckpt, seed);
  InterleavedDocument doc;
  doc.doc_id = "cli_prompt";
  for (const auto& p : images) doc.elements.push_back(load_image(p));
  if (!prompt.empty()) doc.elements.push_back(TextSpan{prompt});
  if (doc.elements.empty())
    throw std::invalid_argument("empty prompt: give --prompt and/or --image");

  GenerateResult res = generate(model, doc, opts, RngPool(seed));
  fs::create_directories(out);
  std::ofstream txt(out / "transcript.txt");
  txt << res.text << "\n";
  for (size_t k = 0; k < res.images.size(); ++k)
    save_image(out / ("image_" + std::to_string(k)), res.images[k]);
  json resolved = {{"checkpoint", ckpt.string()},
                   {"prompt", prompt},
                   {"temperature", opts.temperature},
                   {"top_k", opts.top_k},
                   {"max_new_tokens", opts.max_new_tokens},
                   {"max_images", opts.max_images}};
  write_manifest(out, "generate", seed, resolved);
  std::cout << res.text << "\n"
            << "images: " << res.images.size()
            << " sampler calls: " << res.sampler_calls << "\n";
  return 0;
}

int cmd_reconstruct(const fs::path& ckpt, const fs::path& image_path,
                    float noise_frac, uint64_t seed, const fs::path& out) {
  if (noise_frac < 0.0f || noise_frac > 1.0f)
    throw std::invalid_argument("noise_frac must be in [0,1]");
  Model model = load_checkpoint(ckpt, seed);
  ImageRecord img = load_image(image_path);
  DiffusionCondition cond = model.encoder_condition(img);
  auto rng = RngPool(seed).stream("cli.reconstruct");
  ImageRecord rec = model.diffusion.reconstruct_partial(img, noise_frac, cond, rng);
  fs::create_directories(out);
  save_image(out / "reconstruction", rec);
  json resolved = {{"checkpoint", ckpt.string()},
                   {"image", image_path.string()},
                   {"noise_frac", noise_frac}};
  write_manifest(out, "reconstruct", seed, resolved);
  std::cout << "wrote " << (out / "reconstruction.ppm").string() << "\n";
  return 0;
}

// Labels file: one json record per line {image_ref, gt_label, embedding}.
// Embeddings file: one record per line {label, embedding}.
int cmd_build_benchmark(const fs::path& labels_path, const fs::path& emb_path,
                        const std::string& format, const fs::path& out_file) {
  std::ifstream lf(labels_path);
  if (!lf) throw std::runtime_error("cannot open " + labels_path.string());
  std::ifstream ef(emb_path);
  if (!ef) throw std::runtime_error("cannot open " + emb_path.string());

  std::map<std::string, std::vector<float>> label_emb;
  std::string line;
  while (std::getline(ef, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    label_emb[j.at("label")] = j.at("embedding").get<std::vector<float>>();
  }
  std::vector<BenchmarkItem> items;
  int n = 0;
  while (std::getline(lf, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    std::string ref = j.at("image_ref");
    std::string gt = j.at("gt_label");
    auto emb = j.at("embedding").get<std::vector<float>>();
    std::string neg = mine_hard_negative(emb, gt, label_emb);
    std::string id = "item_" + std::to_string(n++);
    if (format == "yesno") {
      auto pair = render_yesno_pair(ref, gt, neg, id);
      items.insert(items.end(), pair.begin(), pair.end());
    } else if (format == "multichoice-gt-first") {
      items.push_back(render_multichoice(ref, gt, neg, ChoiceOrder::GtFirst, id));
    } else if (format == "multichoice-neg-first") {
      items.push_back(render_multichoice(ref, gt, neg, ChoiceOrder::NegFirst, id));
    } else {
      throw std::invalid_argument("unknown format: " + format);
    }
  }
  if (items.empty()) throw std::runtime_error("no labeled records in input");
  write_benchmark(out_file, items);
  std::cout << "wrote " << items.size() << " items to " << out_file.string()
            << "\n";
  return 0;
}

int cmd_answer(const fs::path& ckpt, const fs::path& bench_path,
               const fs::path& images_dir, uint64_t seed, int max_new_tokens,
               const fs::path& out_file) {
  Model model = load_checkpoint(ckpt, seed);
  std::vector<BenchmarkItem> items = read_benchmark(bench_path);
  auto lookup = [&](const std::string& ref) { return load_image(images_dir / ref); };
  auto answers =
      answer_benchmark(model, items, lookup, RngPool(seed), max_new_tokens);
  write_answers(out_file, answers);
  std::cout << "wrote " << answers.size() << " answers to " << out_file.string()
            << "\n";
  return 0;
}

int cmd_evaluate(const fs::path& bench_path, const fs::path& answers_path,
                 const fs::path& out_file) {
  std::vector<BenchmarkItem> items = read_benchmark(bench_path);
  auto answers = read_answers(answers_path);
  AccuracyReport rep = evaluate(items, answers);
  json j;
  j["total"] = rep.total;
  j["correct"] = rep.correct;
  j["unknown"] = rep.unknown;
  j["accuracy"] = rep.accuracy();
  j["positive"] = {{"total", rep.pos_total}, {"correct", rep.pos_correct}};
  j["negative"] = {{"total", rep.neg_total}, {"correct", rep.neg_correct}};
  for (const auto& [fmt, ct] : rep.per_format)
    j["per_format"][fmt] = {{"correct", ct.first}, {"total", ct.second}};
  if (!out_file.empty()) {
    std::ofstream f(out_file);
    if (!f) throw std::runtime_error("cannot write " + out_file.string());
    f << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weave: interleaved image-text modeling pipeline"};
  app.require_subcommand(1);

  // synth-data
  auto* sd = app.add_subcommand("synth-data", "generate the shapes dataset");
  int sd_train = 100, sd_ood = 20, sd_size = 32;
  uint64_t sd_seed = 7;
  std::string sd_out;
  sd->add_option("--n-train", sd_train, "train document count");
  sd->add_option("--n-ood", sd_ood, "ood item count");
  sd->add_option("--seed", sd_seed, "master seed");
  sd->add_option("--size", sd_size, "image extent");
  sd->add_option("--out", sd_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "run one training stage");
  std::string tr_config, tr_stage = "s1", tr_out, tr_init;
  tr->add_option("--config", tr_config, "run config file")->required();
  tr->add_option("--stage", tr_stage, "s1, s2 or s3");
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--init", tr_init, "initial checkpoint");

  // generate
  auto* ge = app.add_subcommand("generate", "autoregressive decoding");
  std::string ge_ckpt, ge_prompt, ge_out;
  std::vector<std::string> ge_images;
  uint64_t ge_seed = 7;
  GenerateOptions ge_opts;
  ge->add_option("--checkpoint", ge_ckpt, "model checkpoint")->required();
  ge->add_option("--prompt", ge_prompt, "text prompt");
  ge->add_option("--image", ge_images, "prompt image tensor file(s)");
  ge->add_option("--seed", ge_seed, "sampling seed");
  ge->add_option("--temperature", ge_opts.temperature, "0 = greedy");
  ge->add_option("--top-k", ge_opts.top_k, "top-k truncation");
  ge->add_option("--max-new-tokens", ge_opts.max_new_tokens, "token budget");
  ge->add_option("--max-images", ge_opts.max_images, "image budget");
  ge->add_option("--out", ge_out, "output directory")->required();

  // reconstruct
  auto* re = app.add_subcommand("reconstruct", "partial-noise reconstruction");
  std::string re_ckpt, re_image, re_out;
  float re_frac = 0.65f;
  uint64_t re_seed = 7;
  re->add_option("--checkpoint", re_ckpt, "model checkpoint")->required();
  re->add_option("--image", re_image, "input image tensor file")->required();
  re->add_option("--noise-frac", re_frac, "fraction of the schedule");
  re->add_option("--seed", re_seed, "sampling seed");
  re->add_option("--out", re_out, "output directory")->required();

  // build-benchmark
  auto* bb = app.add_subcommand("build-benchmark", "mine negatives, render items");
  std::string bb_labels, bb_emb, bb_format = "yesno", bb_out;
  bb->add_option("--labels", bb_labels, "labeled images jsonl")->required();
  bb->add_option("--embeddings", bb_emb, "label embeddings jsonl")->required();
  bb->add_option("--format", bb_format,
                 "yesno, multichoice-gt-first or multichoice-neg-first");
  bb->add_option("--out", bb_out, "benchmark file")->required();

  // answer
  auto* an = app.add_subcommand("answer", "run a checkpoint over a benchmark");
  std::string an_ckpt, an_bench, an_images, an_out;
  uint64_t an_seed = 7;
  int an_max_new = 12;
  an->add_option("--checkpoint", an_ckpt, "model checkpoint")->required();
  an->add_option("--benchmark", an_bench, "benchmark file")->required();
  an->add_option("--images", an_images, "image directory")->required();
  an->add_option("--seed", an_seed, "decoding seed");
  an->add_option("--max-new-tokens", an_max_new, "per-item token budget");
  an->add_option("--out", an_out, "answers file")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score answers against a benchmark");
  std::string ev_bench, ev_answers, ev_out;
  ev->add_option("--benchmark", ev_bench, "benchmark file")->required();
  ev->add_option("--answers", ev_answers, "answers file")->required();
  ev->add_option("--out", ev_out, "report json file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (sd->parsed()) return cmd_synth_data(sd_train, sd_ood, sd_seed, sd_size, sd_out);
    if (tr->parsed()) return cmd_train(tr_config, tr_stage, tr_out, tr_init);
    if (ge->parsed())
      return cmd_generate(ge_ckpt, ge_prompt, ge_images, ge_seed, ge_opts, ge_out);
    if (re->parsed()) return cmd_reconstruct(re_ckpt, re_image, re_frac, re_seed, re_out);
    if (bb->parsed()) return cmd_build_benchmark(bb_labels, bb_emb, bb_format, bb_out);
    if (an->parsed())
      return cmd_answer(an_ckpt, an_bench, an_images, an_seed, an_max_new, an_out);
    if (ev->parsed()) return cmd_evaluate(ev_bench, ev_answers, ev_out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    std::cerr << "error: " << msg << "\n";
    return msg.find("non-finite") != std::string::npos ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
