// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "weave/core/rng.hpp"
#include "weave/datamodel.hpp"
#include "weave/robustvqa.hpp"

namespace weave {

// Labeled geometric-shape renderer: shape x color x texture. The training
// split pairs each shape with its own colors and the solid/striped textures;
// the out-of-distribution split uses the held-out dotted texture, so only
// perception that transfers across textures scores above chance.
struct SynthConfig {
  int n_train = 100;
  int n_ood = 20;
  uint64_t seed = 7;
  int size = 32;
};

const std::vector<std::string>& shape_names();    // circle, square, triangle
const std::vector<std::string>& color_names();    // 6 colors
const std::vector<std::string>& texture_names();  // solid, striped, dotted

std::vector<std::pair<int, int>> train_attribute_combos(int shape);  // (color, texture)
std::vector<std::pair<int, int>> ood_attribute_combos(int shape);

ImageRecord render_shape(int shape, int color, int texture, int size,
                         std::mt19937_64& rng);

// 8x8x3 average-pool fingerprint; model-independent, used for benchmark
// hard-negative mining so both ablation arms see the same item set.
std::vector<float> pixel_embedding(const ImageRecord& img);

struct OodItem {
  ImageRecord image;
  std::string gt_label;
  std::vector<float> embedding;
  std::string ref;  // relative tensor file reference once written
};

struct SynthDataset {
  std::vector<InterleavedDocument> train_docs;  // caption pairs + QA docs
  std::vector<OodItem> ood;
  std::map<std::string, std::vector<float>> label_embeddings;  // prototypes
};

// Caption pair docs ("a photo of a <color> <texture> <shape>") plus yes/no
// QA docs using the benchmark question template with the answer appended,
// so the evaluation vocabulary is learnable from the corpus.
SynthDataset make_synth_dataset(const SynthConfig& cfg);

// Writes train docs (line-delimited), OOD items + embeddings, and label
// prototypes under dir. Deterministic under the config seed.
void write_synth_dataset(const std::filesystem::path& dir,
                         const SynthDataset& ds);
SynthDataset read_synth_dataset(const std::filesystem::path& dir);

// Paired yes/no benchmark over the OOD split with mined hard negatives.
std::vector<BenchmarkItem> build_ood_benchmark(const SynthDataset& ds);

// Corpus string list for tokenizer construction.
std::vector<std::string> corpus_texts(const SynthDataset& ds);

}  // namespace weave
