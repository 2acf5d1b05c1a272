// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>

#include "weave/core/rng.hpp"
#include "weave/model.hpp"
#include "weave/robustvqa.hpp"

namespace weave {

struct GenerateOptions {
  float temperature = 1.0f;  // 0 = greedy
  int top_k = 50;
  int max_new_tokens = 64;
  int max_images = 2;
  int sample_steps = 0;       // 0 = full schedule
  float guidance_scale = -1.0f;  // < 0 = model default
};

struct GenerateResult {
  std::vector<int> token_ids;   // full transcript including the prompt
  std::string text;             // decoded new text
  std::vector<ImageRecord> images;  // generated images, in emission order
  int sampler_calls = 0;
};

// Autoregressive decoding over mixed text/image context. When the model
// emits <SOI>, the diffusion sampler is called once, conditioned on the
// resampled decoder states; the generated image is encoded and re-inserted
// as an <IMG> run, then decoding resumes.
GenerateResult generate(const Model& model, const InterleavedDocument& prompt,
                        const GenerateOptions& opts, const RngPool& pool);

// Greedy answers for a benchmark: prompt = [image, question], short decode,
// raw text keyed by item id.
std::map<std::string, std::string> answer_benchmark(
    const Model& model, const std::vector<BenchmarkItem>& items,
    const std::function<ImageRecord(const std::string&)>& image_lookup,
    const RngPool& pool, int max_new_tokens = 4);

}  // namespace weave
