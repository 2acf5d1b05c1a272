// SPDX-License-Identifier: Apache-2.0
#include "weave/generate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace weave {

using nn::Tensor;

static int sample_token(const std::vector<float>& logits, float temperature,
                        int top_k, std::mt19937_64& rng) {
  const int v = static_cast<int>(logits.size());
  if (temperature <= 0.0f)
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) -
                            logits.begin());
  std::vector<int> idx(v);
  for (int i = 0; i < v; ++i) idx[i] = i;
  int k = std::min(std::max(1, top_k), v);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [&](int a, int b) { return logits[a] > logits[b]; });
  std::vector<double> p(k);
  double mx = logits[idx[0]], z = 0.0;
  for (int i = 0; i < k; ++i) {
    p[i] = std::exp((logits[idx[i]] - mx) / temperature);
    z += p[i];
  }
  double r = rand_uniform(rng) * z, acc = 0.0;
  for (int i = 0; i < k; ++i) {
    acc += p[i];
    if (r <= acc) return idx[i];
  }
  return idx[k - 1];
}

GenerateResult generate(const Model& model, const InterleavedDocument& prompt,
                        const GenerateOptions& opts, const RngPool& pool) {
  auto rng_text = pool.stream("generate.text");
  auto rng_image = pool.stream("generate.image");
  const SpecialTokens& st = model.tokenizer.special();
  const int m_llm = model.cfg.m_llm;

  PackedSequence seq = assemble(prompt, model.tokenizer, m_llm);
  std::vector<Tensor> inputs = model.image_inputs(seq);

  GenerateResult res;
  int new_tokens = 0;
  const int steps = opts.sample_steps > 0 ? opts.sample_steps
                                          : model.cfg.dm_timesteps;
  const float guidance = opts.guidance_scale >= 0.0f
                             ? opts.guidance_scale
                             : model.cfg.guidance_scale;
  std::vector<int> emitted;
  while (new_tokens < opts.max_new_tokens &&
         static_cast<int>(seq.length()) < model.cfg.max_len - (m_llm + 1)) {
    Tensor states = model.lm.decode(model.lm.embed_sequence(seq, inputs));
    const int last = states.dim(0) - 1;
    Tensor logit_row =
        model.lm.logits(nn::slice_rows(states, last, last + 1));
    // never emit the placeholder directly
    std::vector<float> logits = logit_row.data();
    logits[st.img_id] = -1e30f;
    logits[st.pad_id] = -1e30f;
    int tok = sample_token(logits, opts.temperature, opts.top_k, rng_text);
    ++new_tokens;
    if (tok == st.eos_id) break;
    if (tok == st.soi_id) {
      if (static_cast<int>(res.images.size()) >= opts.max_images) break;
      // Condition on everything up to and including the freshly placed <SOI>.
      seq.token_ids.push_back(st.soi_id);
      seq.ntp_mask.push_back(1);
      DiffusionCondition cond;
      {
        Tensor soi_emb = model.lm.embed_sequence(seq, inputs);
        Tensor soi_states = model.lm.decode(soi_emb);
        cond = model.llm_condition(soi_states, soi_states.dim(0) - 1);
      }
      ++res.sampler_calls;
      ImageRecord img = model.diffusion.sample(
          cond, steps, guidance, rng_image, model.cfg.resolution,
          model.cfg.resolution);
      int soi_pos = static_cast<int>(seq.length()) - 1;
      for (int i = 0; i < m_llm; ++i) {
        seq.token_ids.push_back(st.img_id);
        seq.ntp_mask.push_back(0);
      }
      seq.embedding_slots.push_back(
          {soi_pos + 1, static_cast<int>(seq.image_entries.size())});
      ImageEntry entry;
      entry.image = img;
      seq.image_entries.push_back(entry);
      inputs.push_back(model.image_input_tokens(img));
      res.images.push_back(std::move(img));
    } else {
      seq.token_ids.push_back(tok);
      seq.ntp_mask.push_back(1);
      emitted.push_back(tok);
    }
  }
  res.token_ids = seq.token_ids;
  res.text = model.tokenizer.decode(emitted);
  return res;
}

std::map<std::string, std::string> answer_benchmark(
    const Model& model, const std::vector<BenchmarkItem>& items,
    const std::function<ImageRecord(const std::string&)>& image_lookup,
    const RngPool& pool, int max_new_tokens) {
  GenerateOptions opts;
  opts.temperature = 0.0f;  // deterministic evaluation
  opts.max_new_tokens = max_new_tokens;
  opts.max_images = 0;
  std::map<std::string, std::string> answers;
  for (const auto& item : items) {
    InterleavedDocument prompt;
    prompt.doc_id = item.item_id;
    prompt.elements = {image_lookup(item.image_ref), TextSpan{item.question}};
    answers[item.item_id] = generate(model, prompt, opts, pool).text;
  }
  return answers;
}

}  // namespace weave
