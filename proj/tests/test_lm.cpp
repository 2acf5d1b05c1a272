// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "weave/lm.hpp"

using namespace weave;
using nn::Tensor;

namespace {

LmConfig small_cfg(int vocab = 20) {
  LmConfig c;
  c.vocab = vocab;
  c.dim = 16;
  c.layers = 2;
  c.heads = 2;
  c.max_len = 32;
  return c;
}

PackedSequence text_seq(std::vector<int> ids) {
  PackedSequence s;
  s.token_ids = std::move(ids);
  s.ntp_mask.assign(s.token_ids.size(), 1);
  return s;
}

}  // namespace

TEST_CASE("decode is causal: perturbing position j leaves states before j") {
  std::mt19937_64 rng(1);
  LanguageModel lm(small_cfg(), rng);
  PackedSequence seq = text_seq({4, 7, 2, 9, 11, 5});
  Tensor emb = lm.embed_sequence(seq, {});
  Tensor states = lm.decode(emb);

  PackedSequence seq2 = seq;
  seq2.token_ids[3] = 17;
  Tensor states2 = lm.decode(lm.embed_sequence(seq2, {}));

  int C = lm.config().dim;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < C; ++j)
      CHECK(states.data()[i * C + j] == states2.data()[i * C + j]);
  bool later_changed = false;
  for (int i = 3; i < 6; ++i)
    for (int j = 0; j < C; ++j)
      later_changed |= states.data()[i * C + j] != states2.data()[i * C + j];
  CHECK(later_changed);
}

TEST_CASE("shared prefixes yield identical prefix states") {
  std::mt19937_64 rng(2);
  LanguageModel lm(small_cfg(), rng);
  Tensor a = lm.decode(lm.embed_sequence(text_seq({4, 7, 2, 9}), {}));
  Tensor b = lm.decode(lm.embed_sequence(text_seq({4, 7, 2, 13, 6}), {}));
  int C = lm.config().dim;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < C; ++j)
      CHECK(a.data()[i * C + j] == b.data()[i * C + j]);
}

TEST_CASE("embed_sequence overwrites IMG runs, checks slot counts") {
  std::mt19937_64 rng(3);
  LanguageModel lm(small_cfg(), rng);
  SpecialTokens st;
  PackedSequence seq;
  seq.token_ids = {st.soi_id, st.img_id, st.img_id, 5, 6};
  seq.ntp_mask = {1, 0, 0, 1, 1};
  seq.embedding_slots = {{1, 0}};
  seq.image_entries.resize(1);

  Tensor img_tok = Tensor::zeros({2, 16});
  for (auto& v : img_tok.data()) v = 0.37f;
  Tensor emb = lm.embed_sequence(seq, {img_tok});
  CHECK(emb.shape() == std::vector<int>{5, 16});

  // Positions 1..2 equal the image tokens plus positional embeddings, so
  // subtracting positions recovers 0.37 exactly at those slots.
  Tensor emb0 = lm.embed_sequence(seq, {Tensor::zeros({2, 16})});
  for (int i = 1; i <= 2; ++i)
    for (int j = 0; j < 16; ++j)
      CHECK(emb.data()[i * 16 + j] - emb0.data()[i * 16 + j] ==
            doctest::Approx(0.37f));

  CHECK_THROWS_AS(lm.embed_sequence(seq, {}), std::invalid_argument);
  CHECK_THROWS_AS(lm.embed_sequence(seq, {img_tok, img_tok}),
                  std::invalid_argument);
}

TEST_CASE("ntp_loss matches a hand-rolled shifted cross entropy") {
  std::mt19937_64 rng(4);
  LmConfig cfg = small_cfg(11);
  LanguageModel lm(cfg, rng);
  PackedSequence seq = text_seq({1, 5, 2, 8, 3});
  seq.ntp_mask = {1, 1, 0, 1, 1};
  Tensor states = lm.decode(lm.embed_sequence(seq, {}));
  float got = lm.ntp_loss(states, seq.token_ids, seq.ntp_mask).item();

  // Oracle: CE of logits(states[i]) vs token i+1, over i+1 with mask 1.
  Tensor lg = lm.logits(states);
  int V = cfg.vocab;
  double total = 0;
  int n = 0;
  for (int i = 0; i + 1 < 5; ++i) {
    if (!seq.ntp_mask[i + 1]) continue;
    double mx = -1e30;
    for (int c = 0; c < V; ++c) mx = std::max(mx, (double)lg.data()[i * V + c]);
    double z = 0;
    for (int c = 0; c < V; ++c) z += std::exp(lg.data()[i * V + c] - mx);
    total += mx + std::log(z) - lg.data()[i * V + seq.token_ids[i + 1]];
    ++n;
  }
  CHECK(got == doctest::Approx(total / n).epsilon(1e-5));
}

TEST_CASE("ntp_loss degenerate inputs") {
  std::mt19937_64 rng(5);
  LanguageModel lm(small_cfg(), rng);
  PackedSequence one = text_seq({4});
  Tensor states = lm.decode(lm.embed_sequence(one, {}));
  int starved = 0;
  CHECK(lm.ntp_loss(states, one.token_ids, one.ntp_mask, &starved).item() == 0.0f);
  CHECK(starved == 1);

  // Mask all zero.
  PackedSequence seq = text_seq({4, 5, 6});
  seq.ntp_mask = {0, 0, 0};
  states = lm.decode(lm.embed_sequence(seq, {}));
  starved = 0;
  CHECK(lm.ntp_loss(states, seq.token_ids, seq.ntp_mask, &starved).item() == 0.0f);
  CHECK(starved == 1);
}

TEST_CASE("padding after the supervised region does not change the loss") {
  std::mt19937_64 rng(6);
  LanguageModel lm(small_cfg(), rng);
  PackedSequence seq = text_seq({4, 7, 2, 9});
  Tensor s1 = lm.decode(lm.embed_sequence(seq, {}));
  float l1 = lm.ntp_loss(s1, seq.token_ids, seq.ntp_mask).item();

  PackedSequence padded = seq;
  SpecialTokens st;
  padded.token_ids.push_back(st.pad_id);
  padded.token_ids.push_back(st.pad_id);
  padded.ntp_mask.push_back(0);
  padded.ntp_mask.push_back(0);
  Tensor s2 = lm.decode(lm.embed_sequence(padded, {}));
  float l2 = lm.ntp_loss(s2, padded.token_ids, padded.ntp_mask).item();
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-6));
}

TEST_CASE("gradient check through the full decoder stack") {
  std::mt19937_64 rng(7);
  LmConfig cfg = small_cfg(9);
  cfg.layers = 1;
  LanguageModel lm(cfg, rng);
  PackedSequence seq = text_seq({1, 5, 2, 8, 3, 0, 4, 7, 6, 2, 1, 5});  // K=12

  Tensor probe = Tensor::zeros({12, cfg.dim}, true);
  testutil::fill_normal(probe, rng, 0.1f);
  auto loss = [&] {
    Tensor emb = nn::add(lm.embed_sequence(seq, {}), probe);
    Tensor states = lm.decode(emb);
    return lm.ntp_loss(states, seq.token_ids, seq.ntp_mask);
  };
  std::vector<size_t> coords;
  for (size_t i = 0; i < probe.numel(); i += 17) coords.push_back(i);
  CHECK(testutil::grad_check(loss, probe, coords) < 1e-2);
}

TEST_CASE("tied head uses the word embedding matrix") {
  std::mt19937_64 rng(8);
  LmConfig cfg = small_cfg();
  cfg.tied_head = true;
  LanguageModel lm(cfg, rng);
  nn::ParamList params;
  lm.register_params(params);
  // No separate head weight registered when tied.
  for (const auto& p : params) CHECK(p.name.find("head.w") == std::string::npos);
  PackedSequence seq = text_seq({4, 7});
  Tensor lg = lm.logits(lm.decode(lm.embed_sequence(seq, {})));
  CHECK(lg.shape() == std::vector<int>{2, cfg.vocab});
}
