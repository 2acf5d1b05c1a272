// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "weave/datamodel.hpp"
#include "weave/synth.hpp"

using namespace weave;
namespace fs = std::filesystem;

namespace {
SynthConfig small_cfg(uint64_t seed = 5) {
  SynthConfig cfg;
  cfg.n_train = 15;
  cfg.n_ood = 9;
  cfg.seed = seed;
  cfg.size = 16;
  return cfg;
}
}  // namespace

TEST_CASE("dataset generation is deterministic under the seed") {
  SynthDataset a = make_synth_dataset(small_cfg());
  SynthDataset b = make_synth_dataset(small_cfg());
  REQUIRE(a.train_docs.size() == b.train_docs.size());
  for (size_t i = 0; i < a.train_docs.size(); ++i)
    CHECK(documents_equal(a.train_docs[i], b.train_docs[i]));
  REQUIRE(a.ood.size() == b.ood.size());
  for (size_t i = 0; i < a.ood.size(); ++i) {
    CHECK(images_equal(a.ood[i].image, b.ood[i].image));
    CHECK(a.ood[i].gt_label == b.ood[i].gt_label);
  }
  SynthDataset c = make_synth_dataset(small_cfg(6));
  bool any_diff = false;
  for (size_t i = 0; i < c.ood.size(); ++i)
    any_diff |= !images_equal(a.ood[i].image, c.ood[i].image);
  CHECK(any_diff);
}

TEST_CASE("train and ood attribute combos are disjoint per shape") {
  for (int shape = 0; shape < 3; ++shape) {
    std::set<std::pair<int, int>> train;
    for (auto p : train_attribute_combos(shape)) train.insert(p);
    CHECK(!train.empty());
    for (auto p : ood_attribute_combos(shape)) CHECK(train.count(p) == 0);
  }
}

TEST_CASE("regeneration writes byte-identical files") {
  fs::path dir1 = fs::temp_directory_path() / "weave_synth_t1";
  fs::path dir2 = fs::temp_directory_path() / "weave_synth_t2";
  fs::remove_all(dir1);
  fs::remove_all(dir2);
  write_synth_dataset(dir1, make_synth_dataset(small_cfg()));
  write_synth_dataset(dir2, make_synth_dataset(small_cfg()));
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir1)) {
    if (!e.is_regular_file()) continue;
    ++files;
    fs::path rel = fs::relative(e.path(), dir1);
    CHECK(fnv1a_file(e.path()) == fnv1a_file(dir2 / rel));
  }
  CHECK(files > 3);
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("write/read round trip preserves the dataset") {
  fs::path dir = fs::temp_directory_path() / "weave_synth_rt";
  fs::remove_all(dir);
  SynthDataset ds = make_synth_dataset(small_cfg());
  write_synth_dataset(dir, ds);
  SynthDataset back = read_synth_dataset(dir);
  REQUIRE(back.train_docs.size() == ds.train_docs.size());
  for (size_t i = 0; i < ds.train_docs.size(); ++i)
    CHECK(documents_equal(ds.train_docs[i], back.train_docs[i]));
  REQUIRE(back.ood.size() == ds.ood.size());
  for (size_t i = 0; i < ds.ood.size(); ++i) {
    CHECK(images_equal(ds.ood[i].image, back.ood[i].image));
    CHECK(back.ood[i].gt_label == ds.ood[i].gt_label);
    CHECK(back.ood[i].embedding == ds.ood[i].embedding);
  }
  CHECK(back.label_embeddings == ds.label_embeddings);
  fs::remove_all(dir);
}

TEST_CASE("benchmark pairs are balanced and negatives differ from gt") {
  SynthDataset ds = make_synth_dataset(small_cfg());
  auto bench = build_ood_benchmark(ds);
  CHECK(bench.size() == 2 * ds.ood.size());
  int yes = 0, no = 0;
  for (const auto& item : bench) {
    (item.gold_yes ? yes : no)++;
    CHECK(item.neg_label != item.gt_label);
  }
  CHECK(yes == no);
}
