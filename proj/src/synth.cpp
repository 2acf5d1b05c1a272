// SPDX-License-Identifier: Apache-2.0
#include "weave/synth.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "weave/sequence.hpp"

namespace weave {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v{"circle", "square", "triangle"};
  return v;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v{"red",    "green",   "blue",
                                          "yellow", "magenta", "cyan"};
  return v;
}

const std::vector<std::string>& texture_names() {
  static const std::vector<std::string> v{"solid", "striped", "dotted"};
  return v;
}

static const float kColors[6][3] = {
    {0.90f, 0.15f, 0.15f}, {0.15f, 0.85f, 0.20f}, {0.20f, 0.30f, 0.90f},
    {0.90f, 0.85f, 0.20f}, {0.85f, 0.20f, 0.80f}, {0.20f, 0.85f, 0.85f}};

std::vector<std::pair<int, int>> train_attribute_combos(int shape) {
  // Shape s owns colors {2s, 2s+1}: a clean color shortcut at train time.
  std::vector<std::pair<int, int>> out;
  for (int c : {2 * shape, 2 * shape + 1})
    for (int t : {0, 1}) out.push_back({c, t});
  return out;
}

std::vector<std::pair<int, int>> ood_attribute_combos(int shape) {
  // Held-out combinations: the shape's own colors with the dotted texture,
  // which never appears in training. A model that only memorizes training
  // images gets no signal here; one that generalizes its perception does.
  std::vector<std::pair<int, int>> out;
  for (int c : {2 * shape, 2 * shape + 1}) out.push_back({c, 2});
  return out;
}

ImageRecord render_shape(int shape, int color, int texture, int size,
                         std::mt19937_64& rng) {
  ImageRecord img;
  img.height = img.width = size;
  img.pixels.resize(static_cast<size_t>(size) * size * 3);
  const float* fg = kColors[color];
  const float bg[3] = {0.10f, 0.10f, 0.14f};
  const float cx = size / 2.0f + rand_int(rng, -3, 3);
  const float cy = size / 2.0f + rand_int(rng, -3, 3);
  const float r = size * (0.22f + 0.08f * rand_uniform(rng));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float dx = x - cx, dy = y - cy;
      bool inside = false;
      switch (shape) {
        case 0: inside = dx * dx + dy * dy < r * r; break;
        case 1: inside = std::abs(dx) < r * 0.85f && std::abs(dy) < r * 0.85f; break;
        default:  // upward triangle
          inside = dy > -r && dy < r * 0.8f &&
                   std::abs(dx) < (dy + r) * 0.55f;
      }
      float shade = 1.0f;
      if (inside) {
        if (texture == 1) shade = ((x + y) / 3) % 2 ? 1.0f : 0.30f;
        if (texture == 2) shade = (x % 4 < 2 && y % 4 < 2) ? 1.0f : 0.0f;
      }
      for (int c = 0; c < 3; ++c) {
        float v = inside ? fg[c] * shade : bg[c];
        v += 0.02f * (rand_uniform(rng) - 0.5f);
        img.pixels[(y * size + x) * 3 + c] =
            std::min(1.0f, std::max(0.0f, v));
      }
    }
  return img;
}

std::vector<float> pixel_embedding(const ImageRecord& img) {
  const int g = 8;
  std::vector<float> e(g * g * 3, 0.0f);
  const int cy = img.height / g, cx = img.width / g;
  for (int by = 0; by < g; ++by)
    for (int bx = 0; bx < g; ++bx)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int y = 0; y < cy; ++y)
          for (int x = 0; x < cx; ++x)
            acc += img.pixel(by * cy + y, bx * cx + x, c);
        e[(by * g + bx) * 3 + c] = static_cast<float>(acc / (cy * cx));
      }
  return e;
}

SynthDataset make_synth_dataset(const SynthConfig& cfg) {
  if (cfg.n_train < 1 || cfg.n_ood < 1)
    throw std::invalid_argument("need at least one sample per split");
  RngPool pool(cfg.seed);
  auto rng_train = pool.stream("synth.train");
  auto rng_ood = pool.stream("synth.ood");
  auto rng_order = pool.stream("synth.order");

  SynthDataset ds;
  std::map<std::string, std::vector<double>> proto_acc;
  std::map<std::string, int> proto_n;

  for (int i = 0; i < cfg.n_train; ++i) {
    const int shape = i % 3;
    auto combos = train_attribute_combos(shape);
    auto [color, texture] =
        combos[rand_int(rng_train, 0, static_cast<int>(combos.size()) - 1)];
    ImageRecord img = render_shape(shape, color, texture, cfg.size, rng_train);

    std::vector<float> emb = pixel_embedding(img);
    auto& acc = proto_acc[shape_names()[shape]];
    acc.resize(emb.size(), 0.0);
    for (size_t k = 0; k < emb.size(); ++k) acc[k] += emb[k];
    ++proto_n[shape_names()[shape]];

    const std::string caption = "a photo of a " + color_names()[color] + " " +
                                texture_names()[texture] + " " +
                                shape_names()[shape];
    InterleavedDocument cap_doc = pair_to_document(caption, img, rng_order);
    cap_doc.doc_id = "train_cap_" + std::to_string(i);
    ds.train_docs.push_back(std::move(cap_doc));

    // Matching yes/no QA documents, one positive and one negative. The
    // answer follows a fixed-template rationale naming the shape: stating
    // the shape first is an image-to-text mapping, and the yes/no then
    // reduces to a text-level comparison with the question label. Direct
    // image-conditional yes/no is not learnable at this scale.
    const std::string neg =
        shape_names()[(shape + 1 + rand_int(rng_order, 0, 1)) % 3];
    for (int q = 0; q < 2; ++q) {
      const std::string label = q == 0 ? shape_names()[shape] : neg;
      InterleavedDocument qa;
      qa.doc_id = "train_qa_" + std::to_string(i) + (q == 0 ? "_pos" : "_neg");
      qa.elements = {img,
                     TextSpan{"Is " + label +
                              " the main object in this image? Please answer "
                              "yes or no. the main object is a " +
                              shape_names()[shape] + ". " +
                              (q == 0 ? "yes" : "no")}};
      ds.train_docs.push_back(std::move(qa));
    }
  }

  for (const auto& [label, acc] : proto_acc) {
    std::vector<float> p(acc.size());
    for (size_t k = 0; k < acc.size(); ++k)
      p[k] = static_cast<float>(acc[k] / proto_n[label]);
    ds.label_embeddings[label] = std::move(p);
  }

  for (int i = 0; i < cfg.n_ood; ++i) {
    const int shape = i % 3;
    auto combos = ood_attribute_combos(shape);
    auto [color, texture] =
        combos[rand_int(rng_ood, 0, static_cast<int>(combos.size()) - 1)];
    OodItem item;
    item.image = render_shape(shape, color, texture, cfg.size, rng_ood);
    item.gt_label = shape_names()[shape];
    item.embedding = pixel_embedding(item.image);
    item.ref = "ood_" + std::to_string(i) + "_c" + std::to_string(color) +
               "_t" + std::to_string(texture) + ".bin";
    ds.ood.push_back(std::move(item));
  }
  return ds;
}

void write_synth_dataset(const fs::path& dir, const SynthDataset& ds) {
  fs::create_directories(dir / "ood");
  serialize_docs(ds.train_docs, dir / "train_docs.jsonl");
  std::ofstream items(dir / "ood_items.jsonl");
  if (!items) throw std::runtime_error("cannot open ood_items.jsonl");
  for (const auto& item : ds.ood) {
    write_tensor_file(dir / "ood" / item.ref,
                      {item.image.height, item.image.width, 3},
                      item.image.pixels);
    items << json{{"ref", item.ref},
                  {"gt_label", item.gt_label},
                  {"embedding", item.embedding}}
                 .dump()
          << "\n";
  }
  std::ofstream protos(dir / "label_embeddings.json");
  json jp;
  for (const auto& [label, emb] : ds.label_embeddings) jp[label] = emb;
  protos << jp.dump(2) << "\n";
}

SynthDataset read_synth_dataset(const fs::path& dir) {
  SynthDataset ds;
  ds.train_docs = deserialize_docs(dir / "train_docs.jsonl");
  std::ifstream items(dir / "ood_items.jsonl");
  if (!items) throw std::runtime_error("cannot open ood_items.jsonl");
  std::string line;
  while (std::getline(items, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    OodItem item;
    item.ref = j.at("ref");
    item.gt_label = j.at("gt_label");
    item.embedding = j.at("embedding").get<std::vector<float>>();
    std::vector<int> shape;
    read_tensor_file(dir / "ood" / item.ref, shape, item.image.pixels);
    item.image.height = shape[0];
    item.image.width = shape[1];
    ds.ood.push_back(std::move(item));
  }
  std::ifstream protos(dir / "label_embeddings.json");
  json jp = json::parse(protos);
  for (auto it = jp.begin(); it != jp.end(); ++it)
    ds.label_embeddings[it.key()] = it.value().get<std::vector<float>>();
  return ds;
}

std::vector<BenchmarkItem> build_ood_benchmark(const SynthDataset& ds) {
  std::vector<BenchmarkItem> items;
  for (size_t i = 0; i < ds.ood.size(); ++i) {
    const auto& item = ds.ood[i];
    std::string neg = mine_hard_negative(item.embedding, item.gt_label,
                                         ds.label_embeddings);
    auto pair = render_yesno_pair(item.ref, item.gt_label, neg,
                                  "ood_" + std::to_string(i));
    items.insert(items.end(), pair.begin(), pair.end());
  }
  return items;
}

std::vector<std::string> corpus_texts(const SynthDataset& ds) {
  std::vector<std::string> out;
  for (const auto& doc : ds.train_docs)
    for (const auto& e : doc.elements)
      if (const auto* t = std::get_if<TextSpan>(&e)) out.push_back(t->text);
  // The evaluation question template must tokenize into known words even for
  // labels unseen in a particular corpus draw.
  for (const auto& s : shape_names())
    out.push_back("Is " + s +
                  " the main object in this image? Please answer yes or no.");
  return out;
}

}  // namespace weave
