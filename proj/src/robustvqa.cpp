// SPDX-License-Identifier: Apache-2.0
#include "weave/robustvqa.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace weave {

using nlohmann::json;

float cosine_similarity(const std::vector<float>& a,
                        const std::vector<float>& b) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0f;
  return static_cast<float>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

std::string mine_hard_negative(
    const std::vector<float>& embedding, const std::string& gt_label,
    const std::map<std::string, std::vector<float>>& label_embeddings) {
  if (label_embeddings.size() < 2)
    throw std::invalid_argument("hard-negative mining needs >= 2 labels");
  std::string best;
  float best_sim = -2.0f;
  for (const auto& [label, emb] : label_embeddings) {
    if (label == gt_label) continue;
    float sim = cosine_similarity(embedding, emb);
    if (sim > best_sim) {
      best_sim = sim;
      best = label;
    }
  }
  if (best.empty())
    throw std::invalid_argument("no label other than ground truth");
  return best;
}

BenchmarkItem render_yesno(const std::string& image_ref,
                           const std::string& label, bool gold_yes,
                           const std::string& gt_label,
                           const std::string& neg_label,
                           const std::string& item_id) {
  if (label.empty()) throw std::invalid_argument("empty label");
  BenchmarkItem item;
  item.item_id = item_id;
  item.image_ref = image_ref;
  item.question = "Is " + label +
                  " the main object in this image? Please answer yes or no.";
  item.gold_yes = gold_yes;
  item.gt_label = gt_label;
  item.neg_label = neg_label;
  item.format = QuestionFormat::YesNo;
  return item;
}

std::vector<BenchmarkItem> render_yesno_pair(const std::string& image_ref,
                                             const std::string& gt_label,
                                             const std::string& neg_label,
                                             const std::string& id_prefix) {
  return {render_yesno(image_ref, gt_label, true, gt_label, neg_label,
                       id_prefix + "_pos"),
          render_yesno(image_ref, neg_label, false, gt_label, neg_label,
                       id_prefix + "_neg")};
}

BenchmarkItem render_multichoice(const std::string& image_ref,
                                 const std::string& gt_label,
                                 const std::string& neg_label,
                                 ChoiceOrder order, const std::string& item_id) {
  if (gt_label == neg_label)
    throw std::invalid_argument("choice labels must be distinct");
  BenchmarkItem item;
  item.item_id = item_id;
  item.image_ref = image_ref;
  const std::string first =
      order == ChoiceOrder::GtFirst ? gt_label : neg_label;
  const std::string second =
      order == ChoiceOrder::GtFirst ? neg_label : gt_label;
  item.question = "What is the main object in this image? Chose from the "
                  "list: [" + first + "," + second + "].";
  item.gold_choice = order == ChoiceOrder::GtFirst ? 0 : 1;
  item.gt_label = gt_label;
  item.neg_label = neg_label;
  item.format = QuestionFormat::MultiChoice;
  return item;
}

static std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

ParsedAnswer parse_answer_yesno(const std::string& model_output) {
  std::string s = lower(model_output);
  std::string word;
  for (size_t i = 0; i <= s.size(); ++i) {
    if (i < s.size() && std::isalnum(static_cast<unsigned char>(s[i]))) {
      word += s[i];
      continue;
    }
    if (word == "yes") return ParsedAnswer::Yes;
    if (word == "no") return ParsedAnswer::No;
    word.clear();
  }
  return ParsedAnswer::Unknown;
}

std::optional<int> parse_answer_multichoice(const std::string& model_output,
                                            const BenchmarkItem& item) {
  std::string s = lower(model_output);
  const std::string first =
      lower(item.gold_choice == 0 ? item.gt_label : item.neg_label);
  const std::string second =
      lower(item.gold_choice == 0 ? item.neg_label : item.gt_label);
  size_t p0 = s.find(first);
  size_t p1 = s.find(second);
  if (p0 == std::string::npos && p1 == std::string::npos) return std::nullopt;
  if (p1 == std::string::npos) return 0;
  if (p0 == std::string::npos) return 1;
  return p0 <= p1 ? 0 : 1;
}

AccuracyReport evaluate(const std::vector<BenchmarkItem>& items,
                        const std::map<std::string, std::string>& raw_answers) {
  std::vector<std::string> missing;
  for (const auto& item : items)
    if (!raw_answers.count(item.item_id)) missing.push_back(item.item_id);
  if (!missing.empty()) {
    std::string msg = "missing answers:";
    for (const auto& id : missing) msg += " " + id;
    throw std::invalid_argument(msg);
  }
  if (items.empty())
    throw std::invalid_argument("accuracy undefined on an empty benchmark");
  AccuracyReport r;
  for (const auto& item : items) {
    const std::string& raw = raw_answers.at(item.item_id);
    bool correct = false;
    std::string fmt;
    if (item.format == QuestionFormat::YesNo) {
      fmt = "yesno";
      ParsedAnswer a = parse_answer_yesno(raw);
      if (a == ParsedAnswer::Unknown) ++r.unknown;
      correct = (a == ParsedAnswer::Yes && item.gold_yes) ||
                (a == ParsedAnswer::No && !item.gold_yes);
      if (item.gold_yes) {
        ++r.pos_total;
        r.pos_correct += correct;
      } else {
        ++r.neg_total;
        r.neg_correct += correct;
      }
    } else {
      fmt = item.gold_choice == 0 ? "multichoice-gt-first"
                                  : "multichoice-neg-first";
      auto a = parse_answer_multichoice(raw, item);
      if (!a) ++r.unknown;
      correct = a && *a == item.gold_choice;
    }
    ++r.total;
    r.correct += correct;
    auto& [c, t] = r.per_format[fmt];
    c += correct;
    ++t;
  }
  return r;
}

// ---------------------------------------------------------------- file I/O

void write_benchmark(const std::filesystem::path& path,
                     const std::vector<BenchmarkItem>& items) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  for (const auto& item : items) {
    json j{{"item_id", item.item_id},
           {"image_ref", item.image_ref},
           {"question", item.question},
           {"gt_label", item.gt_label},
           {"neg_label", item.neg_label}};
    if (item.format == QuestionFormat::YesNo) {
      j["format"] = "yesno";
      j["gold"] = item.gold_yes ? "yes" : "no";
    } else {
      j["format"] = "multichoice";
      j["gold"] = item.gold_choice;
    }
    f << j.dump() << "\n";
  }
}

std::vector<BenchmarkItem> read_benchmark(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<BenchmarkItem> items;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    BenchmarkItem item;
    item.item_id = j.at("item_id");
    item.image_ref = j.at("image_ref");
    item.question = j.at("question");
    item.gt_label = j.at("gt_label");
    item.neg_label = j.at("neg_label");
    if (j.at("format") == "yesno") {
      item.format = QuestionFormat::YesNo;
      item.gold_yes = j.at("gold") == "yes";
    } else {
      item.format = QuestionFormat::MultiChoice;
      item.gold_choice = j.at("gold");
    }
    items.push_back(std::move(item));
  }
  return items;
}

void write_answers(const std::filesystem::path& path,
                   const std::map<std::string, std::string>& answers) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  // Raw model output may contain arbitrary bytes (byte-fallback decoding);
  // replace invalid UTF-8 instead of failing.
  for (const auto& [id, raw] : answers)
    f << json{{"item_id", id}, {"raw_output", raw}}.dump(
             -1, ' ', false, json::error_handler_t::replace)
      << "\n";
}

std::map<std::string, std::string> read_answers(
    const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    out[j.at("item_id")] = j.at("raw_output");
  }
  return out;
}

}  // namespace weave
