// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace weave {

struct LabeledImage {
  std::string image_ref;
  std::string gt_label;
  std::vector<float> embedding;  // optional precomputed image embedding
};

enum class QuestionFormat { YesNo, MultiChoice };
enum class ChoiceOrder { GtFirst, NegFirst };

struct BenchmarkItem {
  std::string item_id;
  std::string image_ref;
  std::string question;
  bool gold_yes = true;       // yesno format
  int gold_choice = 0;        // multichoice format
  std::string gt_label;
  std::string neg_label;
  QuestionFormat format = QuestionFormat::YesNo;
};

enum class ParsedAnswer { Yes, No, Unknown };

// Highest-similarity incorrect label: argmax cosine over labels != gt.
std::string mine_hard_negative(
    const std::vector<float>& embedding, const std::string& gt_label,
    const std::map<std::string, std::vector<float>>& label_embeddings);

float cosine_similarity(const std::vector<float>& a,
                        const std::vector<float>& b);

// "Is [label] the main object in this image? Please answer yes or no."
BenchmarkItem render_yesno(const std::string& image_ref,
                           const std::string& label, bool gold_yes,
                           const std::string& gt_label,
                           const std::string& neg_label,
                           const std::string& item_id);
// Positive + negative question sharing one image.
std::vector<BenchmarkItem> render_yesno_pair(const std::string& image_ref,
                                             const std::string& gt_label,
                                             const std::string& neg_label,
                                             const std::string& id_prefix);
// "What is the main object in this image? Chose from the list: [a,b]."
BenchmarkItem render_multichoice(const std::string& image_ref,
                                 const std::string& gt_label,
                                 const std::string& neg_label,
                                 ChoiceOrder order, const std::string& item_id);

// Case-insensitive; first whole-word yes/no wins. For multichoice, the
// earliest choice label found as a substring wins; the returned index is in
// presented order, matching gold_choice. Unknown when nothing matches.
ParsedAnswer parse_answer_yesno(const std::string& model_output);
std::optional<int> parse_answer_multichoice(const std::string& model_output,
                                            const BenchmarkItem& item);

struct AccuracyReport {
  int total = 0, correct = 0, unknown = 0;
  int pos_total = 0, pos_correct = 0;
  int neg_total = 0, neg_correct = 0;
  std::map<std::string, std::pair<int, int>> per_format;  // correct,total
  double accuracy() const { return total ? double(correct) / total : 0.0; }
};

// Unknown counts as incorrect; missing answers are an error listing the ids.
AccuracyReport evaluate(const std::vector<BenchmarkItem>& items,
                        const std::map<std::string, std::string>& raw_answers);

// Line-delimited file formats.
void write_benchmark(const std::filesystem::path& path,
                     const std::vector<BenchmarkItem>& items);
std::vector<BenchmarkItem> read_benchmark(const std::filesystem::path& path);
void write_answers(const std::filesystem::path& path,
                   const std::map<std::string, std::string>& answers);
std::map<std::string, std::string> read_answers(
    const std::filesystem::path& path);

}  // namespace weave
