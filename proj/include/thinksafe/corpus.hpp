#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "thinksafe/types.hpp"

namespace thinksafe {

struct PromptRecord {
  std::string id;
  Category category = Category::harmful;
  std::string text;
  std::string source;

  bool operator==(const PromptRecord&) const = default;
};

struct TrainingExample {
  std::string prompt_id;
  Category category = Category::harmful;
  std::string prompt_text;  // never carries the steering instruction
  std::optional<std::string> steering_template_id;
  std::string reasoning;
  std::string answer;
  std::string raw_text;
  TagMode tag_mode = TagMode::paired;
  GuardVerdict guard;
  GenerationMeta meta;

  bool operator==(const TrainingExample&) const = default;
};

struct DatasetStats {
  std::size_t n_harmful = 0;
  std::size_t n_benign = 0;
  double mean_len_harmful_tokens = 0.0;
  double mean_len_benign_tokens = 0.0;
  double filtered_ratio_harmful = 0.0;  // percent
  double filtered_ratio_benign = 0.0;   // percent

  bool operator==(const DatasetStats&) const = default;
};

struct DroppedCounts {
  std::size_t harmful = 0;
  std::size_t benign = 0;

  std::size_t& operator[](Category c) { return c == Category::harmful ? harmful : benign; }
  std::size_t operator[](Category c) const { return c == Category::harmful ? harmful : benign; }
  bool operator==(const DroppedCounts&) const = default;
};

// Wraps reasoning and answer in the think tags of the given mode.
std::string wrap_reasoning(const std::string& reasoning, const std::string& answer, TagMode mode);

// Throws ValidationError when the example breaks a record invariant.
// When `require_safe` is set the guard label must be safe (dataset admission).
void validate_example(const TrainingExample& ex, bool require_safe = true);

std::vector<PromptRecord> load_prompts(const std::filesystem::path& path, Category category);
void write_prompts(const std::vector<PromptRecord>& prompts, const std::filesystem::path& path);

std::size_t write_dataset(const std::vector<TrainingExample>& examples, const std::filesystem::path& path);
std::vector<TrainingExample> load_dataset(const std::filesystem::path& path);

// Serialized single-line form used by the dataset file.
std::string to_json_line(const TrainingExample& ex);
TrainingExample example_from_json_line(const std::string& line);

using TokenLengthFn = std::function<std::size_t(const TrainingExample&)>;

DatasetStats compute_stats(const std::vector<TrainingExample>& kept, const DroppedCounts& dropped,
                           const TokenLengthFn& token_len);
// Uses the toy tokenizer over raw_text.
DatasetStats compute_stats(const std::vector<TrainingExample>& kept, const DroppedCounts& dropped);

std::string stats_to_json(const DatasetStats& stats);
DatasetStats stats_from_json(const std::string& text);
// Table with one row per category; lengths and ratios to two decimals.
std::string format_stats(const DatasetStats& stats);

// Drops the reasoning trace of harmful examples; benign examples pass through.
TrainingExample strip_reasoning(const TrainingExample& example);

}  // namespace thinksafe
