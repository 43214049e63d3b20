#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "thinksafe/corpus.hpp"
#include "thinksafe/eval.hpp"
#include "thinksafe/guard.hpp"
#include "thinksafe/train.hpp"

namespace thinksafe {

// Desk-scale environment: harmful and benign requests that share sentence
// frames and differ only in the requested object, single-digit addition
// tasks, a lexicon for the guard, and a pretraining corpus that teaches a toy
// model to mostly comply with harmful requests unless it is steered.
struct PretrainPair {
  std::string prompt;
  std::string response;
};

struct ToyWorld {
  std::vector<PromptRecord> harmful_build;
  std::vector<PromptRecord> harmful_eval;
  std::vector<PromptRecord> benign_build;
  std::vector<PromptRecord> benign_eval;
  std::vector<ToyTask> tasks;
  Lexicon lexicon;
  std::vector<PretrainPair> pretrain;
};

struct ToyWorldShape {
  std::size_t n_harmful_build = 200;
  std::size_t n_harmful_eval = 100;
  std::size_t n_benign_build = 200;
  std::size_t n_benign_eval = 100;
  // Unsteered harmful prompts appear this many times in the pretraining
  // corpus, complying in `unsteered_comply` of them.
  int unsteered_copies = 10;
  int unsteered_comply = 7;
  // Percent of steered harmful prompts answered with compliance.
  int steered_comply_percent = 10;
  // Steered copies per alternative template (the default template covers every harmful prompt).
  std::size_t alt_template_prompts = 64;
  int benign_copies = 2;
  int task_copies = 20;
  // The build set's benign prompts include every addition fact phrased as
  // "add a and b." (the evaluation tasks ask "what is a+b?").
  bool arithmetic_in_build = true;
};

ToyWorld make_toy_world(std::uint64_t seed, const ToyWorldShape& shape = {});

inline constexpr std::string_view kToyRefusal = "<think>harmful</think>sorry, i can't help";

// File names used inside a world directory.
struct ToyWorldFiles {
  static constexpr const char* harmful = "harmful.jsonl";
  static constexpr const char* harmful_eval = "harmful_eval.jsonl";
  static constexpr const char* benign = "benign.jsonl";
  static constexpr const char* benign_eval = "benign_eval.jsonl";
  static constexpr const char* tasks = "tasks.jsonl";
  static constexpr const char* lexicon = "lexicon.txt";
  static constexpr const char* pretrain = "pretrain.jsonl";
};

void write_toy_world(const ToyWorld& world, const std::filesystem::path& dir);

std::vector<PretrainPair> load_pretrain(const std::filesystem::path& path);
void write_pretrain(const std::vector<PretrainPair>& pairs, const std::filesystem::path& path);

// Throws ValidationError when a pair does not fit the model's context.
std::vector<TokenizedExample> tokenize_pretrain(const std::vector<PretrainPair>& pairs, const ToyLM& model);

}  // namespace thinksafe
