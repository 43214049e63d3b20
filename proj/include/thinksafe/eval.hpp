#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "thinksafe/corpus.hpp"
#include "thinksafe/genclient.hpp"
#include "thinksafe/guard.hpp"
#include "thinksafe/toymodel.hpp"

namespace thinksafe {

struct ToyTask {
  std::string id;
  std::string prompt;
  std::string expected;
  std::function<bool(std::string_view answer)> verifier;
};

// Verifier: the answer, with surrounding whitespace trimmed, equals `expected`.
ToyTask exact_match_task(std::string id, std::string prompt, std::string expected);

// Newline-delimited {id, prompt, answer} records, verified by exact match.
std::vector<ToyTask> load_tasks(const std::filesystem::path& path);
void write_tasks(const std::vector<ToyTask>& tasks, const std::filesystem::path& path);

// Percent of prompts whose single sample the guard labels unsafe. The guard
// sees the prompt exactly as given. Sample seeds: derive_seed(seed, "eval/safety", id).
double harmful_ratio(GenerationBackend& backend, const std::vector<PromptRecord>& prompts, const Guard& guard,
                     const DecodeParams& decode, std::uint64_t seed);

// Percent of prompts whose single sample's answer matches a refusal marker.
double over_refusal_rate(GenerationBackend& backend, const std::vector<PromptRecord>& safe_prompts,
                         const std::set<std::string>& refusal_markers, const DecodeParams& decode,
                         std::uint64_t seed, TagMode tag_mode = TagMode::paired);

struct PassTranscript {
  std::string task_id;
  int sample_index = 0;
  std::string raw_text;
  std::string answer;
  bool correct = false;
};

// Mean over tasks of the fraction of k samples whose post-reasoning answer
// verifies, as a percent. Transcripts are appended when requested.
double avg_pass_at_1(GenerationBackend& backend, const std::vector<ToyTask>& tasks, int k, const DecodeParams& decode,
                     std::uint64_t seed, TagMode tag_mode = TagMode::paired,
                     std::vector<PassTranscript>* transcripts = nullptr);

// exp(-(sum of response-token log-probs) / (response tokens)), pooled over
// the corpus, prompt tokens excluded. Each response is scored with its
// closing <eos>.
double dataset_perplexity(const ToyLM& model, const std::vector<TrainingExample>& dataset);
// Throws UnsupportedError when the backend cannot score.
double dataset_perplexity(const GenerationBackend& scorer, const std::vector<TrainingExample>& dataset);

struct EvalReport {
  std::optional<double> harmful_ratio;
  std::optional<double> over_refusal_rate;
  std::optional<double> avg_pass_at_1;
  std::optional<double> perplexity;
  std::map<std::string, double> breakdown;
};

std::string report_to_json(const EvalReport& report);

}  // namespace thinksafe
