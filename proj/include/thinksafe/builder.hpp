#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "thinksafe/corpus.hpp"
#include "thinksafe/genclient.hpp"
#include "thinksafe/guard.hpp"
#include "thinksafe/steering.hpp"

namespace thinksafe {

struct BuildConfig {
  SteeringId steering = SteeringId::thinksafe;
  DecodeParams decode_harmful;
  DecodeParams decode_benign;
  std::shared_ptr<const Guard> guard;
  // The frozen student for self-generation; build_teacher_distill takes its
  // teacher separately.
  std::shared_ptr<GenerationBackend> generator;
  std::uint64_t seed = 0;
  TagMode tag_mode = TagMode::paired;
};

inline constexpr int kRejectionSamples = 5;

struct BuildResult {
  std::vector<TrainingExample> dataset;
  DroppedCounts dropped;
  DatasetStats stats;
};

struct FilterResult {
  std::vector<TrainingExample> kept;
  DroppedCounts dropped;
};

// Scores each candidate's (un-steered prompt, raw_text) pair, fills in its
// verdict and keeps the safe ones in input order.
FilterResult filter_safe(std::vector<TrainingExample> candidates, const Guard& guard);

// Harmful prompts are steered before sampling, benign ones are sampled
// verbatim; one sample each; stored prompts are always un-steered.
BuildResult build_thinksafe(const BuildConfig& cfg, const std::vector<PromptRecord>& harmful,
                            const std::vector<PromptRecord>& benign);

// Five un-steered samples per prompt; the prompt survives only when all five
// are safe, and then one of them is picked uniformly with the stream
// derive_seed(seed, "build/select", prompt id).
BuildResult build_rejection_sampling(const BuildConfig& cfg, const std::vector<PromptRecord>& prompts);

// One sample per prompt from `teacher`; cfg.steering applies to harmful prompts.
BuildResult build_teacher_distill(const BuildConfig& cfg, const std::vector<PromptRecord>& prompts,
                                  GenerationBackend& teacher);

// Seed of every generation request for a prompt.
std::uint64_t generation_seed(std::uint64_t global, const std::string& prompt_id);

}  // namespace thinksafe
