#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "thinksafe/corpus.hpp"
#include "thinksafe/guard.hpp"
#include "thinksafe/toymodel.hpp"

namespace thinksafe {

struct RewardWeights {
  double safety = 1.0;
  double format = 1.0;

  bool operator==(const RewardWeights&) const = default;
};

struct GrpoConfig {
  int group_size = 8;
  double clip_eps = 0.2;
  double kl_beta = 0.04;
  RewardWeights weights;
  int inner_epochs = 1;
  DecodeParams decode;
  std::uint64_t seed = 0;
  TagMode tag_mode = TagMode::paired;

  // Loop and optimizer settings, shared with supervised training.
  int steps = 200;
  int prompts_per_step = 1;
  double base_lr = 1e-5;
  double warmup_frac = 0.10;
  double weight_decay = 0.0;
  std::optional<LoraConfig> lora = LoraConfig{};

  void validate() const;
};

struct Rollout {
  TokenSeq tokens;  // response tokens, with the closing <eos> when produced
  std::string raw_text;
  std::vector<double> old_logprobs;
  double r_safety = 0.0;
  double r_format = 0.0;
  double r_total = 0.0;
  double advantage = 0.0;
};

struct RolloutGroup {
  std::string prompt_id;
  std::string prompt_text;
  TokenSeq prompt;
  std::vector<Rollout> rollouts;
};

// 1 when the trace has the think-tag structure of `mode`, else 0.
int format_reward(std::string_view raw_text, TagMode mode);

double total_reward(const Guard& guard, const std::string& prompt, const std::string& raw_text,
                    const RewardWeights& weights, TagMode mode);

// (r - mean) / population std; all zeros when std < 1e-8. Throws ContractError for G < 2.
std::vector<double> group_advantages(std::span<const double> rewards);

// min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)
double clipped_surrogate(double ratio, double advantage, double eps);

struct GrpoLoss {
  double loss = 0.0;
  std::vector<double> grad;
  double mean_kl = 0.0;  // mean over rollouts of the per-rollout token-mean KL
};

// loss = -(1/R) sum_i (surrogate_i - beta * kl_i) over all R rollouts, with a
// sequence-level ratio exp(sum_t new - old) and exact KL(p_theta || p_ref)
// averaged over each rollout's tokens.
GrpoLoss grpo_loss(const ToyLM& model, const ReferenceSnapshot& reference, std::span<const RolloutGroup> groups,
                   const GrpoConfig& cfg, const ForwardOptions& options = {});

// Samples G rollouts per prompt from the current model (which plays the old
// policy) and scores them; advantages are filled in.
RolloutGroup sample_group(const ToyLM& model, const PromptRecord& prompt, const Guard& guard, const GrpoConfig& cfg,
                          std::uint64_t seed);

struct GrpoLogEntry {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double loss = 0.0;

  bool operator==(const GrpoLogEntry&) const = default;
};

using GrpoStepHook = std::function<void(std::int64_t step, const ToyLM& model)>;

// The KL reference is the model as passed in, frozen for the whole run.
std::vector<GrpoLogEntry> train_grpo(ToyLM& model, const std::vector<PromptRecord>& prompts, const Guard& guard,
                                     const GrpoConfig& cfg, const GrpoStepHook& after_step = {});

std::string grpo_log_to_jsonl(const std::vector<GrpoLogEntry>& log);

// Mean total reward of `samples` rollouts per prompt, drawn with fixed
// per-prompt streams so repeated calls share random numbers.
double mean_total_reward(const ToyLM& model, const std::vector<PromptRecord>& prompts, const Guard& guard,
                         const GrpoConfig& cfg, int samples, std::uint64_t seed);

// Mean over probe contexts and positions of KL(p_theta || p_ref).
double probe_kl(const ToyLM& model, const ReferenceSnapshot& reference, std::span<const TokenSeq> contexts);

}  // namespace thinksafe
