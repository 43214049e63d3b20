#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "thinksafe/corpus.hpp"
#include "thinksafe/toymodel.hpp"

namespace thinksafe {

// A prompt/response pair in toy-model tokens.
struct TokenizedExample {
  TokenSeq prompt;
  TokenSeq response;
};

// prompt_tokens(prompt_text) and response_tokens(raw_text). Throws
// ValidationError naming the prompt id when the pair exceeds the context.
TokenizedExample tokenize_example(const TrainingExample& ex, const ToyLM& model);

// Mean negative log-likelihood over every response token of the batch
// (token-pooled), prompts masked. No safety filtering.
LossAndGrad nll_loss(const ToyLM& model, std::span<const TokenizedExample> batch, const ForwardOptions& options = {});

// Filtered NLL: like nll_loss over the batch's safe examples only. Examples
// whose guard label is unsafe contribute nothing and do not count towards the
// token mean.
LossAndGrad sft_loss(const ToyLM& model, std::span<const TrainingExample> batch, const ForwardOptions& options = {});

// Mean over response-token positions of KL(p_ref || p_theta), exact over the
// full vocabulary. Benign examples only (ContractError otherwise); unsafe
// examples are skipped like in sft_loss.
LossAndGrad forward_kl_loss(const ToyLM& student, const ReferenceSnapshot& reference,
                            std::span<const TrainingExample> benign_batch, const ForwardOptions& options = {});

// sft_loss over the harmful part plus forward_kl_loss over the benign part.
LossAndGrad sft_kl_loss(const ToyLM& student, const ReferenceSnapshot& reference,
                        std::span<const TrainingExample> batch, const ForwardOptions& options = {});

// Linear warmup over the first ceil(warmup_frac * total_steps) steps, then
// cosine decay to 0 at total_steps.
double lr_schedule(std::int64_t step, std::int64_t total_steps, double base_lr, double warmup_frac);

struct OptimizerState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit OptimizerState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

// AdamW: params *= (1 - lr * weight_decay), then the bias-corrected adaptive
// step. Throws Error on non-finite gradients.
void optimizer_step(OptimizerState& state, std::span<double> params, std::span<const double> grads, double lr,
                    double weight_decay);

enum class SftObjective { sft, sft_kl };
std::string_view to_string(SftObjective o);
SftObjective parse_sft_objective(std::string_view s);

struct SftConfig {
  int epochs = 3;
  int batch_size = 8;
  double base_lr = 1e-5;
  double warmup_frac = 0.10;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  // Attached before training when the model has no adapters yet.
  std::optional<LoraConfig> lora = LoraConfig{};
  SftObjective objective = SftObjective::sft;

  void validate() const;
};

struct TrainLogEntry {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;

  bool operator==(const TrainLogEntry&) const = default;
};

// Shuffles each epoch with derive_seed(seed, "train/shuffle", epoch) and
// takes one optimizer step per batch; the log has epochs * ceil(N / batch)
// entries. The model is updated in place.
std::vector<TrainLogEntry> train_sft(ToyLM& model, const std::vector<TrainingExample>& dataset, const SftConfig& cfg);

// Same loop over raw token pairs with the plain NLL (used to pretrain toy models).
std::vector<TrainLogEntry> train_nll(ToyLM& model, const std::vector<TokenizedExample>& data, const SftConfig& cfg);

std::string train_log_to_jsonl(const std::vector<TrainLogEntry>& log);

}  // namespace thinksafe
