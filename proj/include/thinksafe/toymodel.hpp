#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "thinksafe/rng.hpp"
#include "thinksafe/types.hpp"
#include "thinksafe/vocab.hpp"

namespace thinksafe {

enum class Architecture { tiny_transformer, ngram_logit_table };

std::string_view to_string(Architecture a);
Architecture parse_architecture(std::string_view s);

struct ModelConfig {
  Architecture arch = Architecture::tiny_transformer;
  int context_len = 64;
  // transformer
  int width = 32;
  int n_layers = 2;
  int n_heads = 4;
  int ff_width = 64;
  // n-gram table: logits row chosen by the previous (n-1) tokens hashed into buckets
  int ngram_n = 2;
  int ngram_buckets = Vocab::kSize;
  double init_std = 0.02;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LoraConfig {
  int rank = 32;
  double alpha = 16.0;
  double dropout = 0.05;

  double scale() const { return alpha / rank; }
  void validate() const;
  bool operator==(const LoraConfig&) const = default;
};

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool operator==(const Matrix&) const = default;
};

// Numerically stable log-softmax of one row.
std::vector<double> log_softmax(std::span<const double> logits);
double logsumexp(std::span<const double> values);

enum class Pass { inference, training };

struct ForwardOptions {
  Pass pass = Pass::inference;
  // Source of LoRA dropout masks; dropout is skipped when null.
  Rng* dropout_rng = nullptr;
};

struct Activations;

class ToyLM {
 public:
  // Deterministic given (config, seed). Throws ConfigError on invalid dims.
  static ToyLM init(const ModelConfig& config, std::uint64_t seed);

  ToyLM(const ToyLM&);
  ToyLM& operator=(const ToyLM&);
  ToyLM(ToyLM&&) noexcept;
  ToyLM& operator=(ToyLM&&) noexcept;
  ~ToyLM();

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  static constexpr int vocab_size() { return Vocab::kSize; }

  // Rows are next-token logits; row t depends only on tokens[0..t].
  // Throws ContractError when the input is longer than context_len.
  Matrix forward_logits(std::span<const TokenId> tokens) const;

  std::span<const double> base_params() const { return params_; }
  std::span<double> base_params_mut() { return params_; }

  // Adds zero-initialised B / random A adapters on the query and value
  // projections. Transformer only; throws UnsupportedError otherwise.
  void attach_lora(const LoraConfig& lora, std::uint64_t seed);
  void detach_lora();
  bool has_lora() const { return lora_.has_value(); }
  const std::optional<LoraConfig>& lora_config() const { return lora_; }
  std::uint64_t lora_seed() const { return lora_seed_; }
  std::span<const double> lora_params() const { return lora_params_; }
  std::span<double> lora_params_mut() { return lora_params_; }

  // Adapter parameters when adapters are attached, otherwise the base parameters.
  std::span<double> trainable_params();
  std::span<const double> trainable_params() const;

  // Used by checkpoint loading.
  static ToyLM from_parts(const ModelConfig& config, std::uint64_t seed, std::vector<double> params,
                          std::optional<LoraConfig> lora, std::uint64_t lora_seed, std::vector<double> lora_params);

  // Runs the forward pass one token at a time, keeping every activation.
  std::unique_ptr<Activations> begin(const ForwardOptions& options = {}) const;
  std::span<const double> push(Activations& acts, TokenId token) const;
  // Accumulates into `grad` (sized like trainable_params) the gradient of
  // sum_{t,v} dlogits(t,v) * logits(t,v) for the tokens pushed into `acts`.
  void backward(const Activations& acts, const Matrix& dlogits, std::span<double> grad) const;

 private:
  ToyLM() = default;

  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<double> params_;
  std::optional<LoraConfig> lora_;
  std::uint64_t lora_seed_ = 0;
  std::vector<double> lora_params_;
};

std::size_t parameter_count(const ModelConfig& config);
std::size_t lora_parameter_count(const ModelConfig& config, const LoraConfig& lora);

// Incremental decoding over a fixed model: push one token, get the logits
// row predicting the next one. Produces the same rows as forward_logits.
class DecodeSession {
 public:
  explicit DecodeSession(const ToyLM& model);
  ~DecodeSession();
  DecodeSession(DecodeSession&&) noexcept;

  std::span<const double> push(TokenId token);
  std::size_t length() const;

 private:
  const ToyLM* model_;
  std::unique_ptr<Activations> acts_;
};

struct SequenceLogprob {
  double total = 0.0;
  std::vector<double> per_token;
};

// log p(response | prompt); prompt tokens contribute nothing.
SequenceLogprob sequence_logprob(const ToyLM& model, std::span<const TokenId> prompt_ids,
                                 std::span<const TokenId> response_ids);

struct SampleResult {
  TokenSeq tokens;  // generated tokens, including the closing <eos> when produced
  bool stopped = false;
  std::vector<double> logprobs;  // unfiltered model log-probabilities of `tokens`
};

// Decodes after `prompt_ids` until <eos>, max_tokens, or the end of the context.
SampleResult sample(const ToyLM& model, std::span<const TokenId> prompt_ids, const DecodeParams& decode, Rng& rng);

// Per-sequence objective: given the logits of sequence `index`, return its
// loss contribution and write d(loss)/d(logits) into `dlogits` (pre-zeroed).
using SequenceObjective = std::function<double(std::size_t index, const Matrix& logits, Matrix& dlogits)>;

struct LossClosure {
  std::vector<TokenSeq> sequences;
  SequenceObjective objective;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;  // sized like trainable_params
};

// Exact reverse-mode gradient of the closure's loss with respect to the
// trainable parameters. Throws Error when the loss is not finite.
LossAndGrad loss_and_grad(const ToyLM& model, const LossClosure& closure, const ForwardOptions& options = {});
std::vector<double> grad(const ToyLM& model, const LossClosure& closure);
// Loss only (no backward pass).
double loss_value(const ToyLM& model, const LossClosure& closure, const ForwardOptions& options = {});

// Immutable deep copy of a model, safe to read from several threads.
class ReferenceSnapshot {
 public:
  explicit ReferenceSnapshot(const ToyLM& model) : model_(std::make_shared<const ToyLM>(model)) {}

  const ToyLM& model() const { return *model_; }
  std::shared_ptr<const ToyLM> shared() const { return model_; }
  Matrix forward_logits(std::span<const TokenId> tokens) const { return model_->forward_logits(tokens); }

 private:
  std::shared_ptr<const ToyLM> model_;
};

ReferenceSnapshot snapshot_reference(const ToyLM& model);
ReferenceSnapshot snapshot_reference(const ReferenceSnapshot& snapshot);

}  // namespace thinksafe
