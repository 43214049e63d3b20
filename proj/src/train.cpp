#include "thinksafe/train.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>

#include "json.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/json_util.hpp"
#include "thinksafe/rng.hpp"

namespace thinksafe {

namespace {

TokenSeq model_input(const TokenizedExample& ex) {
  TokenSeq seq(ex.prompt);
  seq.insert(seq.end(), ex.response.begin(), ex.response.end());
  seq.pop_back();  // the final target is never an input
  return seq;
}

std::size_t response_token_total(std::span<const TokenizedExample> batch) {
  std::size_t n = 0;
  for (const auto& ex : batch) n += ex.response.size();
  return n;
}

void check_tokenized(const TokenizedExample& ex) {
  if (ex.prompt.empty()) throw ContractError("tokenized example has an empty prompt");
  if (ex.response.empty()) throw ContractError("tokenized example has an empty response");
}

// NLL of one response under `logits`, scaled by `scale`, gradient written into dlogits.
double nll_rows(const TokenizedExample& ex, const Matrix& logits, Matrix& dlogits, double scale) {
  double loss = 0.0;
  for (std::size_t j = 0; j < ex.response.size(); ++j) {
    const std::size_t row = ex.prompt.size() - 1 + j;
    const auto lr = logits.row(row);
    const double lse = logsumexp(lr);
    const auto target = static_cast<std::size_t>(ex.response[j]);
    loss -= (lr[target] - lse) * scale;
    auto dr = dlogits.row(row);
    for (std::size_t v = 0; v < lr.size(); ++v) dr[v] += std::exp(lr[v] - lse) * scale;
    dr[target] -= scale;
  }
  return loss;
}

std::vector<TokenizedExample> tokenize_safe(const ToyLM& model, std::span<const TrainingExample> batch,
                                            bool benign_only) {
  std::vector<TokenizedExample> out;
  for (const auto& ex : batch) {
    if (benign_only && ex.category != Category::benign)
      throw ContractError("forward KL takes benign examples only, got harmful '" + ex.prompt_id + "'");
    if (!ex.guard.safe()) continue;
    out.push_back(tokenize_example(ex, model));
  }
  return out;
}

double kl_rows(const TokenizedExample& ex, const Matrix& ref_logits, const Matrix& logits, Matrix& dlogits,
               double scale) {
  double loss = 0.0;
  for (std::size_t j = 0; j < ex.response.size(); ++j) {
    const std::size_t row = ex.prompt.size() - 1 + j;
    const auto lr = ref_logits.row(row);
    const auto ls = logits.row(row);
    const double lse_r = logsumexp(lr);
    const double lse_s = logsumexp(ls);
    auto dr = dlogits.row(row);
    double kl = 0.0;
    for (std::size_t v = 0; v < ls.size(); ++v) {
      const double pr = std::exp(lr[v] - lse_r);
      const double ps = std::exp(ls[v] - lse_s);
      if (pr > 0.0) kl += pr * ((lr[v] - lse_r) - (ls[v] - lse_s));
      dr[v] += (ps - pr) * scale;
    }
    loss += kl * scale;
  }
  return loss;
}

}  // namespace

TokenizedExample tokenize_example(const TrainingExample& ex, const ToyLM& model) {
  TokenizedExample out{prompt_tokens(ex.prompt_text), response_tokens(ex.raw_text)};
  const std::size_t total = out.prompt.size() + out.response.size();
  if (total > static_cast<std::size_t>(model.config().context_len))
    throw ValidationError("example '" + ex.prompt_id + "' has " + std::to_string(total) +
                          " tokens, more than context_len " + std::to_string(model.config().context_len));
  return out;
}

LossAndGrad nll_loss(const ToyLM& model, std::span<const TokenizedExample> batch, const ForwardOptions& options) {
  const std::size_t n = response_token_total(batch);
  if (n == 0) return {0.0, std::vector<double>(model.trainable_params().size(), 0.0)};
  LossClosure closure;
  for (const auto& ex : batch) {
    check_tokenized(ex);
    closure.sequences.push_back(model_input(ex));
  }
  const double scale = 1.0 / static_cast<double>(n);
  closure.objective = [&](std::size_t i, const Matrix& logits, Matrix& dlogits) {
    return nll_rows(batch[i], logits, dlogits, scale);
  };
  return loss_and_grad(model, closure, options);
}

LossAndGrad sft_loss(const ToyLM& model, std::span<const TrainingExample> batch, const ForwardOptions& options) {
  const auto safe = tokenize_safe(model, batch, false);
  return nll_loss(model, safe, options);
}

LossAndGrad forward_kl_loss(const ToyLM& student, const ReferenceSnapshot& reference,
                            std::span<const TrainingExample> benign_batch, const ForwardOptions& options) {
  const auto data = tokenize_safe(student, benign_batch, true);
  const std::size_t n = response_token_total(data);
  if (n == 0) return {0.0, std::vector<double>(student.trainable_params().size(), 0.0)};
  LossClosure closure;
  for (const auto& ex : data) closure.sequences.push_back(model_input(ex));
  const double scale = 1.0 / static_cast<double>(n);
  closure.objective = [&](std::size_t i, const Matrix& logits, Matrix& dlogits) {
    const Matrix ref = reference.forward_logits(closure.sequences[i]);
    return kl_rows(data[i], ref, logits, dlogits, scale);
  };
  return loss_and_grad(student, closure, options);
}

LossAndGrad sft_kl_loss(const ToyLM& student, const ReferenceSnapshot& reference,
                        std::span<const TrainingExample> batch, const ForwardOptions& options) {
  std::vector<TrainingExample> harmful, benign;
  for (const auto& ex : batch) (ex.category == Category::harmful ? harmful : benign).push_back(ex);
  LossAndGrad out = sft_loss(student, harmful, options);
  const LossAndGrad kl = forward_kl_loss(student, reference, benign, options);
  out.loss += kl.loss;
  for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += kl.grad[i];
  return out;
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, double base_lr, double warmup_frac) {
  if (total_steps <= 0 || step >= total_steps || step < 0) return 0.0;
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void optimizer_step(OptimizerState& state, std::span<double> params, std::span<const double> grads, double lr,
                    double weight_decay) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractError("optimizer shapes disagree");
  for (double g : grads)
    if (!std::isfinite(g)) throw Error("non-finite gradient");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] *= decay;
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

std::string_view to_string(SftObjective o) { return o == SftObjective::sft ? "sft" : "sft_kl"; }

SftObjective parse_sft_objective(std::string_view s) {
  if (s == "sft") return SftObjective::sft;
  if (s == "sft_kl") return SftObjective::sft_kl;
  throw ConfigError("unknown training objective: " + std::string(s));
}

void SftConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be finite and >= 0");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (lora) lora->validate();
}

namespace {

using BatchLoss = std::function<LossAndGrad(std::span<const std::size_t> indices, const ForwardOptions& options)>;

std::vector<TrainLogEntry> run_loop(ToyLM& model, std::size_t n, const SftConfig& cfg, const BatchLoss& batch_loss) {
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const auto total = static_cast<std::int64_t>(per_epoch * static_cast<std::size_t>(cfg.epochs));
  OptimizerState state(model.trainable_params().size());
  Rng dropout_rng(derive_seed(cfg.seed, "train/dropout"));
  ForwardOptions options{Pass::training, model.has_lora() ? &dropout_rng : nullptr};
  std::vector<TrainLogEntry> log;
  log.reserve(static_cast<std::size_t>(total));
  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, "train/shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t lo = b * batch;
      const std::size_t hi = std::min(n, lo + batch);
      const double lr = lr_schedule(step, total, cfg.base_lr, cfg.warmup_frac);
      const LossAndGrad lg = batch_loss(std::span<const std::size_t>(order).subspan(lo, hi - lo), options);
      optimizer_step(state, model.trainable_params(), lg.grad, lr, cfg.weight_decay);
      log.push_back({step, lr, lg.loss});
    }
  }
  return log;
}

void prepare(ToyLM& model, const SftConfig& cfg) {
  cfg.validate();
  if (cfg.lora && !model.has_lora()) model.attach_lora(*cfg.lora, derive_seed(cfg.seed, "train/lora"));
}

}  // namespace

std::vector<TrainLogEntry> train_sft(ToyLM& model, const std::vector<TrainingExample>& dataset, const SftConfig& cfg) {
  if (dataset.empty()) throw ContractError("training dataset is empty");
  cfg.validate();
  for (const auto& ex : dataset) tokenize_example(ex, model);
  std::optional<ReferenceSnapshot> reference;
  if (cfg.objective == SftObjective::sft_kl) reference.emplace(model);
  prepare(model, cfg);
  std::vector<TrainingExample> scratch;
  return run_loop(model, dataset.size(), cfg, [&](std::span<const std::size_t> idx, const ForwardOptions& options) {
    scratch.clear();
    for (std::size_t i : idx) scratch.push_back(dataset[i]);
    if (reference) return sft_kl_loss(model, *reference, scratch, options);
    return sft_loss(model, scratch, options);
  });
}

std::vector<TrainLogEntry> train_nll(ToyLM& model, const std::vector<TokenizedExample>& data, const SftConfig& cfg) {
  if (data.empty()) throw ContractError("training data is empty");
  prepare(model, cfg);
  std::vector<TokenizedExample> scratch;
  return run_loop(model, data.size(), cfg, [&](std::span<const std::size_t> idx, const ForwardOptions& options) {
    scratch.clear();
    for (std::size_t i : idx) scratch.push_back(data[i]);
    return nll_loss(model, scratch, options);
  });
}

std::string train_log_to_jsonl(const std::vector<TrainLogEntry>& log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["lr"] = e.lr;
    j["loss"] = e.loss;
    out += dump_compact(j);
    out += '\n';
  }
  return out;
}

}  // namespace thinksafe
