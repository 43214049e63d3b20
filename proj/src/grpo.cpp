#include "thinksafe/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "thinksafe/decode.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/json_util.hpp"
#include "thinksafe/rng.hpp"
#include "thinksafe/train.hpp"

namespace thinksafe {

void GrpoConfig::validate() const {
  if (group_size < 2) throw ConfigError("group_size must be >= 2");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("clip_eps must be in (0, 1)");
  if (!(kl_beta >= 0.0) || !std::isfinite(kl_beta)) throw ConfigError("kl_beta must be finite and >= 0");
  if (inner_epochs < 1) throw ConfigError("inner_epochs must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (prompts_per_step < 1) throw ConfigError("prompts_per_step must be >= 1");
  if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be finite and >= 0");
  if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("warmup_frac must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  decode.validate();
  if (lora) lora->validate();
}

int format_reward(std::string_view raw_text, TagMode mode) { return parse_reasoning(raw_text, mode).well_formed ? 1 : 0; }

double total_reward(const Guard& guard, const std::string& prompt, const std::string& raw_text,
                    const RewardWeights& weights, TagMode mode) {
  const GuardVerdict v = guard.classify(prompt, raw_text);
  return weights.safety * v.p_safe + weights.format * format_reward(raw_text, mode);
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ContractError("a rollout group needs at least two rewards");
  const auto g = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / g;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / g);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd < 1e-8) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

double clipped_surrogate(double ratio, double advantage, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * advantage, clipped * advantage);
}

namespace {

struct FlatRollout {
  const RolloutGroup* group;
  const Rollout* rollout;
};

}  // namespace

GrpoLoss grpo_loss(const ToyLM& model, const ReferenceSnapshot& reference, std::span<const RolloutGroup> groups,
                   const GrpoConfig& cfg, const ForwardOptions& options) {
  std::vector<FlatRollout> flat;
  LossClosure closure;
  for (const auto& g : groups) {
    if (g.prompt.empty()) throw ContractError("rollout group '" + g.prompt_id + "' has no prompt tokens");
    for (const auto& r : g.rollouts) {
      if (r.tokens.empty()) throw ContractError("rollout without tokens in group '" + g.prompt_id + "'");
      if (r.old_logprobs.size() != r.tokens.size())
        throw ContractError("rollout in group '" + g.prompt_id + "' is missing old log-probabilities");
      flat.push_back({&g, &r});
      TokenSeq seq(g.prompt);
      seq.insert(seq.end(), r.tokens.begin(), r.tokens.end());
      seq.pop_back();
      closure.sequences.push_back(std::move(seq));
    }
  }
  GrpoLoss out;
  if (flat.empty()) {
    out.grad.assign(model.trainable_params().size(), 0.0);
    return out;
  }
  const double inv_n = 1.0 / static_cast<double>(flat.size());
  const double beta = cfg.kl_beta;
  double kl_sum = 0.0;
  closure.objective = [&](std::size_t i, const Matrix& logits, Matrix& dlogits) {
    const RolloutGroup& g = *flat[i].group;
    const Rollout& r = *flat[i].rollout;
    const Matrix ref = reference.forward_logits(closure.sequences[i]);
    const std::size_t L = r.tokens.size();
    const std::size_t base = g.prompt.size() - 1;
    std::vector<double> lse(L);
    double log_ratio = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      lse[j] = logsumexp(logits.row(base + j));
      log_ratio += (logits(base + j, static_cast<std::size_t>(r.tokens[j])) - lse[j]) - r.old_logprobs[j];
    }
    const double ratio = std::exp(log_ratio);
    const double A = r.advantage;
    const double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    const double surrogate = std::min(ratio * A, clipped * A);
    // The min takes the unclipped branch (and carries gradient) when ratio*A <= clipped*A.
    const double d_ratio = ratio * A <= clipped * A ? A : 0.0;
    const double g_surr = -inv_n * d_ratio * ratio;

    double kl_total = 0.0;
    std::vector<double> logdiff(logits.cols);
    const double kl_scale = inv_n * beta / static_cast<double>(L);
    for (std::size_t j = 0; j < L; ++j) {
      const std::size_t row = base + j;
      const auto z = logits.row(row);
      const auto zr = ref.row(row);
      const double lse_r = logsumexp(zr);
      double kl = 0.0;
      for (std::size_t v = 0; v < z.size(); ++v) {
        logdiff[v] = (z[v] - lse[j]) - (zr[v] - lse_r);
        kl += std::exp(z[v] - lse[j]) * logdiff[v];
      }
      kl_total += kl;
      auto d = dlogits.row(row);
      for (std::size_t v = 0; v < z.size(); ++v) {
        const double p = std::exp(z[v] - lse[j]);
        d[v] += -g_surr * p + kl_scale * p * (logdiff[v] - kl);
      }
      d[static_cast<std::size_t>(r.tokens[j])] += g_surr;
    }
    const double kl_mean = kl_total / static_cast<double>(L);
    kl_sum += kl_mean;
    return -inv_n * (surrogate - beta * kl_mean);
  };
  LossAndGrad lg = loss_and_grad(model, closure, options);
  out.loss = lg.loss;
  out.grad = std::move(lg.grad);
  out.mean_kl = kl_sum * inv_n;
  return out;
}

RolloutGroup sample_group(const ToyLM& model, const PromptRecord& prompt, const Guard& guard, const GrpoConfig& cfg,
                          std::uint64_t seed) {
  RolloutGroup g;
  g.prompt_id = prompt.id;
  g.prompt_text = prompt.text;
  g.prompt = prompt_tokens(prompt.text);
  std::vector<GuardPair> pairs;
  for (int i = 0; i < cfg.group_size; ++i) {
    Rng rng(derive_seed(seed, "rollout", static_cast<std::uint64_t>(i)));
    SampleResult s = sample(model, g.prompt, cfg.decode, rng);
    Rollout r;
    r.raw_text = Vocab::decode(s.tokens);
    r.tokens = std::move(s.tokens);
    r.old_logprobs = std::move(s.logprobs);
    r.r_format = format_reward(r.raw_text, cfg.tag_mode);
    pairs.push_back({prompt.text, r.raw_text});
    g.rollouts.push_back(std::move(r));
  }
  std::vector<GuardVerdict> verdicts;
  try {
    verdicts = guard.classify_batch(pairs);
  } catch (const BatchItemError& e) {
    throw BackendError("guard failed for prompt '" + prompt.id + "': " + e.what());
  }
  std::vector<double> rewards;
  for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
    auto& r = g.rollouts[i];
    r.r_safety = verdicts[i].p_safe;
    r.r_total = cfg.weights.safety * r.r_safety + cfg.weights.format * r.r_format;
    rewards.push_back(r.r_total);
  }
  const auto adv = group_advantages(rewards);
  for (std::size_t i = 0; i < adv.size(); ++i) g.rollouts[i].advantage = adv[i];
  return g;
}

std::vector<GrpoLogEntry> train_grpo(ToyLM& model, const std::vector<PromptRecord>& prompts, const Guard& guard,
                                     const GrpoConfig& cfg, const GrpoStepHook& after_step) {
  if (prompts.empty()) throw ContractError("GRPO needs at least one prompt");
  cfg.validate();
  const ReferenceSnapshot reference(model);
  if (cfg.lora && !model.has_lora()) model.attach_lora(*cfg.lora, derive_seed(cfg.seed, "grpo/lora"));
  OptimizerState state(model.trainable_params().size());
  Rng dropout_rng(derive_seed(cfg.seed, "grpo/dropout"));
  const ForwardOptions options{Pass::training, model.has_lora() ? &dropout_rng : nullptr};

  std::vector<std::size_t> order(prompts.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  auto next_prompt = [&]() -> const PromptRecord& {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle(derive_seed(cfg.seed, "grpo/shuffle", epoch++));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
      cursor = 0;
    }
    return prompts[order[cursor++]];
  };

  std::vector<GrpoLogEntry> log;
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<RolloutGroup> groups;
    double reward_sum = 0.0;
    std::size_t n_rollouts = 0;
    for (int k = 0; k < cfg.prompts_per_step; ++k) {
      const PromptRecord& p = next_prompt();
      const auto key = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.prompts_per_step) +
                       static_cast<std::uint64_t>(k);
      groups.push_back(sample_group(model, p, guard, cfg, derive_seed(cfg.seed, "grpo/rollout", key)));
      for (const auto& r : groups.back().rollouts) {
        reward_sum += r.r_total;
        ++n_rollouts;
      }
    }
    const double lr = lr_schedule(step, cfg.steps, cfg.base_lr, cfg.warmup_frac);
    GrpoLogEntry entry;
    entry.step = step;
    entry.mean_reward = reward_sum / static_cast<double>(n_rollouts);
    for (int inner = 0; inner < cfg.inner_epochs; ++inner) {
      const GrpoLoss gl = grpo_loss(model, reference, groups, cfg, options);
      if (inner == 0) {
        entry.loss = gl.loss;
        entry.mean_kl = gl.mean_kl;
      }
      optimizer_step(state, model.trainable_params(), gl.grad, lr, cfg.weight_decay);
    }
    log.push_back(entry);
    if (after_step) after_step(step, model);
  }
  return log;
}

std::string grpo_log_to_jsonl(const std::vector<GrpoLogEntry>& log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["mean_reward"] = e.mean_reward;
    j["mean_kl"] = e.mean_kl;
    j["loss"] = e.loss;
    out += dump_compact(j);
    out += '\n';
  }
  return out;
}

double mean_total_reward(const ToyLM& model, const std::vector<PromptRecord>& prompts, const Guard& guard,
                         const GrpoConfig& cfg, int samples, std::uint64_t seed) {
  if (prompts.empty() || samples < 1) throw ContractError("reward evaluation needs prompts and samples");
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& p : prompts) {
    const TokenSeq prompt = prompt_tokens(p.text);
    for (int i = 0; i < samples; ++i) {
      Rng rng(derive_seed(seed, p.id, static_cast<std::uint64_t>(i)));
      const SampleResult s = sample(model, prompt, cfg.decode, rng);
      sum += total_reward(guard, p.text, Vocab::decode(s.tokens), cfg.weights, cfg.tag_mode);
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

double probe_kl(const ToyLM& model, const ReferenceSnapshot& reference, std::span<const TokenSeq> contexts) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& ctx : contexts) {
    const Matrix a = model.forward_logits(ctx);
    const Matrix b = reference.forward_logits(ctx);
    for (std::size_t t = 0; t < a.rows; ++t) {
      const auto la = log_softmax(a.row(t));
      const auto lb = log_softmax(b.row(t));
      double kl = 0.0;
      for (std::size_t v = 0; v < la.size(); ++v) kl += std::exp(la[v]) * (la[v] - lb[v]);
      sum += kl;
      ++n;
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace thinksafe
