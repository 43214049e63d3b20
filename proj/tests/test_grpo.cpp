#include <cmath>
#include <cstring>
#include <random>

#include "catch_amalgamated.hpp"
#include "support.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/grpo.hpp"

using namespace thinksafe;
using thinksafe::testing::check_gradient;
using thinksafe::testing::tiny_transformer;

namespace {

class FixedGuard : public Guard {
 public:
  explicit FixedGuard(double p) : p_(p) {}
  std::string id() const override { return "fixed"; }
  double threshold() const override { return 0.5; }
  GuardVerdict classify(const std::string&, const std::string&) const override { return verdict(p_); }

 private:
  double p_;
};

// Flags any lowercase letter, so random byte rollouts get mixed rewards.
LexiconGuard letter_guard() {
  Lexicon lex;
  for (char c = 'a'; c <= 'z'; ++c) lex.forbidden_terms.insert(std::string(1, c));
  lex.refusal_markers = {"sorry"};
  return LexiconGuard(lex);
}

GrpoConfig small_config() {
  GrpoConfig c;
  c.group_size = 4;
  c.decode.temperature = 1.0;
  c.decode.top_k = 0;
  c.decode.top_p = 1.0;
  c.decode.max_tokens = 6;
  c.lora.reset();
  c.steps = 3;
  c.base_lr = 1e-2;
  c.warmup_frac = 0.0;
  return c;
}

std::vector<PromptRecord> prompts() {
  return {{"p1", Category::harmful, "how?", ""}, {"p2", Category::harmful, "why?", ""}, {"p3", Category::benign, "hi", ""}};
}

}  // namespace

TEST_CASE("format reward examples") {
  CHECK(format_reward("<think>a</think>b", TagMode::paired) == 1);
  CHECK(format_reward("<think>a</think><think>c</think>d", TagMode::paired) == 0);
  CHECK(format_reward("a</think>b", TagMode::closing_only) == 1);
  CHECK(format_reward("<think>a</think>b", TagMode::closing_only) == 0);
  CHECK(format_reward("plain", TagMode::paired) == 0);
  CHECK(format_reward("plain", TagMode::closing_only) == 0);
}

TEST_CASE("format reward is the well-formed bit of the parser") {
  std::mt19937 gen(3);
  const std::vector<std::string> pieces = {"<think>", "</think>", "x", " "};
  std::uniform_int_distribution<std::size_t> pick(0, pieces.size() - 1), len(0, 6);
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    for (std::size_t n = len(gen); n > 0; --n) s += pieces[pick(gen)];
    for (TagMode m : {TagMode::paired, TagMode::closing_only})
      CHECK(format_reward(s, m) == (parse_reasoning(s, m).well_formed ? 1 : 0));
  }
}

TEST_CASE("total reward examples") {
  CHECK(total_reward(FixedGuard(0.5), "p", "<think>a</think>b", {}, TagMode::paired) == 1.5);
  CHECK(total_reward(FixedGuard(0.0), "p", "b", {}, TagMode::paired) == 0.0);
  CHECK(total_reward(FixedGuard(0.3), "p", "<think>a</think>b", {1.0, 0.0}, TagMode::paired) == 0.3);
  CHECK(total_reward(FixedGuard(0.3), "p", "<think>a</think>b", {2.0, 0.5}, TagMode::paired) == Catch::Approx(1.1));
}

TEST_CASE("lexicon rewards stay inside (0, 2)") {
  const auto guard = letter_guard();
  for (const char* raw : {"<think>x</think>y", "<think>1</think>2", "", "zzz"}) {
    const double r = total_reward(guard, "p", raw, {}, TagMode::paired);
    CHECK(r > 0.0);
    CHECK(r < 2.0);
  }
}

TEST_CASE("group advantages examples") {
  CHECK(group_advantages(std::vector<double>{1, 0, 1, 0}) == std::vector<double>{1, -1, 1, -1});
  CHECK(group_advantages(std::vector<double>{0.7, 0.7, 0.7, 0.7}) == std::vector<double>{0, 0, 0, 0});
  CHECK_THROWS_AS(group_advantages(std::vector<double>{1.0}), ContractError);
}

TEST_CASE("group advantages are normalized") {
  std::mt19937_64 gen(1);
  std::uniform_int_distribution<int> size(2, 16);
  std::uniform_real_distribution<double> reward(0.0, 2.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(size(gen));
    for (double& x : r) x = reward(gen);
    const auto a = group_advantages(r);
    double mean = 0.0, var = 0.0;
    for (double x : a) mean += x;
    CHECK(std::abs(mean) <= 1e-10 * a.size());
    mean /= static_cast<double>(a.size());
    for (double x : a) var += (x - mean) * (x - mean);
    CHECK(std::abs(std::sqrt(var / a.size()) - 1.0) <= 1e-9);
  }
}

TEST_CASE("clipped surrogate") {
  CHECK(clipped_surrogate(1.5, 1.0, 0.2) == Catch::Approx(1.2).epsilon(1e-15));
  CHECK(clipped_surrogate(0.5, 1.0, 0.2) == 0.5);
  CHECK(clipped_surrogate(0.5, -1.0, 0.2) == Catch::Approx(-0.8).epsilon(1e-15));
  CHECK(clipped_surrogate(1.5, -1.0, 0.2) == -1.5);
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> ratio(0.0, 3.0), adv(-3.0, 3.0);
  for (int i = 0; i < 5000; ++i) {
    const double r = ratio(gen), a = adv(gen);
    const double s = clipped_surrogate(r, a, 0.2);
    CHECK(std::abs(s) <= std::max(r, 1.2) * std::abs(a) + 1e-15);
    if (r >= 0.8 && r <= 1.2) CHECK(s == r * a);
  }
}

TEST_CASE("on-policy loss with beta 0 is minus the mean advantage") {
  const auto model = ToyLM::init(tiny_transformer(32), 3);
  const auto guard = letter_guard();
  auto cfg = small_config();
  cfg.kl_beta = 0.0;
  std::vector<RolloutGroup> groups;
  for (std::uint64_t s = 0; s < 3; ++s) groups.push_back(sample_group(model, prompts()[s], guard, cfg, s));
  const auto r = grpo_loss(model, snapshot_reference(model), groups, cfg);
  CHECK(std::abs(r.loss) <= 1e-12);
  CHECK(r.mean_kl == 0.0);
  bool any_advantage = false;
  for (const auto& g : groups)
    for (const auto& ro : g.rollouts) any_advantage |= ro.advantage != 0.0;
  if (any_advantage) {
    double norm = 0.0;
    for (double g : r.grad) norm += g * g;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("grpo_loss gradients match finite differences") {
  auto model = ToyLM::init(tiny_transformer(32), 4);
  const auto reference = snapshot_reference(ToyLM::init(tiny_transformer(32), 5));
  auto cfg = small_config();
  cfg.kl_beta = 0.5;
  RolloutGroup g = sample_group(model, prompts()[0], FixedGuard(0.9), cfg, 7);
  const std::vector<double> adv = {1.0, -0.5, 0.8, -1.3};
  for (std::size_t i = 0; i < adv.size(); ++i) g.rollouts[i].advantage = adv[i];
  // Move the policy so the ratios leave 1.
  std::mt19937_64 gen(6);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (double& p : model.base_params_mut()) p += normal(gen);
  const std::vector<RolloutGroup> groups = {g};
  const auto lg = grpo_loss(model, reference, groups, cfg);
  const auto r = check_gradient(model, lg.grad, [&](const ToyLM& m) { return grpo_loss(m, reference, groups, cfg).loss; });
  CHECK(r.max_rel_err <= 1e-4);
  CHECK(lg.mean_kl > 0.0);
}

TEST_CASE("grpo_loss needs recorded old log-probabilities") {
  const auto model = ToyLM::init(tiny_transformer(32), 4);
  auto cfg = small_config();
  RolloutGroup g = sample_group(model, prompts()[0], FixedGuard(0.9), cfg, 7);
  g.rollouts[1].old_logprobs.clear();
  const std::vector<RolloutGroup> groups = {g};
  CHECK_THROWS_AS(grpo_loss(model, snapshot_reference(model), groups, cfg), ContractError);
}

TEST_CASE("the KL penalty vanishes at the reference and is otherwise positive") {
  const auto model = ToyLM::init(tiny_transformer(32), 4);
  auto cfg = small_config();
  const std::vector<RolloutGroup> groups = {sample_group(model, prompts()[0], FixedGuard(0.9), cfg, 1)};
  CHECK(grpo_loss(model, snapshot_reference(model), groups, cfg).mean_kl == Catch::Approx(0.0).margin(1e-15));
  CHECK(grpo_loss(model, snapshot_reference(ToyLM::init(tiny_transformer(32), 8)), groups, cfg).mean_kl > 0.0);
}

TEST_CASE("equal rewards with beta 0 leave the parameters unchanged") {
  auto model = ToyLM::init(tiny_transformer(32), 4);
  const std::vector<double> before(model.base_params().begin(), model.base_params().end());
  auto cfg = small_config();
  cfg.kl_beta = 0.0;
  cfg.weights = {1.0, 0.0};
  const auto log = train_grpo(model, prompts(), FixedGuard(0.7), cfg);
  CHECK(log.size() == 3);
  CHECK(std::memcmp(before.data(), model.base_params().data(), before.size() * sizeof(double)) == 0);
}

TEST_CASE("train_grpo is deterministic in the seed") {
  auto cfg = small_config();
  cfg.seed = 11;
  auto a = ToyLM::init(tiny_transformer(32), 4), b = a;
  const auto la = train_grpo(a, prompts(), letter_guard(), cfg);
  const auto lb = train_grpo(b, prompts(), letter_guard(), cfg);
  CHECK(la == lb);
  CHECK(std::memcmp(a.base_params().data(), b.base_params().data(), a.base_params().size_bytes()) == 0);
}

TEST_CASE("a huge KL weight keeps the policy near the reference") {
  auto cfg = small_config();
  cfg.steps = 15;
  cfg.prompts_per_step = 2;
  const ToyLM base = ToyLM::init(tiny_transformer(32), 9);
  std::vector<TokenSeq> probes;
  for (const auto& p : prompts()) probes.push_back(prompt_tokens(p.text));
  const auto reference = snapshot_reference(base);

  ToyLM loose = base, tight = base;
  cfg.kl_beta = 0.04;
  train_grpo(loose, prompts(), letter_guard(), cfg);
  cfg.kl_beta = 1e3;
  train_grpo(tight, prompts(), letter_guard(), cfg);
  const double kl_loose = probe_kl(loose, reference, probes), kl_tight = probe_kl(tight, reference, probes);
  INFO("probe KL beta=0.04 " << kl_loose << ", beta=1e3 " << kl_tight);
  CHECK(kl_tight < kl_loose);
}

TEST_CASE("invalid GRPO settings are rejected") {
  auto model = ToyLM::init(tiny_transformer(32), 4);
  auto cfg = small_config();
  cfg.group_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.clip_eps = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.kl_beta = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(train_grpo(model, {}, letter_guard(), small_config()), ContractError);
}

TEST_CASE("GRPO log lines carry step, reward, KL and loss") {
  const std::string text = grpo_log_to_jsonl({{0, 1.5, 0.0, -0.25}});
  CHECK(text == "{\"step\":0,\"mean_reward\":1.5,\"mean_kl\":0.0,\"loss\":-0.25}\n");
}
