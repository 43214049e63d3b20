#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "catch_amalgamated.hpp"
#include "support.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/train.hpp"

using namespace thinksafe;
using thinksafe::testing::check_gradient;
using thinksafe::testing::make_example;
using thinksafe::testing::tiny_ngram;
using thinksafe::testing::tiny_transformer;

namespace {

ModelConfig unigram() {
  ModelConfig c;
  c.arch = Architecture::ngram_logit_table;
  c.ngram_n = 1;
  c.ngram_buckets = 1;
  c.context_len = 32;
  c.init_std = 0.0;
  return c;
}

ToyLM unigram_with(std::initializer_list<std::pair<int, double>> logits) {
  std::vector<double> row(Vocab::kSize, 0.0);
  for (const auto& [tok, v] : logits) row[tok] = v;
  return ToyLM::from_parts(unigram(), 0, row, std::nullopt, 0, {});
}

std::vector<TrainingExample> mixed_batch() {
  return {make_example("h1", Category::harmful, "bomb?", "risky", "no"),
          make_example("b1", Category::benign, "bread?", "flour", "bake it"),
          make_example("h2", Category::harmful, "poison?", "", "I won't"),
          make_example("b2", Category::benign, "soup?", "stock", "simmer")};
}

std::vector<TrainingExample> only(const std::vector<TrainingExample>& xs, Category c) {
  std::vector<TrainingExample> out;
  for (const auto& x : xs)
    if (x.category == c) out.push_back(x);
  return out;
}

}  // namespace

TEST_CASE("a uniform model has loss ln |V|") {
  const auto model = ToyLM::init(unigram(), 0);
  const std::vector<TrainingExample> batch = {make_example("b", Category::benign, "p", "r", "a")};
  CHECK(std::abs(sft_loss(model, batch).loss - std::log(260.0)) <= 1e-12);
}

TEST_CASE("unsafe examples contribute exactly nothing") {
  auto model = ToyLM::init(tiny_transformer(48), 3);
  auto batch = mixed_batch();
  const auto clean = sft_loss(model, batch);
  batch.insert(batch.begin() + 1, make_example("u", Category::harmful, "x", "do this", "then that", false));
  const auto with_unsafe = sft_loss(model, batch);
  CHECK(std::memcmp(&clean.loss, &with_unsafe.loss, sizeof(double)) == 0);
  REQUIRE(clean.grad.size() == with_unsafe.grad.size());
  CHECK(std::memcmp(clean.grad.data(), with_unsafe.grad.data(), clean.grad.size() * sizeof(double)) == 0);
}

TEST_CASE("sft_loss is the token-pooled NLL of the response") {
  const auto model = ToyLM::init(tiny_transformer(48), 5);
  const auto batch = mixed_batch();
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    const auto lp = sequence_logprob(model, prompt_tokens(ex.prompt_text), response_tokens(ex.raw_text));
    total -= lp.total;
    tokens += lp.per_token.size();
  }
  CHECK(std::abs(sft_loss(model, batch).loss - total / static_cast<double>(tokens)) <= 1e-12);
}

TEST_CASE("sft_loss is permutation invariant") {
  const auto model = ToyLM::init(tiny_transformer(48), 5);
  auto batch = mixed_batch();
  const auto ref = sft_loss(model, batch);
  std::mt19937 gen(1);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(batch.begin(), batch.end(), gen);
    const auto r = sft_loss(model, batch);
    CHECK(std::abs(r.loss - ref.loss) <= 1e-12);
    for (std::size_t i = 0; i < r.grad.size(); ++i) CHECK(std::abs(r.grad[i] - ref.grad[i]) <= 1e-12);
  }
}

TEST_CASE("sft_loss gradients match finite differences") {
  auto model = ToyLM::init(tiny_transformer(48), 6);
  const auto batch = mixed_batch();
  const auto lg = sft_loss(model, batch);
  const auto r = check_gradient(model, lg.grad, [&](const ToyLM& m) { return sft_loss(m, batch).loss; });
  CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("overlong examples are rejected by prompt id") {
  const auto model = ToyLM::init(tiny_transformer(8), 1);
  const auto ex = make_example("long-one", Category::benign, "prompt", "reasoning", "answer");
  CHECK_THROWS_MATCHES(tokenize_example(ex, model), ValidationError,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("long-one")));
  const std::vector<TrainingExample> batch = {ex};
  CHECK_THROWS_AS(sft_loss(model, batch), ValidationError);
}

TEST_CASE("forward KL of a model against itself is zero") {
  const auto model = ToyLM::init(tiny_transformer(48), 9);
  const auto benign = only(mixed_batch(), Category::benign);
  const auto r = forward_kl_loss(model, snapshot_reference(model), benign);
  CHECK(std::abs(r.loss) <= 1e-12);
  for (double g : r.grad) CHECK(std::abs(g) <= 1e-12);
}

TEST_CASE("forward KL of a point mass against a two-way split is ln 2") {
  const auto reference = unigram_with({{'a', 1e4}});
  const auto student = unigram_with({{'a', 1e4}, {'b', 1e4}});
  const std::vector<TrainingExample> batch = {make_example("b", Category::benign, "p", "xy", "z")};
  CHECK(std::abs(forward_kl_loss(student, snapshot_reference(reference), batch).loss - std::log(2.0)) <= 1e-12);
}

TEST_CASE("forward KL is non-negative") {
  const std::vector<TrainingExample> batch = {make_example("b", Category::benign, "pq", "r", "a")};
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto student = ToyLM::init(tiny_ngram(), seed);
    const auto reference = ToyLM::init(tiny_ngram(), seed + 5000);
    CHECK(forward_kl_loss(student, snapshot_reference(reference), batch).loss >= 0.0);
  }
}

TEST_CASE("forward KL gradients match finite differences") {
  auto student = ToyLM::init(tiny_transformer(48), 10);
  const auto reference = snapshot_reference(ToyLM::init(tiny_transformer(48), 11));
  const auto benign = only(mixed_batch(), Category::benign);
  const auto lg = forward_kl_loss(student, reference, benign);
  const auto r =
      check_gradient(student, lg.grad, [&](const ToyLM& m) { return forward_kl_loss(m, reference, benign).loss; });
  CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("forward KL refuses harmful examples") {
  const auto model = ToyLM::init(tiny_transformer(48), 1);
  CHECK_THROWS_AS(forward_kl_loss(model, snapshot_reference(model), mixed_batch()), ContractError);
}

TEST_CASE("the mixed objective adds the harmful NLL and the benign KL") {
  const auto student = ToyLM::init(tiny_transformer(48), 12);
  const auto reference = snapshot_reference(ToyLM::init(tiny_transformer(48), 13));
  const auto batch = mixed_batch();
  const auto mixed = sft_kl_loss(student, reference, batch);
  const auto nll = sft_loss(student, only(batch, Category::harmful));
  const auto kl = forward_kl_loss(student, reference, only(batch, Category::benign));
  CHECK(std::abs(mixed.loss - (nll.loss + kl.loss)) <= 1e-12);
  for (std::size_t i = 0; i < mixed.grad.size(); ++i) CHECK(std::abs(mixed.grad[i] - (nll.grad[i] + kl.grad[i])) <= 1e-12);
}

TEST_CASE("lr_schedule endpoints") {
  CHECK(lr_schedule(0, 100, 1e-5, 0.1) == 0.0);
  CHECK(lr_schedule(10, 100, 1e-5, 0.1) == 1e-5);
  CHECK(lr_schedule(5, 100, 1e-5, 0.1) == Catch::Approx(5e-6).epsilon(1e-12));
  CHECK(lr_schedule(100, 100, 1e-5, 0.1) == 0.0);
  CHECK(lr_schedule(55, 100, 1e-5, 0.1) == Catch::Approx(5e-6).epsilon(1e-12));
  CHECK(lr_schedule(0, 10, 2.0, 0.0) == 2.0);
}

TEST_CASE("lr_schedule is continuous") {
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<std::int64_t> total(1, 3000);
  std::uniform_real_distribution<double> frac(0.0, 0.5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::int64_t n = total(gen);
    const double wf = frac(gen);
    const auto warmup = static_cast<std::int64_t>(std::ceil(wf * static_cast<double>(n)));
    const double bound = std::max(warmup > 0 ? 1.0 / static_cast<double>(warmup) : 0.0, std::numbers::pi / n);
    for (std::int64_t s = 0; s < n; ++s) {
      const double a = lr_schedule(s, n, 1.0, wf), b = lr_schedule(s + 1, n, 1.0, wf);
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
      if (s > 0 || warmup > 0) CHECK(std::abs(b - a) <= bound + 1e-15);
    }
  }
}

TEST_CASE("optimizer_step matches a scalar AdamW") {
  std::vector<double> params = {0.5, -1.0, 2.0};
  OptimizerState state(params.size());
  // Independent scalar implementation.
  std::vector<double> ref = params, m(3, 0.0), v(3, 0.0);
  const double lr = 0.01, wd = 0.1;
  std::mt19937_64 gen(5);
  std::normal_distribution<double> normal;
  for (int t = 1; t <= 20; ++t) {
    std::vector<double> g(3);
    for (double& x : g) x = normal(gen);
    optimizer_step(state, params, g, lr, wd);
    for (int i = 0; i < 3; ++i) {
      ref[i] -= lr * wd * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      ref[i] -= lr * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
    }
  }
  CHECK(state.step == 20);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(params[i] - ref[i]) <= 1e-14);
}

TEST_CASE("weight decay is decoupled from the gradient") {
  std::vector<double> params = {1.0, -3.0};
  OptimizerState state(2);
  const std::vector<double> zero = {0.0, 0.0};
  optimizer_step(state, params, zero, 0.1, 0.0);
  CHECK(params == std::vector<double>{1.0, -3.0});
  optimizer_step(state, params, zero, 0.1, 0.5);
  CHECK(params[0] == 1.0 * (1.0 - 0.1 * 0.5));
  CHECK(params[1] == -3.0 * (1.0 - 0.1 * 0.5));
}

TEST_CASE("non-finite gradients are an error") {
  std::vector<double> params = {1.0};
  OptimizerState state(1);
  const std::vector<double> bad = {INFINITY};
  CHECK_THROWS_AS(optimizer_step(state, params, bad, 0.1, 0.0), Error);
  CHECK(params[0] == 1.0);
}

TEST_CASE("AdamW finds the minimum of a quadratic") {
  // f(x) = 2 (x - 3)^2, minimum at 3.
  std::vector<double> x = {-4.0};
  OptimizerState state(1);
  const int steps = 5000;
  for (int s = 0; s < steps; ++s) {
    const std::vector<double> g = {4.0 * (x[0] - 3.0)};
    optimizer_step(state, x, g, lr_schedule(s, steps, 0.05, 0.0), 0.0);
  }
  CHECK(std::abs(x[0] - 3.0) <= 1e-6);
}

TEST_CASE("train_sft logs epochs times batches") {
  auto model = ToyLM::init(tiny_transformer(48), 2);
  SftConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 3;
  cfg.lora = LoraConfig{2, 4.0, 0.05};
  const auto log = train_sft(model, mixed_batch(), cfg);
  REQUIRE(log.size() == 4);
  for (std::size_t i = 0; i < log.size(); ++i) CHECK(log[i].step == static_cast<std::int64_t>(i));
  CHECK(log[0].lr == 0.0);
  CHECK(model.has_lora());
}

TEST_CASE("train_sft with zero learning rate changes nothing") {
  auto model = ToyLM::init(tiny_transformer(48), 2);
  const std::vector<double> before(model.base_params().begin(), model.base_params().end());
  SftConfig cfg;
  cfg.base_lr = 0.0;
  cfg.lora.reset();
  train_sft(model, mixed_batch(), cfg);
  CHECK(std::equal(before.begin(), before.end(), model.base_params().begin()));
}

TEST_CASE("train_sft is deterministic in the seed") {
  SftConfig cfg;
  cfg.base_lr = 1e-2;
  cfg.lora = LoraConfig{2, 4.0, 0.05};
  cfg.seed = 4;
  auto a = ToyLM::init(tiny_transformer(48), 2), b = a;
  const auto la = train_sft(a, mixed_batch(), cfg);
  const auto lb = train_sft(b, mixed_batch(), cfg);
  CHECK(la == lb);
  CHECK(std::equal(a.lora_params().begin(), a.lora_params().end(), b.lora_params().begin()));
  cfg.seed = 5;
  auto c = ToyLM::init(tiny_transformer(48), 2);
  train_sft(c, mixed_batch(), cfg);
  CHECK_FALSE(std::equal(a.lora_params().begin(), a.lora_params().end(), c.lora_params().begin()));
}

TEST_CASE("train_sft leaves base weights untouched when adapting") {
  auto model = ToyLM::init(tiny_transformer(48), 2);
  const std::vector<double> before(model.base_params().begin(), model.base_params().end());
  SftConfig cfg;
  cfg.base_lr = 1e-2;
  cfg.weight_decay = 0.01;
  cfg.lora = LoraConfig{2, 4.0, 0.05};
  train_sft(model, mixed_batch(), cfg);
  CHECK(std::memcmp(before.data(), model.base_params().data(), before.size() * sizeof(double)) == 0);
}

TEST_CASE("train_sft memorizes a repeated example") {
  ModelConfig c = tiny_transformer(48);
  c.width = 16;
  c.n_heads = 2;
  c.ff_width = 32;
  c.init_std = 0.1;
  auto model = ToyLM::init(c, 1);
  const auto ex = make_example("h", Category::harmful, "how?", "it is harmful", "no.");
  SftConfig cfg;
  cfg.epochs = 150;
  cfg.batch_size = 1;
  cfg.base_lr = 1e-2;
  cfg.lora.reset();
  train_sft(model, {ex}, cfg);
  const std::vector<TrainingExample> batch = {ex};
  CHECK(sft_loss(model, batch).loss < 0.1);
}

TEST_CASE("train_sft rejects empty datasets and bad configs") {
  auto model = ToyLM::init(tiny_transformer(48), 2);
  CHECK_THROWS_AS(train_sft(model, {}, SftConfig{}), Error);
  SftConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train_sft(model, mixed_batch(), bad), ConfigError);
  bad = SftConfig{};
  bad.warmup_frac = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("the sft_kl objective needs no reference outside the loop") {
  auto model = ToyLM::init(tiny_transformer(48), 2);
  SftConfig cfg;
  cfg.objective = SftObjective::sft_kl;
  cfg.epochs = 1;
  cfg.lora = LoraConfig{2, 4.0, 0.0};
  const auto log = train_sft(model, mixed_batch(), cfg);
  // The first step's reference is the student itself, so the benign part is zero.
  const auto harmful = only(mixed_batch(), Category::harmful);
  ToyLM fresh = ToyLM::init(tiny_transformer(48), 2);
  const auto expected = sft_loss(fresh, harmful).loss;
  CHECK(log.front().loss == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("train log lines carry step, lr and loss") {
  const std::string text = train_log_to_jsonl({{0, 0.0, 1.5}, {1, 1e-5, 1.25}});
  CHECK(text == "{\"step\":0,\"lr\":0.0,\"loss\":1.5}\n{\"step\":1,\"lr\":1e-05,\"loss\":1.25}\n");
}
