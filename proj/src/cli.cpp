#include "thinksafe/cli.hpp"

#include <ostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "thinksafe/checkpoint.hpp"
#include "thinksafe/json_util.hpp"
#include "thinksafe/pipeline.hpp"
#include "thinksafe/world.hpp"

namespace thinksafe {

namespace {

using ojson = nlohmann::ordered_json;

std::string fmt(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", *v);
  return buf;
}

void print_report(std::ostream& out, const char* title, const EvalReport& r) {
  out << title << ": harmful_ratio=" << fmt(r.harmful_ratio) << " over_refusal=" << fmt(r.over_refusal_rate)
      << " pass@1=" << fmt(r.avg_pass_at_1) << " ppl=" << fmt(r.perplexity) << "\n";
}

struct DecodeFlags {
  double temperature = 0.6;
  double top_p = 0.95;
  int top_k = 20;
  int max_tokens = 64;
  bool greedy = false;

  void add(CLI::App* app) {
    app->add_option("--temperature", temperature, "Sampling temperature")->capture_default_str();
    app->add_option("--top-p", top_p, "Nucleus mass")->capture_default_str();
    app->add_option("--top-k", top_k, "Top-k (0 disables)")->capture_default_str();
    app->add_option("--max-tokens", max_tokens, "Generation cap")->capture_default_str();
    app->add_flag("--greedy", greedy, "Argmax decoding");
  }

  DecodeParams params() const {
    DecodeParams d;
    d.temperature = temperature;
    d.top_p = top_p;
    d.top_k = top_k;
    d.max_tokens = max_tokens;
    d.greedy = greedy;
    d.validate();
    return d;
  }
};

struct LoraFlags {
  int rank = 32;
  double alpha = 16.0;
  double dropout = 0.05;
  bool none = false;

  void add(CLI::App* app) {
    app->add_option("--lora-rank", rank, "Adapter rank")->capture_default_str();
    app->add_option("--lora-alpha", alpha, "Adapter scaling numerator")->capture_default_str();
    app->add_option("--lora-dropout", dropout, "Adapter input dropout")->capture_default_str();
    app->add_flag("--full", none, "Train all base weights instead of adapters");
  }

  std::optional<LoraConfig> config() const {
    if (none) return std::nullopt;
    return LoraConfig{rank, alpha, dropout};
  }
};

std::shared_ptr<GenerationBackend> open_backend(const std::string& model, const std::string& endpoint_model) {
  if (model.rfind("http://", 0) == 0 || model.rfind("https://", 0) == 0) {
    if (endpoint_model.empty()) throw ConfigError("--endpoint-model is required with a remote --model");
    RemoteEndpoint e;
    e.base_url = model;
    e.model = endpoint_model;
    return std::make_shared<RemoteBackend>(e);
  }
  return std::make_shared<ToyBackend>(std::make_shared<const ToyLM>(load_checkpoint(model)), "toy:" + model);
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-generated safety alignment: build, train and evaluate reasoning models."};
  app.require_subcommand(1);
  std::function<void()> action;

  // run / build
  std::string config_path, output_dir;
  auto* run = app.add_subcommand("run", "Run the full pipeline described by a config file");
  run->add_option("config", config_path, "Pipeline config (JSON)")->required();
  run->add_option("--output-dir", output_dir, "Override the config's output directory");
  auto* build = app.add_subcommand("build", "Build and summarize a safety dataset from a config file");
  build->add_option("config", config_path, "Pipeline config (JSON)")->required();
  build->add_option("--output-dir", output_dir, "Override the config's output directory");
  auto run_config = [&](bool full) {
    PipelineConfig cfg = load_config(config_path);
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    if (!full) {
      cfg.train = TrainKind::none;
      cfg.eval = EvalConfig{};
      cfg.eval.perplexity = false;
      cfg.eval.evaluate_base = false;
    }
    const RunResult r = run_experiment(cfg, read_file(config_path));
    out << format_stats(r.build.stats);
    if (r.base_report) print_report(out, "base", *r.base_report);
    if (r.trained_report) print_report(out, "trained", *r.trained_report);
    out << "artifacts: " << cfg.output_dir.string() << "\n";
  };
  run->callback([&] { action = [&] { run_config(true); }; });
  build->callback([&] { action = [&] { run_config(false); }; });

  // stats
  std::string dataset_path, stats_out;
  std::size_t dropped_h = 0, dropped_b = 0;
  bool stats_json = false;
  auto* stats = app.add_subcommand("stats", "Print per-category counts, mean lengths and filtered ratios");
  stats->add_option("dataset", dataset_path, "Dataset file")->required();
  stats->add_option("--dropped-harmful", dropped_h, "Harmful prompts removed by the guard");
  stats->add_option("--dropped-benign", dropped_b, "Benign prompts removed by the guard");
  stats->add_flag("--json", stats_json, "Print JSON instead of a table");
  stats->add_option("--out", stats_out, "Also write the JSON statistics to this file");
  stats->callback([&] {
    action = [&] {
      DroppedCounts dropped;
      dropped[Category::harmful] = dropped_h;
      dropped[Category::benign] = dropped_b;
      const DatasetStats s = compute_stats(load_dataset(dataset_path), dropped);
      out << (stats_json ? stats_to_json(s) : format_stats(s));
      if (!stats_out.empty()) write_file_atomic(stats_out, stats_to_json(s));
    };
  });

  // train-sft
  std::string model_path, model_out, log_out, objective = "sft";
  std::uint64_t seed = 0;
  int epochs = 3, batch_size = 8;
  double lr = 1e-5, warmup = 0.1, weight_decay = 0.0;
  LoraFlags lora;
  auto* sft = app.add_subcommand("train-sft", "Fine-tune a toy checkpoint on a dataset (filtered NLL or NLL + KL)");
  sft->add_option("--model", model_path, "Input checkpoint")->required();
  sft->add_option("--dataset", dataset_path, "Dataset file")->required();
  sft->add_option("--out", model_out, "Output checkpoint")->required();
  sft->add_option("--objective", objective, "sft or sft_kl")->capture_default_str();
  sft->add_option("--epochs", epochs)->capture_default_str();
  sft->add_option("--batch-size", batch_size)->capture_default_str();
  sft->add_option("--lr", lr, "Peak learning rate")->capture_default_str();
  sft->add_option("--warmup-frac", warmup)->capture_default_str();
  sft->add_option("--weight-decay", weight_decay)->capture_default_str();
  sft->add_option("--seed", seed)->capture_default_str();
  sft->add_option("--log", log_out, "Write the per-step log here");
  lora.add(sft);
  sft->callback([&] {
    action = [&] {
      SftConfig c;
      c.objective = parse_sft_objective(objective);
      c.epochs = epochs;
      c.batch_size = batch_size;
      c.base_lr = lr;
      c.warmup_frac = warmup;
      c.weight_decay = weight_decay;
      c.seed = seed;
      c.lora = lora.config();
      c.validate();
      ToyLM model = load_checkpoint(model_path);
      const auto log = train_sft(model, load_dataset(dataset_path), c);
      save_checkpoint(model, model_out);
      if (!log_out.empty()) write_file_atomic(log_out, train_log_to_jsonl(log));
      out << "steps " << log.size() << " final loss " << (log.empty() ? 0.0 : log.back().loss) << "\n";
    };
  });

  // train-grpo
  std::string prompts_path, benign_path, lexicon_path, tag_mode = "paired";
  int steps = 200, group_size = 8, prompts_per_step = 1;
  double beta = 0.04, clip_eps = 0.2;
  DecodeFlags grpo_decode;
  auto* grpo = app.add_subcommand("train-grpo", "Train a toy checkpoint with GRPO on safety and format rewards");
  grpo->add_option("--model", model_path, "Input checkpoint")->required();
  grpo->add_option("--prompts", prompts_path, "Harmful prompt file")->required();
  grpo->add_option("--benign", benign_path, "Optional benign prompt file");
  grpo->add_option("--lexicon", lexicon_path, "Guard lexicon")->required();
  grpo->add_option("--out", model_out, "Output checkpoint")->required();
  grpo->add_option("--steps", steps)->capture_default_str();
  grpo->add_option("--group-size", group_size)->capture_default_str();
  grpo->add_option("--prompts-per-step", prompts_per_step)->capture_default_str();
  grpo->add_option("--beta", beta, "KL penalty weight")->capture_default_str();
  grpo->add_option("--clip-eps", clip_eps)->capture_default_str();
  grpo->add_option("--lr", lr, "Peak learning rate")->capture_default_str();
  grpo->add_option("--warmup-frac", warmup)->capture_default_str();
  grpo->add_option("--seed", seed)->capture_default_str();
  grpo->add_option("--tag-mode", tag_mode, "paired or closing_only")->capture_default_str();
  grpo->add_option("--log", log_out, "Write the per-step log here");
  grpo_decode.add(grpo);
  lora.add(grpo);
  grpo->callback([&] {
    action = [&] {
      GrpoConfig c;
      c.steps = steps;
      c.group_size = group_size;
      c.prompts_per_step = prompts_per_step;
      c.kl_beta = beta;
      c.clip_eps = clip_eps;
      c.base_lr = lr;
      c.warmup_frac = warmup;
      c.seed = seed;
      c.tag_mode = parse_tag_mode(tag_mode);
      c.decode = grpo_decode.params();
      c.lora = lora.config();
      c.validate();
      ToyLM model = load_checkpoint(model_path);
      auto prompts = load_prompts(prompts_path, Category::harmful);
      if (!benign_path.empty()) {
        const auto benign = load_prompts(benign_path, Category::benign);
        prompts.insert(prompts.end(), benign.begin(), benign.end());
      }
      const LexiconGuard guard(load_lexicon(lexicon_path));
      const auto log = train_grpo(model, prompts, guard, c);
      save_checkpoint(model, model_out);
      if (!log_out.empty()) write_file_atomic(log_out, grpo_log_to_jsonl(log));
      out << "steps " << log.size() << " final mean reward " << (log.empty() ? 0.0 : log.back().mean_reward)
          << "\n";
    };
  });

  // eval
  std::string suite, endpoint_model, report_out;
  int k = 8;
  DecodeFlags eval_decode;
  auto* eval = app.add_subcommand("eval", "Evaluate a model on one suite and write a report");
  eval->add_option("--suite", suite, "safety, refusal, reasoning or ppl")
      ->required()
      ->check(CLI::IsMember({"safety", "refusal", "reasoning", "ppl"}));
  eval->add_option("--model", model_path, "Checkpoint file or endpoint base URL")->required();
  eval->add_option("--endpoint-model", endpoint_model, "Model name sent to a remote endpoint");
  eval->add_option("--prompts", prompts_path, "Prompt, task or dataset file for the suite")->required();
  eval->add_option("--lexicon", lexicon_path, "Guard lexicon (safety) or refusal markers (refusal)");
  eval->add_option("--out", report_out, "Report file")->required();
  eval->add_option("--k", k, "Samples per task (reasoning)")->capture_default_str();
  eval->add_option("--seed", seed)->capture_default_str();
  eval->add_option("--tag-mode", tag_mode, "paired or closing_only")->capture_default_str();
  eval_decode.add(eval);
  eval->callback([&] {
    action = [&] {
      const DecodeParams d = eval_decode.params();
      const TagMode mode = parse_tag_mode(tag_mode);
      auto backend = open_backend(model_path, endpoint_model);
      EvalReport r;
      if (suite == "safety") {
        if (lexicon_path.empty()) throw ConfigError("--lexicon is required for the safety suite");
        const LexiconGuard guard(load_lexicon(lexicon_path));
        r.harmful_ratio = harmful_ratio(*backend, load_prompts(prompts_path, Category::harmful), guard, d, seed);
      } else if (suite == "refusal") {
        const auto markers =
            lexicon_path.empty() ? default_refusal_markers() : load_lexicon(lexicon_path).refusal_markers;
        r.over_refusal_rate =
            over_refusal_rate(*backend, load_prompts(prompts_path, Category::benign), markers, d, seed, mode);
      } else if (suite == "reasoning") {
        r.avg_pass_at_1 = avg_pass_at_1(*backend, load_tasks(prompts_path), k, d, seed, mode);
      } else {
        r.perplexity = dataset_perplexity(*backend, load_dataset(prompts_path));
      }
      write_file_atomic(report_out, report_to_json(r));
      print_report(out, suite.c_str(), r);
    };
  });

  // ppl
  auto* ppl = app.add_subcommand("ppl", "Perplexity of a dataset's responses under a frozen checkpoint");
  ppl->add_option("--model", model_path, "Checkpoint file")->required();
  ppl->add_option("--dataset", dataset_path, "Dataset file")->required();
  ppl->callback([&] {
    action = [&] {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6f", dataset_perplexity(load_checkpoint(model_path), load_dataset(dataset_path)));
      out << buf << "\n";
    };
  });

  // world
  std::string world_dir;
  std::uint64_t world_seed = 7;
  auto* world = app.add_subcommand("world", "Write the desk-scale toy world (prompts, tasks, lexicon, corpus)");
  world->add_option("--out", world_dir, "Directory to write")->required();
  world->add_option("--seed", world_seed)->capture_default_str();
  world->callback([&] {
    action = [&] {
      const ToyWorld w = make_toy_world(world_seed);
      write_toy_world(w, world_dir);
      out << "harmful " << w.harmful_build.size() << "+" << w.harmful_eval.size() << ", benign "
          << w.benign_build.size() << "+" << w.benign_eval.size() << ", tasks " << w.tasks.size()
          << ", pretraining pairs " << w.pretrain.size() << "\n";
    };
  });

  // pretrain
  std::string corpus_path;
  ModelConfig mc;
  mc.context_len = 176;
  mc.init_std = 0.05;
  auto* pre = app.add_subcommand("pretrain", "Initialize a toy model and fit it to a pretraining corpus");
  pre->add_option("--corpus", corpus_path, "Pretraining pairs")->required();
  pre->add_option("--out", model_out, "Output checkpoint")->required();
  pre->add_option("--context-len", mc.context_len)->capture_default_str();
  pre->add_option("--width", mc.width)->capture_default_str();
  pre->add_option("--layers", mc.n_layers)->capture_default_str();
  pre->add_option("--heads", mc.n_heads)->capture_default_str();
  pre->add_option("--ff-width", mc.ff_width)->capture_default_str();
  pre->add_option("--init-std", mc.init_std)->capture_default_str();
  pre->add_option("--epochs", epochs)->capture_default_str();
  pre->add_option("--batch-size", batch_size)->capture_default_str();
  pre->add_option("--lr", lr)->capture_default_str();
  pre->add_option("--seed", seed)->capture_default_str();
  pre->callback([&] {
    action = [&] {
      SftConfig c;
      c.epochs = epochs;
      c.batch_size = batch_size;
      c.base_lr = lr;
      c.warmup_frac = 0.05;
      c.seed = seed;
      c.lora.reset();
      c.validate();
      ToyLM model = ToyLM::init(mc, seed);
      const auto log = train_nll(model, tokenize_pretrain(load_pretrain(corpus_path), model), c);
      save_checkpoint(model, model_out);
      out << "steps " << log.size() << " final loss " << (log.empty() ? 0.0 : log.back().loss) << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitConfig;
  }

  try {
    action();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return kExitOk;
}

}  // namespace thinksafe
