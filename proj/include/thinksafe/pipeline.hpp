#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "thinksafe/builder.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/eval.hpp"
#include "thinksafe/grpo.hpp"
#include "thinksafe/train.hpp"

namespace thinksafe {

// A file named in a config: the text as written and the resolved path.
struct InputFile {
  std::string text;
  std::filesystem::path path;
};

struct ModelSource {
  enum class Kind { toy_init, toy_pretrain, toy_checkpoint, remote };
  Kind kind = Kind::toy_init;
  ModelConfig model;                  // toy_init, toy_pretrain
  std::optional<InputFile> file;      // pretraining corpus or checkpoint
  SftConfig pretrain;                 // toy_pretrain; full fine-tune
  RemoteEndpoint endpoint;            // remote
};

struct GuardSource {
  enum class Kind { lexicon, remote };
  Kind kind = Kind::lexicon;
  std::optional<InputFile> lexicon;
  double threshold = kDefaultGuardThreshold;
  RemoteEndpoint endpoint;
};

enum class BuildMethod { thinksafe, rejection, teacher };
std::string_view to_string(BuildMethod m);

enum class TrainKind { none, sft, sft_kl, grpo };

struct EvalConfig {
  std::optional<InputFile> harmful;
  std::optional<InputFile> benign;
  std::optional<InputFile> tasks;
  int k = 8;
  DecodeParams decode;
  bool perplexity = true;  // of the built dataset under the frozen student
  bool evaluate_base = true;
  std::optional<std::set<std::string>> refusal_markers;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  TagMode tag_mode = TagMode::paired;
  ModelSource student;
  std::optional<ModelSource> teacher;
  GuardSource guard;
  InputFile harmful;
  InputFile benign;

  BuildMethod method = BuildMethod::thinksafe;
  SteeringId steering = SteeringId::thinksafe;
  DecodeParams decode_harmful;
  DecodeParams decode_benign;
  bool strip_reasoning = false;

  TrainKind train = TrainKind::none;
  SftConfig sft;
  GrpoConfig grpo;

  EvalConfig eval;

  // Every input file, in config order (for the manifest).
  std::vector<InputFile> inputs() const;
};

// Strict JSON config. Relative paths resolve against the config file's
// directory. Every violation is collected; the thrown ConfigError lists all
// of them, one per line.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir);

// A stage failed; what() reads "stage '<name>' failed: <cause>".
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& cause)
      : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct ArtifactNames {
  static constexpr const char* base = "base.ckpt";
  static constexpr const char* dataset = "dataset.jsonl";
  static constexpr const char* stats = "stats.json";
  static constexpr const char* model = "model.ckpt";
  static constexpr const char* train_log = "train_log.jsonl";
  static constexpr const char* report = "report.json";
  static constexpr const char* manifest = "manifest.json";
};

struct RunResult {
  BuildResult build;
  std::optional<EvalReport> base_report;
  std::optional<EvalReport> trained_report;
  std::vector<std::string> artifacts;  // names inside output_dir, in write order
};

// build -> stats -> train -> eval, writing artifacts into output_dir
// (pretraining first when the student is toy_pretrain). Reruns of a toy
// config are byte-identical. `config_text` is hashed into the manifest.
RunResult run_experiment(const PipelineConfig& config, const std::string& config_text = "");

// Manifest: seed, config hash, and sha256 of every input and artifact.
std::string manifest_json(const PipelineConfig& config, const std::string& config_text,
                          const std::vector<std::string>& artifacts);

std::shared_ptr<const Guard> make_guard(const GuardSource& source);

}  // namespace thinksafe
