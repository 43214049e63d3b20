#include "thinksafe/eval.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "thinksafe/decode.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/json_util.hpp"
#include "thinksafe/rng.hpp"

namespace thinksafe {

using ojson = nlohmann::ordered_json;

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

DecodeParams single(DecodeParams d) {
  d.n_samples = 1;
  d.validate();
  return d;
}

// One sample per prompt, in prompt order.
std::vector<Generation> sample_once(GenerationBackend& backend, const std::vector<PromptRecord>& prompts,
                                    const DecodeParams& decode, std::uint64_t seed, std::string_view stage) {
  std::vector<GenerationRequest> requests;
  requests.reserve(prompts.size());
  for (const auto& p : prompts) requests.push_back({p.text, derive_seed(seed, stage, p.id)});
  std::vector<std::vector<Generation>> results;
  try {
    results = backend.generate_batch(requests, single(decode));
  } catch (const BatchItemError& e) {
    throw BackendError("generation failed for prompt '" + prompts[e.index()].id + "': " + e.what());
  }
  std::vector<Generation> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(std::move(r.at(0)));
  return out;
}

}  // namespace

ToyTask exact_match_task(std::string id, std::string prompt, std::string expected) {
  ToyTask t{std::move(id), std::move(prompt), std::move(expected), {}};
  t.verifier = [want = t.expected](std::string_view answer) { return trim(answer) == want; };
  return t;
}

std::vector<ToyTask> load_tasks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open task file");
  std::vector<ToyTask> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = ojson::parse(line);
      out.push_back(exact_match_task(j.at("id").get<std::string>(), j.at("prompt").get<std::string>(),
                                     j.at("answer").get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_tasks(const std::vector<ToyTask>& tasks, const std::filesystem::path& path) {
  std::string body;
  for (const auto& t : tasks) {
    ojson j;
    j["id"] = t.id;
    j["prompt"] = t.prompt;
    j["answer"] = t.expected;
    body += dump_compact(j);
    body += '\n';
  }
  write_file_atomic(path, body);
}

double harmful_ratio(GenerationBackend& backend, const std::vector<PromptRecord>& prompts, const Guard& guard,
                     const DecodeParams& decode, std::uint64_t seed) {
  if (prompts.empty()) throw ContractError("harmful_ratio needs at least one prompt");
  const auto gens = sample_once(backend, prompts, decode, seed, "eval/safety");
  std::vector<GuardPair> pairs;
  for (std::size_t i = 0; i < prompts.size(); ++i) pairs.push_back({prompts[i].text, gens[i].raw_text});
  std::vector<GuardVerdict> verdicts;
  try {
    verdicts = guard.classify_batch(pairs);
  } catch (const BatchItemError& e) {
    throw BackendError("guard failed for prompt '" + prompts[e.index()].id + "': " + e.what());
  }
  std::size_t unsafe = 0;
  for (const auto& v : verdicts) unsafe += v.safe() ? 0 : 1;
  return 100.0 * static_cast<double>(unsafe) / static_cast<double>(prompts.size());
}

double over_refusal_rate(GenerationBackend& backend, const std::vector<PromptRecord>& safe_prompts,
                         const std::set<std::string>& refusal_markers, const DecodeParams& decode,
                         std::uint64_t seed, TagMode tag_mode) {
  if (safe_prompts.empty()) throw ContractError("over_refusal_rate needs at least one prompt");
  const auto gens = sample_once(backend, safe_prompts, decode, seed, "eval/refusal");
  std::size_t refused = 0;
  for (const auto& g : gens)
    refused += detect_refusal(parse_reasoning(g.raw_text, tag_mode).answer, refusal_markers) ? 1 : 0;
  return 100.0 * static_cast<double>(refused) / static_cast<double>(safe_prompts.size());
}

double avg_pass_at_1(GenerationBackend& backend, const std::vector<ToyTask>& tasks, int k, const DecodeParams& decode,
                     std::uint64_t seed, TagMode tag_mode, std::vector<PassTranscript>* transcripts) {
  if (k < 1) throw ContractError("k must be >= 1");
  if (tasks.empty()) throw ContractError("avg_pass_at_1 needs at least one task");
  DecodeParams d = decode;
  d.n_samples = k;
  d.validate();
  std::vector<GenerationRequest> requests;
  for (const auto& t : tasks) requests.push_back({t.prompt, derive_seed(seed, "eval/reasoning", t.id)});
  std::vector<std::vector<Generation>> results;
  try {
    results = backend.generate_batch(requests, d);
  } catch (const BatchItemError& e) {
    throw BackendError("generation failed for task '" + tasks[e.index()].id + "': " + e.what());
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    int correct = 0;
    for (std::size_t s = 0; s < results[i].size(); ++s) {
      const std::string answer = parse_reasoning(results[i][s].raw_text, tag_mode).answer;
      const bool ok = tasks[i].verifier(answer);
      correct += ok ? 1 : 0;
      if (transcripts != nullptr)
        transcripts->push_back({tasks[i].id, static_cast<int>(s), results[i][s].raw_text, answer, ok});
    }
    sum += static_cast<double>(correct) / static_cast<double>(k);
  }
  return 100.0 * sum / static_cast<double>(tasks.size());
}

double dataset_perplexity(const ToyLM& model, const std::vector<TrainingExample>& dataset) {
  if (dataset.empty()) throw ContractError("perplexity of an empty dataset");
  double lp = 0.0;
  std::size_t n = 0;
  for (const auto& ex : dataset) {
    const auto s = sequence_logprob(model, prompt_tokens(ex.prompt_text), response_tokens(ex.raw_text));
    lp += s.total;
    n += s.per_token.size();
  }
  return std::exp(-lp / static_cast<double>(n));
}

double dataset_perplexity(const GenerationBackend& scorer, const std::vector<TrainingExample>& dataset) {
  if (dataset.empty()) throw ContractError("perplexity of an empty dataset");
  if (!scorer.supports_logprobs())
    throw UnsupportedError("backend '" + scorer.id() + "' does not provide token log-probabilities");
  double lp = 0.0;
  std::size_t n = 0;
  for (const auto& ex : dataset) {
    for (double v : scorer.score_response(ex.prompt_text, ex.raw_text)) lp += v;
    n += response_tokens(ex.raw_text).size();
  }
  return std::exp(-lp / static_cast<double>(n));
}

std::string report_to_json(const EvalReport& report) {
  ojson j;
  auto put = [&j](const char* key, const std::optional<double>& v) { j[key] = v ? ojson(*v) : ojson(nullptr); };
  put("harmful_ratio", report.harmful_ratio);
  put("over_refusal_rate", report.over_refusal_rate);
  put("avg_pass_at_1", report.avg_pass_at_1);
  put("perplexity", report.perplexity);
  ojson b = ojson::object();
  for (const auto& [k, v] : report.breakdown) b[k] = v;
  j["breakdown"] = b;
  return j.dump(2) + "\n";
}

}  // namespace thinksafe
