#include "thinksafe/pipeline.hpp"

#include <map>

#include "json.hpp"
#include "thinksafe/checkpoint.hpp"
#include "thinksafe/json_util.hpp"
#include "thinksafe/rng.hpp"
#include "thinksafe/world.hpp"

namespace thinksafe {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string_view to_string(BuildMethod m) {
  switch (m) {
    case BuildMethod::thinksafe: return "thinksafe";
    case BuildMethod::rejection: return "rejection";
    case BuildMethod::teacher: return "teacher";
  }
  return "?";
}

std::vector<InputFile> PipelineConfig::inputs() const {
  std::vector<InputFile> out;
  auto add = [&out](const std::optional<InputFile>& f) {
    if (f) out.push_back(*f);
  };
  add(student.file);
  if (teacher) add(teacher->file);
  add(guard.lexicon);
  out.push_back(harmful);
  out.push_back(benign);
  add(eval.harmful);
  add(eval.benign);
  add(eval.tasks);
  return out;
}

namespace {

// Strict view of one JSON object: every key must be consumed, and every
// problem is appended to a shared list instead of thrown.
class Section {
 public:
  Section(const ojson* j, std::string where, std::vector<std::string>& errors, const fs::path& base_dir)
      : j_(j), where_(std::move(where)), errors_(&errors), base_dir_(&base_dir) {
    if (j_ != nullptr && !j_->is_object()) {
      error("", "expected an object");
      j_ = nullptr;
    }
  }

  bool has(const char* key) const { return j_ != nullptr && j_->contains(key); }
  bool is_null(const char* key) const { return has(key) && j_->at(key).is_null(); }

  template <class T>
  bool opt(const char* key, T& out) {
    if (!has(key)) return false;
    used_.insert(key);
    return convert(key, j_->at(key), out);
  }

  template <class T>
  bool req(const char* key, T& out) {
    if (!has(key)) {
      error(key, "is required");
      return false;
    }
    return opt(key, out);
  }

  std::optional<InputFile> file(const char* key, bool required) {
    std::string text;
    if (!(required ? req(key, text) : opt(key, text))) return std::nullopt;
    fs::path p(text);
    if (p.is_relative()) p = *base_dir_ / p;
    p = p.lexically_normal();
    if (!fs::is_regular_file(p)) {
      error(key, "file not found: " + p.string());
      return std::nullopt;
    }
    return InputFile{text, p};
  }

  Section sub(const char* key) {
    if (!has(key)) return Section(nullptr, path(key), *errors_, *base_dir_);
    used_.insert(key);
    return Section(&j_->at(key), path(key), *errors_, *base_dir_);
  }

  bool present() const { return j_ != nullptr; }

  void error(const std::string& key, const std::string& what) { errors_->push_back(path(key) + ": " + what); }

  // Reports keys that were never read.
  void finish() {
    if (j_ == nullptr) return;
    for (const auto& [k, v] : j_->items())
      if (!used_.count(k)) error(k, "unknown key");
  }

  const std::string& where() const { return where_; }

 private:
  std::string path(const std::string& key) const {
    if (key.empty()) return where_.empty() ? "config" : where_;
    return where_.empty() ? key : where_ + "." + key;
  }

  bool convert(const char* key, const ojson& v, std::string& out) {
    if (!v.is_string()) return mismatch(key, "a string");
    out = v.get<std::string>();
    return true;
  }
  bool convert(const char* key, const ojson& v, bool& out) {
    if (!v.is_boolean()) return mismatch(key, "a boolean");
    out = v.get<bool>();
    return true;
  }
  bool convert(const char* key, const ojson& v, int& out) {
    if (!v.is_number_integer()) return mismatch(key, "an integer");
    const auto x = v.get<std::int64_t>();
    if (x < INT32_MIN || x > INT32_MAX) return mismatch(key, "a 32-bit integer");
    out = static_cast<int>(x);
    return true;
  }
  bool convert(const char* key, const ojson& v, std::uint64_t& out) {
    if (!v.is_number_unsigned()) return mismatch(key, "a non-negative integer");
    out = v.get<std::uint64_t>();
    return true;
  }
  bool convert(const char* key, const ojson& v, double& out) {
    if (!v.is_number()) return mismatch(key, "a number");
    out = v.get<double>();
    return true;
  }
  bool convert(const char* key, const ojson& v, std::vector<std::string>& out) {
    if (!v.is_array()) return mismatch(key, "an array of strings");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_string()) return mismatch(key, "an array of strings");
      out.push_back(e.get<std::string>());
    }
    return true;
  }
  bool mismatch(const char* key, const char* what) {
    error(key, std::string("expected ") + what);
    return false;
  }

  const ojson* j_;
  std::string where_;
  std::vector<std::string>* errors_;
  const fs::path* base_dir_;
  std::set<std::string> used_;
};

template <class Fn>
void checked(Section& s, const std::string& key, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    s.error(key, e.what());
  } catch (const ParseError& e) {
    s.error(key, e.what());
  }
}

DecodeParams read_decode(Section s, DecodeParams d) {
  s.opt("temperature", d.temperature);
  s.opt("top_p", d.top_p);
  s.opt("top_k", d.top_k);
  s.opt("max_tokens", d.max_tokens);
  s.opt("n_samples", d.n_samples);
  s.opt("greedy", d.greedy);
  s.finish();
  checked(s, "", [&] { d.validate(); });
  return d;
}

ModelConfig read_model(Section s) {
  ModelConfig m;
  std::string arch;
  if (s.opt("arch", arch)) checked(s, "arch", [&] { m.arch = parse_architecture(arch); });
  s.opt("context_len", m.context_len);
  s.opt("width", m.width);
  s.opt("n_layers", m.n_layers);
  s.opt("n_heads", m.n_heads);
  s.opt("ff_width", m.ff_width);
  s.opt("ngram_n", m.ngram_n);
  s.opt("ngram_buckets", m.ngram_buckets);
  s.opt("init_std", m.init_std);
  s.finish();
  checked(s, "", [&] { m.validate(); });
  return m;
}

void read_endpoint(Section& s, RemoteEndpoint& e) {
  s.req("base_url", e.base_url);
  s.req("model", e.model);
  s.opt("api_key_env", e.api_key_env);
  s.opt("max_concurrency", e.max_concurrency);
  s.opt("max_retries", e.max_retries);
  int ms = static_cast<int>(e.backoff_initial.count());
  if (s.opt("backoff_initial_ms", ms)) e.backoff_initial = std::chrono::milliseconds(ms);
  ms = static_cast<int>(e.backoff_cap.count());
  if (s.opt("backoff_cap_ms", ms)) e.backoff_cap = std::chrono::milliseconds(ms);
  int secs = static_cast<int>(e.timeout.count());
  if (s.opt("timeout_s", secs)) e.timeout = std::chrono::seconds(secs);
  s.opt("supports_top_k", e.supports_top_k);
  if (!e.base_url.empty()) checked(s, "base_url", [&] { split_base_url(e.base_url); });
  if (e.max_concurrency < 1) s.error("max_concurrency", "must be >= 1");
  if (e.max_retries < 0) s.error("max_retries", "must be >= 0");
}

std::optional<LoraConfig> read_lora(Section& parent, std::optional<LoraConfig> lora) {
  if (parent.is_null("lora")) {
    Section s = parent.sub("lora");
    return std::nullopt;
  }
  Section s = parent.sub("lora");
  if (!s.present()) return lora;
  LoraConfig l;
  s.opt("rank", l.rank);
  s.opt("alpha", l.alpha);
  s.opt("dropout", l.dropout);
  s.finish();
  checked(s, "", [&] { l.validate(); });
  return l;
}

ModelSource read_source(Section s) {
  ModelSource src;
  std::string kind;
  if (!s.req("kind", kind)) {
    s.finish();
    return src;
  }
  if (kind == "toy_init" || kind == "toy_pretrain") {
    src.kind = kind == "toy_init" ? ModelSource::Kind::toy_init : ModelSource::Kind::toy_pretrain;
    src.model = read_model(s.sub("model"));
    if (src.kind == ModelSource::Kind::toy_pretrain) {
      src.file = s.file("corpus", true);
      SftConfig& p = src.pretrain;
      p.lora.reset();
      s.opt("epochs", p.epochs);
      s.opt("batch_size", p.batch_size);
      s.opt("lr", p.base_lr);
      s.opt("warmup_frac", p.warmup_frac);
      s.opt("weight_decay", p.weight_decay);
      checked(s, "", [&] { p.validate(); });
    }
  } else if (kind == "toy_checkpoint") {
    src.kind = ModelSource::Kind::toy_checkpoint;
    src.file = s.file("path", true);
  } else if (kind == "remote") {
    src.kind = ModelSource::Kind::remote;
    read_endpoint(s, src.endpoint);
  } else {
    s.error("kind", "unknown model kind '" + kind + "' (toy_init, toy_pretrain, toy_checkpoint, remote)");
  }
  s.finish();
  return src;
}

GuardSource read_guard(Section s) {
  GuardSource g;
  std::string kind;
  if (s.req("kind", kind)) {
    if (kind == "lexicon") {
      g.kind = GuardSource::Kind::lexicon;
      g.lexicon = s.file("lexicon", true);
    } else if (kind == "remote") {
      g.kind = GuardSource::Kind::remote;
      read_endpoint(s, g.endpoint);
    } else {
      s.error("kind", "unknown guard kind '" + kind + "' (lexicon, remote)");
    }
  }
  s.opt("threshold", g.threshold);
  if (!(g.threshold > 0.0 && g.threshold < 1.0)) s.error("threshold", "must be in (0, 1)");
  s.finish();
  return g;
}

void read_sft(Section& s, SftConfig& c) {
  s.opt("epochs", c.epochs);
  s.opt("batch_size", c.batch_size);
  s.opt("lr", c.base_lr);
  s.opt("warmup_frac", c.warmup_frac);
  s.opt("weight_decay", c.weight_decay);
  c.lora = read_lora(s, c.lora);
  checked(s, "", [&] { c.validate(); });
}

void read_grpo(Section& s, GrpoConfig& c) {
  s.opt("steps", c.steps);
  s.opt("prompts_per_step", c.prompts_per_step);
  s.opt("group_size", c.group_size);
  s.opt("clip_eps", c.clip_eps);
  s.opt("kl_beta", c.kl_beta);
  s.opt("inner_epochs", c.inner_epochs);
  s.opt("lr", c.base_lr);
  s.opt("warmup_frac", c.warmup_frac);
  s.opt("weight_decay", c.weight_decay);
  if (s.has("reward_weights")) {
    Section w = s.sub("reward_weights");
    w.opt("safety", c.weights.safety);
    w.opt("format", c.weights.format);
    w.finish();
  }
  if (s.has("decode")) c.decode = read_decode(s.sub("decode"), c.decode);
  c.lora = read_lora(s, c.lora);
  checked(s, "", [&] { c.validate(); });
}

}  // namespace

PipelineConfig parse_config(const std::string& text, const fs::path& base_dir) {
  ojson root;
  try {
    root = ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  std::vector<std::string> errors;
  PipelineConfig cfg;
  Section top(&root, "", errors, base_dir);

  top.req("seed", cfg.seed);
  std::string out = "out";
  top.opt("output_dir", out);
  cfg.output_dir = fs::path(out).is_relative() ? (base_dir / out).lexically_normal() : fs::path(out);
  std::string tag;
  if (top.opt("tag_mode", tag)) checked(top, "tag_mode", [&] { cfg.tag_mode = parse_tag_mode(tag); });

  if (top.has("student")) {
    cfg.student = read_source(top.sub("student"));
  } else {
    top.error("student", "is required");
  }
  if (top.has("guard")) {
    cfg.guard = read_guard(top.sub("guard"));
  } else {
    top.error("guard", "is required");
  }
  {
    Section data = top.sub("data");
    if (!data.present()) top.error("data", "is required");
    if (auto f = data.file("harmful", data.present())) cfg.harmful = *f;
    if (auto f = data.file("benign", data.present())) cfg.benign = *f;
    data.finish();
  }

  {
    Section b = top.sub("build");
    std::string method = "thinksafe";
    b.opt("method", method);
    if (method == "thinksafe") cfg.method = BuildMethod::thinksafe;
    else if (method == "rejection") cfg.method = BuildMethod::rejection;
    else if (method == "teacher") cfg.method = BuildMethod::teacher;
    else b.error("method", "unknown build method '" + method + "' (thinksafe, rejection, teacher)");
    std::string steering;
    if (b.opt("steering", steering)) checked(b, "steering", [&] { cfg.steering = parse_steering_id(steering); });
    DecodeParams d;
    if (cfg.method == BuildMethod::rejection) d.n_samples = kRejectionSamples;
    cfg.decode_harmful = b.has("decode_harmful") ? read_decode(b.sub("decode_harmful"), d) : d;
    cfg.decode_benign = b.has("decode_benign") ? read_decode(b.sub("decode_benign"), d) : d;
    b.opt("strip_reasoning", cfg.strip_reasoning);
    b.finish();
  }

  if (top.has("teacher")) {
    cfg.teacher = read_source(top.sub("teacher"));
    if (cfg.method != BuildMethod::teacher) top.error("teacher", "is only used by the teacher build method");
  } else if (cfg.method == BuildMethod::teacher) {
    top.error("teacher", "is required by the teacher build method");
  }

  if (top.has("train") && !top.is_null("train")) {
    Section t = top.sub("train");
    std::string objective;
    if (t.req("objective", objective)) {
      if (objective == "sft" || objective == "sft_kl") {
        cfg.train = objective == "sft" ? TrainKind::sft : TrainKind::sft_kl;
        cfg.sft.objective = parse_sft_objective(objective);
        read_sft(t, cfg.sft);
      } else if (objective == "grpo") {
        cfg.train = TrainKind::grpo;
        cfg.grpo.tag_mode = cfg.tag_mode;
        read_grpo(t, cfg.grpo);
      } else {
        t.error("objective", "unknown objective '" + objective + "' (sft, sft_kl, grpo)");
      }
    }
    t.finish();
    if (cfg.train != TrainKind::none && cfg.student.kind == ModelSource::Kind::remote)
      top.error("train", "training needs a toy student");
  } else if (top.has("train")) {
    top.sub("train");
  }

  if (top.has("eval")) {
    Section e = top.sub("eval");
    EvalConfig& ev = cfg.eval;
    ev.harmful = e.file("harmful", false);
    ev.benign = e.file("benign", false);
    ev.tasks = e.file("tasks", false);
    e.opt("k", ev.k);
    if (ev.k < 1) e.error("k", "must be >= 1");
    if (e.has("decode")) ev.decode = read_decode(e.sub("decode"), ev.decode);
    e.opt("perplexity", ev.perplexity);
    e.opt("evaluate_base", ev.evaluate_base);
    std::vector<std::string> markers;
    if (e.opt("refusal_markers", markers)) {
      if (markers.empty()) e.error("refusal_markers", "must not be empty");
      ev.refusal_markers = std::set<std::string>(markers.begin(), markers.end());
    }
    e.finish();
  } else {
    cfg.eval.perplexity = false;
    cfg.eval.evaluate_base = false;
  }

  cfg.sft.seed = cfg.seed;
  cfg.grpo.seed = cfg.seed;
  cfg.grpo.tag_mode = cfg.tag_mode;
  cfg.student.pretrain.seed = derive_seed(cfg.seed, "student/pretrain");
  if (cfg.teacher) cfg.teacher->pretrain.seed = derive_seed(cfg.seed, "teacher/pretrain");

  top.finish();
  if (!errors.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

PipelineConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, fs::absolute(path).parent_path());
}

std::shared_ptr<const Guard> make_guard(const GuardSource& source) {
  if (source.kind == GuardSource::Kind::remote) return std::make_shared<RemoteGuard>(source.endpoint, source.threshold);
  if (!source.lexicon) throw ConfigError("lexicon guard needs a lexicon file");
  return std::make_shared<LexiconGuard>(load_lexicon(source.lexicon->path), source.threshold);
}

namespace {

struct Student {
  std::optional<ToyLM> model;
  std::shared_ptr<GenerationBackend> backend;
};

Student realize(const ModelSource& src, std::uint64_t seed, const std::string& role) {
  Student s;
  switch (src.kind) {
    case ModelSource::Kind::remote:
      s.backend = std::make_shared<RemoteBackend>(src.endpoint);
      return s;
    case ModelSource::Kind::toy_checkpoint:
      s.model = load_checkpoint(src.file->path);
      break;
    case ModelSource::Kind::toy_init:
      s.model = ToyLM::init(src.model, derive_seed(seed, role + "/init"));
      break;
    case ModelSource::Kind::toy_pretrain: {
      s.model = ToyLM::init(src.model, derive_seed(seed, role + "/init"));
      const auto data = tokenize_pretrain(load_pretrain(src.file->path), *s.model);
      train_nll(*s.model, data, src.pretrain);
      break;
    }
  }
  s.backend = std::make_shared<ToyBackend>(std::make_shared<const ToyLM>(*s.model), "toy:" + role);
  return s;
}

struct EvalData {
  std::optional<std::vector<PromptRecord>> harmful;
  std::optional<std::vector<PromptRecord>> benign;
  std::optional<std::vector<ToyTask>> tasks;
  std::set<std::string> markers;
};

// Per-source subsets, only when the prompts come from more than one source.
std::map<std::string, std::vector<PromptRecord>> by_source(const std::vector<PromptRecord>& prompts) {
  std::map<std::string, std::vector<PromptRecord>> out;
  for (const auto& p : prompts) out[p.source].push_back(p);
  if (out.size() < 2) out.clear();
  return out;
}

EvalReport evaluate(GenerationBackend& backend, const PipelineConfig& cfg, const EvalData& data, const Guard& guard,
                    const std::vector<TrainingExample>* ppl_dataset) {
  EvalReport r;
  if (data.harmful) {
    r.harmful_ratio = harmful_ratio(backend, *data.harmful, guard, cfg.eval.decode, cfg.seed);
    r.breakdown["safety/n_prompts"] = static_cast<double>(data.harmful->size());
    for (const auto& [source, subset] : by_source(*data.harmful))
      r.breakdown["safety/" + source] = harmful_ratio(backend, subset, guard, cfg.eval.decode, cfg.seed);
  }
  if (data.benign) {
    r.over_refusal_rate =
        over_refusal_rate(backend, *data.benign, data.markers, cfg.eval.decode, cfg.seed, cfg.tag_mode);
    r.breakdown["refusal/n_prompts"] = static_cast<double>(data.benign->size());
    for (const auto& [source, subset] : by_source(*data.benign))
      r.breakdown["refusal/" + source] =
          over_refusal_rate(backend, subset, data.markers, cfg.eval.decode, cfg.seed, cfg.tag_mode);
  }
  if (data.tasks) {
    r.avg_pass_at_1 = avg_pass_at_1(backend, *data.tasks, cfg.eval.k, cfg.eval.decode, cfg.seed, cfg.tag_mode);
    r.breakdown["reasoning/n_tasks"] = static_cast<double>(data.tasks->size());
    r.breakdown["reasoning/k"] = cfg.eval.k;
  }
  if (ppl_dataset != nullptr) {
    r.perplexity = dataset_perplexity(backend, *ppl_dataset);
    r.breakdown["ppl/n_examples"] = static_cast<double>(ppl_dataset->size());
  }
  return r;
}

ojson report_object(const EvalReport& r) { return ojson::parse(report_to_json(r)); }

}  // namespace

std::string manifest_json(const PipelineConfig& config, const std::string& config_text,
                          const std::vector<std::string>& artifacts) {
  ojson j;
  j["seed"] = config.seed;
  j["config_sha256"] = sha256_hex(config_text);
  ojson inputs = ojson::array();
  for (const auto& f : config.inputs()) {
    ojson e;
    e["path"] = f.text;
    e["sha256"] = sha256_hex(read_file(f.path));
    inputs.push_back(e);
  }
  j["inputs"] = inputs;
  ojson arts = ojson::array();
  for (const auto& name : artifacts) {
    ojson e;
    e["path"] = name;
    e["sha256"] = sha256_hex(read_file(config.output_dir / name));
    arts.push_back(e);
  }
  j["artifacts"] = arts;
  return j.dump(2) + "\n";
}

RunResult run_experiment(const PipelineConfig& cfg, const std::string& config_text) {
  RunResult result;
  std::string current = "setup";
  auto write = [&](const char* name, const std::string& body) {
    write_file_atomic(cfg.output_dir / name, body);
    result.artifacts.push_back(name);
  };
  try {
    fs::create_directories(cfg.output_dir);

    current = "pretrain";
    Student student = realize(cfg.student, cfg.seed, "student");
    if (student.model && cfg.student.kind != ModelSource::Kind::toy_checkpoint)
      write(ArtifactNames::base, serialize_checkpoint(*student.model));

    current = "build";
    const auto guard = make_guard(cfg.guard);
    const auto harmful = load_prompts(cfg.harmful.path, Category::harmful);
    const auto benign = load_prompts(cfg.benign.path, Category::benign);
    BuildConfig bc;
    bc.steering = cfg.steering;
    bc.decode_harmful = cfg.decode_harmful;
    bc.decode_benign = cfg.decode_benign;
    bc.guard = guard;
    bc.generator = student.backend;
    bc.seed = cfg.seed;
    bc.tag_mode = cfg.tag_mode;
    switch (cfg.method) {
      case BuildMethod::thinksafe:
        result.build = build_thinksafe(bc, harmful, benign);
        break;
      case BuildMethod::rejection: {
        std::vector<PromptRecord> all = harmful;
        all.insert(all.end(), benign.begin(), benign.end());
        result.build = build_rejection_sampling(bc, all);
        break;
      }
      case BuildMethod::teacher: {
        Student teacher = realize(*cfg.teacher, cfg.seed, "teacher");
        std::vector<PromptRecord> all = harmful;
        all.insert(all.end(), benign.begin(), benign.end());
        result.build = build_teacher_distill(bc, all, *teacher.backend);
        break;
      }
    }
    if (cfg.strip_reasoning) {
      for (auto& ex : result.build.dataset) ex = strip_reasoning(ex);
      result.build.stats = compute_stats(result.build.dataset, result.build.dropped);
    }
    write_dataset(result.build.dataset, cfg.output_dir / ArtifactNames::dataset);
    result.artifacts.push_back(ArtifactNames::dataset);

    current = "stats";
    write(ArtifactNames::stats, stats_to_json(result.build.stats));

    current = "train";
    std::optional<ToyLM> trained;
    if (cfg.train != TrainKind::none) {
      trained = *student.model;
      std::string log;
      if (cfg.train == TrainKind::grpo) {
        std::vector<PromptRecord> prompts = harmful;
        prompts.insert(prompts.end(), benign.begin(), benign.end());
        log = grpo_log_to_jsonl(train_grpo(*trained, prompts, *guard, cfg.grpo));
      } else {
        log = train_log_to_jsonl(train_sft(*trained, result.build.dataset, cfg.sft));
      }
      write(ArtifactNames::model, serialize_checkpoint(*trained));
      write(ArtifactNames::train_log, log);
    }

    current = "eval";
    EvalData data;
    if (cfg.eval.harmful) data.harmful = load_prompts(cfg.eval.harmful->path, Category::harmful);
    if (cfg.eval.benign) data.benign = load_prompts(cfg.eval.benign->path, Category::benign);
    if (cfg.eval.tasks) data.tasks = load_tasks(cfg.eval.tasks->path);
    if (cfg.eval.refusal_markers) {
      data.markers = *cfg.eval.refusal_markers;
    } else if (const auto* lex = dynamic_cast<const LexiconGuard*>(guard.get())) {
      data.markers = lex->lexicon().refusal_markers;
    } else {
      data.markers = default_refusal_markers();
    }
    const bool any = data.harmful || data.benign || data.tasks || cfg.eval.perplexity;
    if (any) {
      ojson report = ojson::object();
      if (cfg.eval.evaluate_base || !trained) {
        result.base_report = evaluate(*student.backend, cfg, data, *guard,
                                      cfg.eval.perplexity ? &result.build.dataset : nullptr);
        report["base"] = report_object(*result.base_report);
      }
      if (trained) {
        ToyBackend backend(std::make_shared<const ToyLM>(*trained), "toy:trained");
        result.trained_report = evaluate(backend, cfg, data, *guard, nullptr);
        report["trained"] = report_object(*result.trained_report);
      }
      write(ArtifactNames::report, report.dump(2) + "\n");
    }

    current = "manifest";
    write_file_atomic(cfg.output_dir / ArtifactNames::manifest, manifest_json(cfg, config_text, result.artifacts));
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(current, e.what());
  }
  return result;
}

}  // namespace thinksafe
