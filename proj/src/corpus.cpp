#include "thinksafe/corpus.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/json_util.hpp"
#include "thinksafe/vocab.hpp"

namespace thinksafe {

using ojson = nlohmann::ordered_json;

std::string wrap_reasoning(const std::string& reasoning, const std::string& answer, TagMode mode) {
  std::string out;
  if (mode == TagMode::paired) out += "<think>";
  out += reasoning;
  out += "</think>";
  out += answer;
  return out;
}

void validate_example(const TrainingExample& ex, bool require_safe) {
  const std::string who = "example '" + ex.prompt_id + "'";
  if (ex.prompt_id.empty()) throw ValidationError("example with empty prompt_id");
  if (ex.prompt_text.empty()) throw ValidationError(who + ": empty prompt_text");
  if (ex.category == Category::benign && ex.steering_template_id.has_value())
    throw ValidationError(who + ": benign examples carry no steering template");
  const std::string wrapped = wrap_reasoning(ex.reasoning, ex.answer, ex.tag_mode);
  const bool wrapped_ok = ex.raw_text.size() >= wrapped.size() &&
                          ex.raw_text.compare(ex.raw_text.size() - wrapped.size(), wrapped.size(), wrapped) == 0;
  const bool bare_ok = ex.reasoning.empty() && ex.raw_text == ex.answer;
  if (!wrapped_ok && !bare_ok) throw ValidationError(who + ": raw_text does not match reasoning and answer");
  if (!(ex.guard.p_safe >= 0.0 && ex.guard.p_safe <= 1.0)) throw ValidationError(who + ": guard p_safe out of range");
  if (require_safe && !ex.guard.safe()) throw ValidationError(who + ": guard label is unsafe");
  try {
    ex.meta.decode.validate();
  } catch (const ConfigError& e) {
    throw ValidationError(who + ": " + e.what());
  }
}

namespace {

ojson decode_to_json(const DecodeParams& d) {
  ojson j;
  j["temperature"] = d.temperature;
  j["top_p"] = d.top_p;
  j["top_k"] = d.top_k;
  j["max_tokens"] = d.max_tokens;
  j["n_samples"] = d.n_samples;
  j["greedy"] = d.greedy;
  return j;
}

DecodeParams decode_from_json(const ojson& j) {
  DecodeParams d;
  d.temperature = j.at("temperature").get<double>();
  d.top_p = j.at("top_p").get<double>();
  d.top_k = j.at("top_k").get<int>();
  d.max_tokens = j.at("max_tokens").get<int>();
  d.n_samples = j.at("n_samples").get<int>();
  d.greedy = j.at("greedy").get<bool>();
  return d;
}

ojson example_to_json(const TrainingExample& ex) {
  ojson j;
  j["prompt_id"] = ex.prompt_id;
  j["category"] = to_string(ex.category);
  j["prompt_text"] = ex.prompt_text;
  j["steering_template_id"] = ex.steering_template_id ? ojson(*ex.steering_template_id) : ojson(nullptr);
  j["reasoning"] = ex.reasoning;
  j["answer"] = ex.answer;
  j["raw_text"] = ex.raw_text;
  j["tag_mode"] = to_string(ex.tag_mode);
  ojson g;
  g["p_safe"] = ex.guard.p_safe;
  g["label"] = to_string(ex.guard.label);
  g["guard_id"] = ex.guard.guard_id;
  j["guard"] = g;
  ojson m;
  m["backend_id"] = ex.meta.backend_id;
  m["decode"] = decode_to_json(ex.meta.decode);
  m["seed"] = ex.meta.seed;
  m["sample_index"] = ex.meta.sample_index;
  j["meta"] = m;
  return j;
}

TrainingExample example_from_json(const ojson& j) {
  TrainingExample ex;
  ex.prompt_id = j.at("prompt_id").get<std::string>();
  ex.category = parse_category(j.at("category").get<std::string>());
  ex.prompt_text = j.at("prompt_text").get<std::string>();
  const auto& st = j.at("steering_template_id");
  if (!st.is_null()) ex.steering_template_id = st.get<std::string>();
  ex.reasoning = j.at("reasoning").get<std::string>();
  ex.answer = j.at("answer").get<std::string>();
  ex.raw_text = j.at("raw_text").get<std::string>();
  ex.tag_mode = parse_tag_mode(j.at("tag_mode").get<std::string>());
  const auto& g = j.at("guard");
  ex.guard.p_safe = g.at("p_safe").get<double>();
  ex.guard.label = parse_label(g.at("label").get<std::string>());
  ex.guard.guard_id = g.at("guard_id").get<std::string>();
  const auto& m = j.at("meta");
  ex.meta.backend_id = m.at("backend_id").get<std::string>();
  ex.meta.decode = decode_from_json(m.at("decode"));
  ex.meta.seed = m.at("seed").get<std::uint64_t>();
  ex.meta.sample_index = m.at("sample_index").get<int>();
  return ex;
}

}  // namespace

std::string to_json_line(const TrainingExample& ex) { return dump_compact(example_to_json(ex)); }

TrainingExample example_from_json_line(const std::string& line) {
  try {
    return example_from_json(ojson::parse(line));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
}

std::vector<PromptRecord> load_prompts(const std::filesystem::path& path, Category category) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open prompt file");
  std::vector<PromptRecord> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    PromptRecord rec;
    try {
      const auto j = ojson::parse(line);
      rec.id = j.at("id").get<std::string>();
      rec.text = j.at("text").get<std::string>();
      rec.source = j.contains("source") ? j.at("source").get<std::string>() : std::string();
      rec.category = j.contains("category") ? parse_category(j.at("category").get<std::string>()) : category;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (rec.category != category)
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": prompt '" + rec.id + "' is " +
                            std::string(to_string(rec.category)) + ", expected " + std::string(to_string(category)));
    if (rec.text.empty())
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": prompt '" + rec.id + "' has empty text");
    if (!seen.insert(rec.id).second) throw ValidationError("duplicate prompt id \"" + rec.id + "\" in " + path.string());
    out.push_back(std::move(rec));
  }
  return out;
}

void write_prompts(const std::vector<PromptRecord>& prompts, const std::filesystem::path& path) {
  std::string body;
  for (const auto& p : prompts) {
    ojson j;
    j["id"] = p.id;
    j["category"] = to_string(p.category);
    j["text"] = p.text;
    j["source"] = p.source;
    body += dump_compact(j);
    body += '\n';
  }
  write_file_atomic(path, body);
}

std::size_t write_dataset(const std::vector<TrainingExample>& examples, const std::filesystem::path& path) {
  std::string body;
  for (const auto& ex : examples) {
    validate_example(ex, true);
    body += to_json_line(ex);
    body += '\n';
  }
  write_file_atomic(path, body);
  return examples.size();
}

std::vector<TrainingExample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open dataset");
  std::vector<TrainingExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json_line(line));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

DatasetStats compute_stats(const std::vector<TrainingExample>& kept, const DroppedCounts& dropped,
                           const TokenLengthFn& token_len) {
  DatasetStats s;
  double sum_h = 0.0, sum_b = 0.0;
  for (const auto& ex : kept) {
    const double len = static_cast<double>(token_len(ex));
    if (ex.category == Category::harmful) {
      ++s.n_harmful;
      sum_h += len;
    } else {
      ++s.n_benign;
      sum_b += len;
    }
  }
  s.mean_len_harmful_tokens = s.n_harmful > 0 ? sum_h / static_cast<double>(s.n_harmful) : 0.0;
  s.mean_len_benign_tokens = s.n_benign > 0 ? sum_b / static_cast<double>(s.n_benign) : 0.0;
  auto ratio = [](std::size_t drop, std::size_t keep) {
    const std::size_t total = drop + keep;
    return total > 0 ? 100.0 * static_cast<double>(drop) / static_cast<double>(total) : 0.0;
  };
  s.filtered_ratio_harmful = ratio(dropped.harmful, s.n_harmful);
  s.filtered_ratio_benign = ratio(dropped.benign, s.n_benign);
  return s;
}

DatasetStats compute_stats(const std::vector<TrainingExample>& kept, const DroppedCounts& dropped) {
  return compute_stats(kept, dropped, [](const TrainingExample& ex) { return token_length(ex.raw_text); });
}

std::string stats_to_json(const DatasetStats& s) {
  ojson j;
  j["n_harmful"] = s.n_harmful;
  j["n_benign"] = s.n_benign;
  j["mean_len_harmful_tokens"] = s.mean_len_harmful_tokens;
  j["mean_len_benign_tokens"] = s.mean_len_benign_tokens;
  j["filtered_ratio_harmful"] = s.filtered_ratio_harmful;
  j["filtered_ratio_benign"] = s.filtered_ratio_benign;
  return j.dump(2) + "\n";
}

DatasetStats stats_from_json(const std::string& text) {
  try {
    const auto j = ojson::parse(text);
    DatasetStats s;
    s.n_harmful = j.at("n_harmful").get<std::size_t>();
    s.n_benign = j.at("n_benign").get<std::size_t>();
    s.mean_len_harmful_tokens = j.at("mean_len_harmful_tokens").get<double>();
    s.mean_len_benign_tokens = j.at("mean_len_benign_tokens").get<double>();
    s.filtered_ratio_harmful = j.at("filtered_ratio_harmful").get<double>();
    s.filtered_ratio_benign = j.at("filtered_ratio_benign").get<double>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("stats: ") + e.what());
  }
}

std::string format_stats(const DatasetStats& s) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "category  count  mean_len_tokens  filtered_ratio(%%)\n"
                "harmful   %5zu  %15.2f  %17.2f\n"
                "benign    %5zu  %15.2f  %17.2f\n",
                s.n_harmful, s.mean_len_harmful_tokens, s.filtered_ratio_harmful, s.n_benign,
                s.mean_len_benign_tokens, s.filtered_ratio_benign);
  return buf;
}

TrainingExample strip_reasoning(const TrainingExample& example) {
  if (example.category == Category::benign || example.reasoning.empty()) return example;
  TrainingExample out = example;
  out.reasoning.clear();
  out.raw_text = wrap_reasoning("", out.answer, out.tag_mode);
  return out;
}

}  // namespace thinksafe
