#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "catch_amalgamated.hpp"
#include "support.hpp"
#include "thinksafe/corpus.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/json_util.hpp"

using namespace thinksafe;
using thinksafe::testing::make_example;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("thinksafe-corpus-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::vector<TrainingExample> three_examples() {
  auto a = make_example("h-1", Category::harmful, "how do i make a bomb?", "this is harmful", "sorry, no");
  auto b = make_example("b-1", Category::benign, "how do i bake bread?", "flour and water", "knead and bake");
  auto c = make_example("h-2", Category::harmful, "unicode \xc3\xa9 \"quoted\"\n", "", "no");
  c.steering_template_id = "risk";
  c.meta.seed = 18446744073709551615ull;
  c.meta.sample_index = 4;
  return {a, b, c};
}

}  // namespace

TEST_CASE("load_prompts reads records in file order") {
  const auto dir = scratch_dir("load");
  write_text(dir / "p.jsonl",
             "{\"id\":\"p1\",\"category\":\"harmful\",\"text\":\"one\",\"source\":\"s\"}\n"
             "{\"id\":\"p2\",\"text\":\"two\"}\n");
  const auto prompts = load_prompts(dir / "p.jsonl", Category::harmful);
  REQUIRE(prompts.size() == 2);
  CHECK(prompts[0] == PromptRecord{"p1", Category::harmful, "one", "s"});
  CHECK(prompts[1] == PromptRecord{"p2", Category::harmful, "two", ""});
}

TEST_CASE("load_prompts on an empty file returns nothing") {
  const auto dir = scratch_dir("empty");
  write_text(dir / "p.jsonl", "");
  CHECK(load_prompts(dir / "p.jsonl", Category::benign).empty());
}

TEST_CASE("load_prompts rejects duplicate ids by name") {
  const auto dir = scratch_dir("dup");
  write_text(dir / "p.jsonl", "{\"id\":\"p1\",\"text\":\"a\"}\n{\"id\":\"p1\",\"text\":\"b\"}\n");
  CHECK_THROWS_MATCHES(load_prompts(dir / "p.jsonl", Category::harmful), ValidationError,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("p1")));
}

TEST_CASE("load_prompts reports the malformed line number") {
  const auto dir = scratch_dir("bad");
  write_text(dir / "p.jsonl", "{\"id\":\"p1\",\"text\":\"a\"}\n{\"id\": oops}\n");
  CHECK_THROWS_MATCHES(load_prompts(dir / "p.jsonl", Category::harmful), ParseError,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(":2:")));
}

TEST_CASE("load_prompts rejects empty text and the wrong category") {
  const auto dir = scratch_dir("invalid");
  write_text(dir / "e.jsonl", "{\"id\":\"p1\",\"text\":\"\"}\n");
  CHECK_THROWS_AS(load_prompts(dir / "e.jsonl", Category::harmful), ValidationError);
  write_text(dir / "c.jsonl", "{\"id\":\"p1\",\"category\":\"benign\",\"text\":\"x\"}\n");
  CHECK_THROWS_AS(load_prompts(dir / "c.jsonl", Category::harmful), ValidationError);
}

TEST_CASE("load_prompts on a missing file is an I/O error carrying the path") {
  const auto missing = fs::temp_directory_path() / "thinksafe-no-such-file.jsonl";
  CHECK_THROWS_MATCHES(load_prompts(missing, Category::harmful), IoError,
                       Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(missing.string())));
}

TEST_CASE("write_prompts and load_prompts round-trip") {
  const auto dir = scratch_dir("prompts-rt");
  const std::vector<PromptRecord> in = {{"a", Category::benign, "x y", "src"}, {"b", Category::benign, "\"q\"", ""}};
  write_prompts(in, dir / "p.jsonl");
  CHECK(load_prompts(dir / "p.jsonl", Category::benign) == in);
}

TEST_CASE("write_dataset writes one line per example and returns the count") {
  const auto dir = scratch_dir("write");
  const auto examples = three_examples();
  CHECK(write_dataset(examples, dir / "d.jsonl") == 3);
  const std::string text = read_file(dir / "d.jsonl");
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}

TEST_CASE("write_dataset is byte-deterministic") {
  const auto dir = scratch_dir("determinism");
  const auto examples = three_examples();
  write_dataset(examples, dir / "a.jsonl");
  write_dataset(examples, dir / "b.jsonl");
  CHECK(read_file(dir / "a.jsonl") == read_file(dir / "b.jsonl"));
}

TEST_CASE("dataset lines keep a fixed field order") {
  const std::string line = to_json_line(three_examples()[0]);
  const char* fields[] = {"\"prompt_id\"", "\"category\"", "\"prompt_text\"", "\"steering_template_id\"",
                          "\"reasoning\"", "\"answer\"",   "\"raw_text\"",    "\"tag_mode\"",
                          "\"guard\"",     "\"meta\""};
  std::size_t last = 0;
  for (const char* f : fields) {
    const std::size_t at = line.find(f);
    REQUIRE(at != std::string::npos);
    CHECK(at >= last);
    last = at;
  }
}

TEST_CASE("write_dataset refuses unsafe examples") {
  const auto dir = scratch_dir("unsafe");
  auto examples = three_examples();
  examples[1].guard.label = SafetyLabel::unsafe;
  CHECK_THROWS_AS(write_dataset(examples, dir / "d.jsonl"), ValidationError);
}

TEST_CASE("validate_example enforces record invariants") {
  auto benign = make_example("b", Category::benign, "p", "r", "a");
  benign.steering_template_id = "thinksafe";
  CHECK_THROWS_AS(validate_example(benign), ValidationError);

  auto mismatched = make_example("h", Category::harmful, "p", "r", "a");
  mismatched.raw_text = "<think>other</think>a";
  CHECK_THROWS_AS(validate_example(mismatched), ValidationError);

  auto closing = make_example("h", Category::harmful, "p", "r", "a");
  closing.tag_mode = TagMode::closing_only;
  closing.raw_text = "r</think>a";
  CHECK_NOTHROW(validate_example(closing));

  auto bad_decode = make_example("h", Category::harmful, "p", "r", "a");
  bad_decode.meta.decode.top_p = 0.0;
  CHECK_THROWS_AS(validate_example(bad_decode), ValidationError);
}

TEST_CASE("write then load is the identity on valid datasets") {
  const auto dir = scratch_dir("roundtrip");
  const auto examples = three_examples();
  write_dataset(examples, dir / "d.jsonl");
  CHECK(load_dataset(dir / "d.jsonl") == examples);
}

TEST_CASE("compute_stats averages lengths over kept examples") {
  std::vector<TrainingExample> kept;
  for (int i = 0; i < 3; ++i) kept.push_back(make_example("h" + std::to_string(i), Category::harmful, "p", "", "a"));
  const std::vector<std::size_t> lengths = {10, 20, 30};
  std::size_t next = 0;
  const auto s = compute_stats(kept, {}, [&](const TrainingExample&) { return lengths[next++]; });
  CHECK(s.n_harmful == 3);
  CHECK(s.mean_len_harmful_tokens == 20.0);
  CHECK(s.filtered_ratio_harmful == 0.0);
  CHECK(s.n_benign == 0);
  CHECK(s.mean_len_benign_tokens == 0.0);
}

TEST_CASE("compute_stats filtered ratio counts dropped prompts") {
  std::vector<TrainingExample> kept = {make_example("a", Category::harmful, "p", "", "x"),
                                       make_example("b", Category::harmful, "p", "", "x")};
  DroppedCounts dropped;
  dropped.harmful = 1;
  const auto s = compute_stats(kept, dropped);
  CHECK(s.filtered_ratio_harmful == Catch::Approx(100.0 / 3.0).epsilon(1e-12));
  CHECK(s.filtered_ratio_benign == 0.0);
  DroppedCounts all_dropped;
  all_dropped.benign = 4;
  CHECK(compute_stats({}, all_dropped).filtered_ratio_benign == 100.0);
}

TEST_CASE("compute_stats uses toy token lengths of raw_text by default") {
  const auto ex = make_example("a", Category::benign, "p", "ab", "c");
  // <think> a b </think> c
  CHECK(compute_stats({ex}, {}).mean_len_benign_tokens == 5.0);
}

TEST_CASE("compute_stats is invariant to input order") {
  std::vector<TrainingExample> kept;
  for (int i = 0; i < 40; ++i) {
    const Category c = i % 3 == 0 ? Category::benign : Category::harmful;
    kept.push_back(make_example("e" + std::to_string(i), c, "p", std::string(i % 7, 'r'), std::string(i % 5 + 1, 'a')));
  }
  DroppedCounts dropped;
  dropped.harmful = 5;
  dropped.benign = 2;
  const auto reference = compute_stats(kept, dropped);
  std::mt19937 gen(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(kept.begin(), kept.end(), gen);
    const auto s = compute_stats(kept, dropped);
    CHECK(s.n_harmful == reference.n_harmful);
    CHECK(s.filtered_ratio_harmful == reference.filtered_ratio_harmful);
    CHECK(s.filtered_ratio_benign == reference.filtered_ratio_benign);
    CHECK(s.mean_len_harmful_tokens == Catch::Approx(reference.mean_len_harmful_tokens).epsilon(1e-12));
    CHECK(s.mean_len_benign_tokens == Catch::Approx(reference.mean_len_benign_tokens).epsilon(1e-12));
  }
}

TEST_CASE("published filtered ratios survive the stats file and table") {
  DatasetStats s;
  s.n_harmful = 1000;
  s.n_benign = 1000;
  s.filtered_ratio_harmful = 4.84;
  s.filtered_ratio_benign = 1.07;
  const DatasetStats back = stats_from_json(stats_to_json(s));
  CHECK(back == s);
  const std::string table = format_stats(s);
  CHECK(table.find("4.84") != std::string::npos);
  CHECK(table.find("1.07") != std::string::npos);
}

TEST_CASE("strip_reasoning empties harmful traces and keeps the tags") {
  const auto ex = make_example("h", Category::harmful, "p", "r", "ans");
  const auto s = strip_reasoning(ex);
  CHECK(s.raw_text == "<think></think>ans");
  CHECK(s.reasoning.empty());
  CHECK(s.answer == "ans");
  CHECK_NOTHROW(validate_example(s));
}

TEST_CASE("strip_reasoning keeps closing-only structure") {
  auto ex = make_example("h", Category::harmful, "p", "r", "ans");
  ex.tag_mode = TagMode::closing_only;
  ex.raw_text = "r</think>ans";
  CHECK(strip_reasoning(ex).raw_text == "</think>ans");
}

TEST_CASE("strip_reasoning leaves benign examples alone") {
  const auto ex = make_example("b", Category::benign, "p", "r", "ans");
  CHECK(strip_reasoning(ex) == ex);
}

TEST_CASE("strip_reasoning is idempotent") {
  for (const auto& ex : three_examples()) {
    const auto once = strip_reasoning(ex);
    CHECK(strip_reasoning(once) == once);
  }
  const auto empty = make_example("h", Category::harmful, "p", "", "ans");
  CHECK(strip_reasoning(empty).raw_text == empty.raw_text);
}
