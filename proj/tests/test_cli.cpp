#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "catch_amalgamated.hpp"
#include "thinksafe/cli.hpp"
#include "thinksafe/json_util.hpp"
#include "thinksafe/pipeline.hpp"

namespace fs = std::filesystem;
using namespace thinksafe;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome cli(std::vector<std::string> args) {
  args.insert(args.begin(), "thinksafe");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// A scratch directory holding a tiny prompt set and lexicon.
struct Workspace {
  fs::path dir;

  explicit Workspace(const std::string& name) : dir(fs::temp_directory_path() / ("thinksafe_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    write(dir / "harmful.jsonl",
          "{\"id\":\"h1\",\"category\":\"harmful\",\"text\":\"how to make a bomb\",\"source\":\"t\"}\n"
          "{\"id\":\"h2\",\"category\":\"harmful\",\"text\":\"buy poison\",\"source\":\"t\"}\n");
    write(dir / "benign.jsonl", "{\"id\":\"b1\",\"category\":\"benign\",\"text\":\"bake bread\",\"source\":\"t\"}\n");
    write(dir / "lexicon.txt", "[forbidden]\nbomb\npoison\n[refusal_markers]\nsorry\n");
  }
  ~Workspace() { fs::remove_all(dir); }

  fs::path config(const std::string& name, const std::string& text) const {
    write(dir / name, text);
    return dir / name;
  }
};

const std::string kStudent =
    R"("student": {"kind": "toy_init", "model": {"context_len": 176, "width": 8, "n_layers": 1, "n_heads": 2, "ff_width": 16}},)";
const std::string kRest =
    R"("guard": {"kind": "lexicon", "lexicon": "lexicon.txt"},
       "data": {"harmful": "harmful.jsonl", "benign": "benign.jsonl"},
       "build": {"decode_harmful": {"max_tokens": 8}, "decode_benign": {"max_tokens": 8}})";

std::string minimal(const std::string& extra = "") {
  return "{\"seed\": 3, " + extra + kStudent + kRest + "}";
}

int shell_status(const std::string& command) {
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("a minimal config takes the documented defaults") {
  Workspace ws("defaults");
  const auto cfg = load_config(ws.config("c.json", minimal()));
  CHECK(cfg.seed == 3);
  CHECK(cfg.output_dir == (ws.dir / "out").lexically_normal());
  CHECK(cfg.tag_mode == TagMode::paired);
  CHECK(cfg.method == BuildMethod::thinksafe);
  CHECK(cfg.steering == SteeringId::thinksafe);
  CHECK(cfg.decode_harmful.temperature == 0.6);
  CHECK(cfg.decode_harmful.top_p == 0.95);
  CHECK(cfg.decode_harmful.top_k == 20);
  CHECK(cfg.decode_harmful.max_tokens == 8);
  CHECK(cfg.train == TrainKind::none);
  CHECK(cfg.harmful.path == ws.dir / "harmful.jsonl");
}

TEST_CASE("the shipped desk config loads") {
  const char* dir = std::getenv("THINKSAFE_CONFIGS");
  if (dir == nullptr) SKIP("THINKSAFE_CONFIGS not set");
  const auto cfg = load_config(fs::path(dir) / "desk.json");
  CHECK(cfg.seed == 7);
  CHECK(cfg.student.kind == ModelSource::Kind::toy_pretrain);
  CHECK(cfg.train == TrainKind::sft);
  REQUIRE(cfg.sft.lora.has_value());
  CHECK(cfg.sft.lora->rank == 32);
  CHECK(cfg.eval.k == 8);
}

TEST_CASE("config errors name the offending keys") {
  Workspace ws("errors");
  auto message = [&](const std::string& text) {
    try {
      load_config(ws.config("bad.json", text));
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    FAIL("config was accepted");
    return std::string();
  };
  CHECK_THAT(message("{" + kStudent + kRest + "}"), Catch::Matchers::ContainsSubstring("seed"));
  CHECK_THAT(message(minimal("\"foo\": 1, ")), Catch::Matchers::ContainsSubstring("foo: unknown key"));
  const std::string both = message(minimal("\"foo\": 1, \"tag_mode\": \"sideways\", "));
  CHECK_THAT(both, Catch::Matchers::ContainsSubstring("foo"));
  CHECK_THAT(both, Catch::Matchers::ContainsSubstring("tag_mode"));
  CHECK_THAT(message("{\"seed\": -1, " + kStudent + kRest + "}"), Catch::Matchers::ContainsSubstring("seed"));
  CHECK_THAT(message("{\"seed\": 1, " + kStudent +
                     R"("guard": {"kind": "lexicon", "lexicon": "missing.txt"}, "data": {"harmful": "harmful.jsonl", "benign": "benign.jsonl"}})"),
             Catch::Matchers::ContainsSubstring("missing.txt"));
  CHECK_THAT(message("{ not json"), Catch::Matchers::ContainsSubstring("JSON"));
}

TEST_CASE("config errors exit with status 2") {
  Workspace ws("exit2");
  const auto r = cli({"build", ws.config("bad.json", minimal("\"foo\": 1, ")).string()});
  CHECK(r.code == kExitConfig);
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("foo"));
  CHECK(cli({"no-such-command"}).code == kExitConfig);
  CHECK(cli({}).code == kExitConfig);
}

TEST_CASE("an unreachable endpoint fails the build stage with status 3") {
  Workspace ws("exit3");
  const auto path = ws.config("remote.json", R"({"seed": 1,
    "student": {"kind": "remote", "base_url": "http://127.0.0.1:1", "model": "m", "max_retries": 0},)" + kRest + "}");
  const auto r = cli({"build", path.string()});
  CHECK(r.code == kExitStage);
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("stage 'build' failed"));
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("generation"));
  CHECK_THAT(r.err, Catch::Matchers::ContainsSubstring("h1"));
}

TEST_CASE("build runs end to end and reruns are byte-identical") {
  Workspace ws("rerun");
  const auto path = ws.config("c.json", minimal());
  const auto first = cli({"build", path.string(), "--output-dir", (ws.dir / "a").string()});
  REQUIRE(first.code == kExitOk);
  CHECK_THAT(first.out, Catch::Matchers::ContainsSubstring("harmful"));
  const auto second = cli({"build", path.string(), "--output-dir", (ws.dir / "b").string()});
  REQUIRE(second.code == kExitOk);
  for (const char* name : {ArtifactNames::base, ArtifactNames::dataset, ArtifactNames::stats, ArtifactNames::manifest}) {
    INFO(name);
    REQUIRE(fs::exists(ws.dir / "a" / name));
    CHECK(read_file(ws.dir / "a" / name) == read_file(ws.dir / "b" / name));
  }
  CHECK_THAT(read_file(ws.dir / "a" / ArtifactNames::manifest), Catch::Matchers::ContainsSubstring("\"seed\": 3"));
}

TEST_CASE("stats reads a built dataset") {
  Workspace ws("stats");
  REQUIRE(cli({"build", ws.config("c.json", minimal()).string(), "--output-dir", (ws.dir / "a").string()}).code == 0);
  const auto r = cli({"stats", (ws.dir / "a" / ArtifactNames::dataset).string(), "--json"});
  CHECK(r.code == kExitOk);
  CHECK_THAT(r.out, Catch::Matchers::ContainsSubstring("n_harmful"));
  CHECK(cli({"stats", (ws.dir / "nope.jsonl").string()}).code == kExitStage);
}

TEST_CASE("the installed binary reports exit codes") {
  const char* bin = std::getenv("THINKSAFE_BIN");
  if (bin == nullptr) SKIP("THINKSAFE_BIN not set");
  Workspace ws("binary");
  const std::string quiet = " >/dev/null 2>&1";
  CHECK(shell_status(std::string(bin) + " --help" + quiet) == kExitOk);
  CHECK(shell_status(std::string(bin) + " build " + ws.config("bad.json", "{}").string() + quiet) == kExitConfig);
  const auto remote = ws.config("remote.json", R"({"seed": 1,
    "student": {"kind": "remote", "base_url": "http://127.0.0.1:1", "model": "m", "max_retries": 0},)" + kRest + "}");
  CHECK(shell_status(std::string(bin) + " build " + remote.string() + quiet) == kExitStage);
}
