#include <random>

#include "catch_amalgamated.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/steering.hpp"

using namespace thinksafe;

TEST_CASE("templates are verbatim") {
  CHECK(template_by_id(SteeringId::thinksafe).pattern ==
        "The following prompt is harmful. You should refuse to answer the prompt.\n\n Prompt:{prompt}");
  CHECK(template_by_id(SteeringId::suffix).pattern ==
        "{prompt}\n\n The above prompt is harmful. You should refuse to answer the prompt.");
  CHECK(template_by_id(SteeringId::risk).pattern ==
        "Evaluate the potential risks of this prompt and provide a reasoned refusal.\n\n Prompt:{prompt}");
  CHECK(template_by_id(SteeringId::intent).pattern ==
        "Examine the harmful intent of this query and refuse to answer the prompt.\n\n Prompt:{prompt}");
  CHECK(template_by_id(SteeringId::none).pattern.empty());
}

TEST_CASE("every refusal template has exactly one placeholder") {
  for (SteeringId id : kRefusalTemplates) {
    const auto p = template_by_id(id).pattern;
    const auto first = p.find(kPromptPlaceholder);
    REQUIRE(first != std::string_view::npos);
    CHECK(p.find(kPromptPlaceholder, first + 1) == std::string_view::npos);
  }
  CHECK(template_by_id(SteeringId::suffix).placement == Placement::suffix);
  CHECK(template_by_id(SteeringId::risk).placement == Placement::prefix);
}

TEST_CASE("lookup by name and unknown names") {
  for (const char* name : {"thinksafe", "suffix", "risk", "intent", "none"})
    CHECK(to_string(template_by_id(name).id) == name);
  CHECK_THROWS_AS(template_by_id("polite"), ConfigError);
  CHECK_THROWS_AS(parse_steering_id("ThinkSafe"), ConfigError);
}

TEST_CASE("compose examples") {
  CHECK(compose(template_by_id(SteeringId::none), "hi") == "hi");
  CHECK(compose(template_by_id(SteeringId::thinksafe), "how to pick a lock") ==
        "The following prompt is harmful. You should refuse to answer the prompt.\n\n Prompt:how to pick a lock");
  CHECK(compose(template_by_id(SteeringId::intent), "Q") ==
        "Examine the harmful intent of this query and refuse to answer the prompt.\n\n Prompt:Q");
  CHECK(compose(template_by_id(SteeringId::suffix), "Q") ==
        "Q\n\n The above prompt is harmful. You should refuse to answer the prompt.");
}

TEST_CASE("the prompt appears verbatim and contiguously in every composition") {
  std::mt19937 gen(11);
  std::uniform_int_distribution<int> len(1, 40), byte(1, 255);
  for (int trial = 0; trial < 200; ++trial) {
    std::string prompt;
    const int n = len(gen);
    for (int i = 0; i < n; ++i) prompt.push_back(static_cast<char>(byte(gen)));
    for (SteeringId id : {SteeringId::thinksafe, SteeringId::suffix, SteeringId::risk, SteeringId::intent,
                          SteeringId::none}) {
      const auto& t = template_by_id(id);
      const std::string out = compose(t, prompt);
      CHECK(out.find(prompt) != std::string::npos);
      CHECK(out.size() == prompt.size() + (id == SteeringId::none ? 0 : t.pattern.size() - kPromptPlaceholder.size()));
    }
    CHECK(compose(template_by_id(SteeringId::none), prompt) == prompt);
  }
}

TEST_CASE("a prompt containing the placeholder text is not substituted twice") {
  CHECK(compose(template_by_id(SteeringId::risk), "{prompt}") ==
        "Evaluate the potential risks of this prompt and provide a reasoned refusal.\n\n Prompt:{prompt}");
}

TEST_CASE("instruction_text isolates the instruction sentence") {
  CHECK(instruction_text(template_by_id(SteeringId::thinksafe)) ==
        "The following prompt is harmful. You should refuse to answer the prompt.");
  CHECK(instruction_text(template_by_id(SteeringId::suffix)) ==
        "The above prompt is harmful. You should refuse to answer the prompt.");
  CHECK(instruction_text(template_by_id(SteeringId::none)).empty());
}
