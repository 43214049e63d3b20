#pragma once

#include <array>
#include <string>
#include <string_view>

namespace thinksafe {

enum class SteeringId { thinksafe, suffix, risk, intent, none };
enum class Placement { prefix, suffix, not_applicable };

struct SteeringTemplate {
  SteeringId id = SteeringId::none;
  std::string_view pattern;  // exactly one "{prompt}"; empty for none
  Placement placement = Placement::not_applicable;
};

inline constexpr std::string_view kPromptPlaceholder = "{prompt}";

std::string_view to_string(SteeringId id);
// Throws ConfigError for unknown names.
SteeringId parse_steering_id(std::string_view name);

const SteeringTemplate& template_by_id(SteeringId id);
const SteeringTemplate& template_by_id(std::string_view name);

std::string compose(const SteeringTemplate& tmpl, std::string_view prompt);

// The instruction text of a template with the placeholder and joiner removed;
// used to check that stored prompts never carry steering boilerplate.
std::string instruction_text(const SteeringTemplate& tmpl);

inline constexpr std::array<SteeringId, 4> kRefusalTemplates = {
    SteeringId::thinksafe, SteeringId::suffix, SteeringId::risk, SteeringId::intent};

}  // namespace thinksafe
