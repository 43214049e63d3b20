#include "thinksafe/steering.hpp"

#include "thinksafe/error.hpp"

namespace thinksafe {

namespace {

const SteeringTemplate kTemplates[] = {
    {SteeringId::thinksafe,
     "The following prompt is harmful. You should refuse to answer the prompt.\n\n Prompt:{prompt}",
     Placement::prefix},
    {SteeringId::suffix, "{prompt}\n\n The above prompt is harmful. You should refuse to answer the prompt.",
     Placement::suffix},
    {SteeringId::risk,
     "Evaluate the potential risks of this prompt and provide a reasoned refusal.\n\n Prompt:{prompt}",
     Placement::prefix},
    {SteeringId::intent,
     "Examine the harmful intent of this query and refuse to answer the prompt.\n\n Prompt:{prompt}",
     Placement::prefix},
    {SteeringId::none, "", Placement::not_applicable},
};

}  // namespace

std::string_view to_string(SteeringId id) {
  switch (id) {
    case SteeringId::thinksafe:
      return "thinksafe";
    case SteeringId::suffix:
      return "suffix";
    case SteeringId::risk:
      return "risk";
    case SteeringId::intent:
      return "intent";
    case SteeringId::none:
      return "none";
  }
  return "none";
}

SteeringId parse_steering_id(std::string_view name) {
  for (const auto& t : kTemplates)
    if (to_string(t.id) == name) return t.id;
  throw ConfigError("unknown steering template: " + std::string(name));
}

const SteeringTemplate& template_by_id(SteeringId id) {
  for (const auto& t : kTemplates)
    if (t.id == id) return t;
  throw ConfigError("unknown steering template");
}

const SteeringTemplate& template_by_id(std::string_view name) { return template_by_id(parse_steering_id(name)); }

std::string compose(const SteeringTemplate& tmpl, std::string_view prompt) {
  if (tmpl.id == SteeringId::none) return std::string(prompt);
  const std::size_t at = tmpl.pattern.find(kPromptPlaceholder);
  std::string out(tmpl.pattern.substr(0, at));
  out.append(prompt);
  out.append(tmpl.pattern.substr(at + kPromptPlaceholder.size()));
  return out;
}

std::string instruction_text(const SteeringTemplate& tmpl) {
  if (tmpl.id == SteeringId::none) return {};
  std::string_view p = tmpl.pattern;
  if (tmpl.placement == Placement::prefix) {
    p = p.substr(0, p.find("\n\n"));
  } else {
    p = p.substr(p.find("\n\n") + 3);
  }
  return std::string(p);
}

}  // namespace thinksafe
