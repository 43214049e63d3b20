#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace thinksafe {

enum class Category { harmful, benign };

std::string_view to_string(Category c);
Category parse_category(std::string_view s);

// paired: "<think>...</think>answer"; closing_only: "...</think>answer".
enum class TagMode { paired, closing_only };

std::string_view to_string(TagMode m);
TagMode parse_tag_mode(std::string_view s);

struct DecodeParams {
  double temperature = 0.6;
  double top_p = 0.95;
  int top_k = 20;  // 0 disables
  int max_tokens = 16384;
  int n_samples = 1;
  bool greedy = false;

  // Qwen-style defaults; R1-style backends disable top-k.
  static DecodeParams qwen_style() { return {}; }
  static DecodeParams r1_style() {
    DecodeParams d;
    d.top_k = 0;
    return d;
  }

  // Throws ConfigError on the first violated bound.
  void validate() const;
  bool operator==(const DecodeParams&) const = default;
};

enum class SafetyLabel { safe, unsafe };

std::string_view to_string(SafetyLabel l);
SafetyLabel parse_label(std::string_view s);

struct GuardVerdict {
  double p_safe = 0.0;
  SafetyLabel label = SafetyLabel::unsafe;
  std::string guard_id;

  bool safe() const { return label == SafetyLabel::safe; }
  bool operator==(const GuardVerdict&) const = default;
};

struct GenerationMeta {
  std::string backend_id;
  DecodeParams decode;
  std::uint64_t seed = 0;
  int sample_index = 0;

  bool operator==(const GenerationMeta&) const = default;
};

}  // namespace thinksafe
