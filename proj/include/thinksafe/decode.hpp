#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "thinksafe/types.hpp"

namespace thinksafe {

// temperature -> top-k (ties to the lower id) -> nucleus -> renormalize.
// The nucleus keeps the smallest descending-probability prefix whose mass
// reaches top_p, never fewer than one token. `greedy` returns a one-hot
// distribution on the argmax.
std::vector<double> apply_decode_filters(std::span<const double> logits, const DecodeParams& decode);

// Index drawn from `probs` by inverse CDF over ascending token ids.
int sample_index(std::span<const double> probs, double u);

struct ParsedResponse {
  std::string reasoning;
  std::string answer;
  bool well_formed = false;
};

inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";

ParsedResponse parse_reasoning(std::string_view raw_text, TagMode mode);

}  // namespace thinksafe
