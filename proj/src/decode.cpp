#include "thinksafe/decode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "thinksafe/error.hpp"

namespace thinksafe {

std::vector<double> apply_decode_filters(std::span<const double> logits, const DecodeParams& decode) {
  const std::size_t n = logits.size();
  if (n == 0) throw ContractError("empty logits");
  for (double x : logits)
    if (!std::isfinite(x)) throw ContractError("non-finite logit");

  // Descending by logit, ties to the lower id. Temperature preserves this order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });

  std::vector<double> probs(n, 0.0);
  if (decode.greedy) {
    probs[order.front()] = 1.0;
    return probs;
  }

  const double inv_t = 1.0 / decode.temperature;
  const double top = logits[order.front()] * inv_t;
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    probs[i] = std::exp(logits[i] * inv_t - top);
    z += probs[i];
  }
  for (double& p : probs) p /= z;

  std::size_t keep = n;
  if (decode.top_k > 0) keep = std::min(keep, static_cast<std::size_t>(decode.top_k));
  // Nucleus over the survivors of top-k, measured on their renormalized mass.
  double kept_mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept_mass += probs[order[i]];
  if (decode.top_p < 1.0) {
    double cum = 0.0;
    std::size_t prefix = 0;
    while (prefix < keep) {
      cum += probs[order[prefix]] / kept_mass;
      ++prefix;
      if (cum >= decode.top_p) break;
    }
    keep = std::max<std::size_t>(prefix, 1);
  }

  std::vector<double> out(n, 0.0);
  double mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) mass += probs[order[i]];
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / mass;
  return out;
}

int sample_index(std::span<const double> probs, double u) {
  double cum = 0.0;
  int last_nonzero = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_nonzero = static_cast<int>(i);
    cum += probs[i];
    if (u < cum) return static_cast<int>(i);
  }
  if (last_nonzero < 0) throw ContractError("distribution has no mass");
  return last_nonzero;
}

namespace {

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t count = 0;
  for (std::size_t pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size()))
    ++count;
  return count;
}

}  // namespace

ParsedResponse parse_reasoning(std::string_view raw_text, TagMode mode) {
  const std::size_t opens = count_occurrences(raw_text, kThinkOpen);
  const std::size_t closes = count_occurrences(raw_text, kThinkClose);
  const std::size_t close_at = raw_text.find(kThinkClose);
  ParsedResponse out;
  if (mode == TagMode::paired) {
    const std::size_t open_at = raw_text.find(kThinkOpen);
    if (opens == 1 && closes == 1 && open_at < close_at) {
      out.well_formed = true;
      out.reasoning = std::string(raw_text.substr(open_at + kThinkOpen.size(), close_at - open_at - kThinkOpen.size()));
      out.answer = std::string(raw_text.substr(close_at + kThinkClose.size()));
    }
  } else if (opens == 0 && closes == 1) {
    out.well_formed = true;
    out.reasoning = std::string(raw_text.substr(0, close_at));
    out.answer = std::string(raw_text.substr(close_at + kThinkClose.size()));
  }
  if (!out.well_formed) {
    out.reasoning.clear();
    out.answer = std::string(raw_text);
  }
  return out;
}

}  // namespace thinksafe
