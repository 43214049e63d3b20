#include <cmath>
#include <string>

#include "thinksafe/error.hpp"
#include "thinksafe/rng.hpp"
#include "thinksafe/types.hpp"
#include "thinksafe/vocab.hpp"

namespace thinksafe {

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * M_PI * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t global, std::string_view stage, std::string_view key) {
  std::string material(stage);
  material.push_back('\0');
  material.append(key);
  return splitmix64(global ^ fnv1a64(material));
}

std::uint64_t derive_seed(std::uint64_t global, std::string_view stage, std::uint64_t index) {
  return derive_seed(global, stage, std::to_string(index));
}

std::string_view to_string(Category c) { return c == Category::harmful ? "harmful" : "benign"; }

Category parse_category(std::string_view s) {
  if (s == "harmful") return Category::harmful;
  if (s == "benign") return Category::benign;
  throw ParseError("unknown category: " + std::string(s));
}

std::string_view to_string(TagMode m) { return m == TagMode::paired ? "paired" : "closing_only"; }

TagMode parse_tag_mode(std::string_view s) {
  if (s == "paired") return TagMode::paired;
  if (s == "closing_only") return TagMode::closing_only;
  throw ParseError("unknown tag mode: " + std::string(s));
}

std::string_view to_string(SafetyLabel l) { return l == SafetyLabel::safe ? "safe" : "unsafe"; }

SafetyLabel parse_label(std::string_view s) {
  if (s == "safe") return SafetyLabel::safe;
  if (s == "unsafe") return SafetyLabel::unsafe;
  throw ParseError("unknown guard label: " + std::string(s));
}

void DecodeParams::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
  if (top_k < 0) throw ConfigError("top_k must be >= 0");
  if (max_tokens <= 0) throw ConfigError("max_tokens must be positive");
  if (n_samples <= 0) throw ConfigError("n_samples must be positive");
}

TokenSeq Vocab::encode(std::string_view text) {
  static constexpr std::string_view kOpen = "<think>";
  static constexpr std::string_view kClose = "</think>";
  TokenSeq out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, kOpen.size(), kOpen) == 0) {
      out.push_back(kThink);
      i += kOpen.size();
    } else if (text.compare(i, kClose.size(), kClose) == 0) {
      out.push_back(kEndThink);
      i += kClose.size();
    } else {
      out.push_back(static_cast<unsigned char>(text[i]));
      ++i;
    }
  }
  return out;
}

std::string Vocab::decode(std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (id == kThink) {
      out += "<think>";
    } else if (id == kEndThink) {
      out += "</think>";
    }
  }
  return out;
}

TokenSeq prompt_tokens(std::string_view prompt_text) {
  TokenSeq ids = Vocab::encode(prompt_text);
  ids.push_back(Vocab::kEos);
  return ids;
}

TokenSeq response_tokens(std::string_view raw_text) {
  TokenSeq ids = Vocab::encode(raw_text);
  ids.push_back(Vocab::kEos);
  return ids;
}

std::size_t token_length(std::string_view raw_text) { return Vocab::encode(raw_text).size(); }

}  // namespace thinksafe
