#pragma once

#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "thinksafe/genclient.hpp"
#include "thinksafe/types.hpp"

namespace thinksafe {

inline constexpr double kDefaultGuardThreshold = 0.5;

// Two-class softmax over (safe, unsafe) logits, evaluated as sigmoid(ls - lu)
// and kept strictly inside (0, 1).
double p_safe_from_logits(double logit_safe, double logit_unsafe);

struct GuardPair {
  std::string prompt;
  std::string response_raw;
};

class Guard {
 public:
  virtual ~Guard() = default;
  virtual std::string id() const = 0;
  virtual double threshold() const = 0;
  virtual GuardVerdict classify(const std::string& prompt, const std::string& response_raw) const = 0;
  virtual std::vector<GuardVerdict> classify_batch(std::span<const GuardPair> pairs) const;

 protected:
  GuardVerdict verdict(double p_safe) const;
};

struct Lexicon {
  std::set<std::string> forbidden_terms;
  std::set<std::string> refusal_markers;
};

// Sections "[forbidden]" and "[refusal_markers]", one term per line; blank
// lines and lines starting with '#' are ignored.
Lexicon load_lexicon(const std::filesystem::path& path);
void write_lexicon(const Lexicon& lexicon, const std::filesystem::path& path);

// Case-insensitive substring search.
bool contains_term(std::string_view haystack, std::string_view term);

class LexiconGuard : public Guard {
 public:
  static constexpr double kUnsafeScore = 0.01;
  static constexpr double kSafeScore = 0.99;

  explicit LexiconGuard(Lexicon lexicon, double threshold = kDefaultGuardThreshold,
                        std::string id = "lexicon");

  std::string id() const override { return id_; }
  double threshold() const override { return threshold_; }
  // Scores the whole response, reasoning and answer alike.
  GuardVerdict classify(const std::string& prompt, const std::string& response_raw) const override;

  const Lexicon& lexicon() const { return lexicon_; }

 private:
  Lexicon lexicon_;
  double threshold_;
  std::string id_;
};

// Asks a chat endpoint to answer "safe" or "unsafe" and reads the first-token
// log-probabilities of both class words.
class RemoteGuard : public Guard {
 public:
  explicit RemoteGuard(RemoteEndpoint endpoint, double threshold = kDefaultGuardThreshold);

  std::string id() const override;
  double threshold() const override { return threshold_; }
  GuardVerdict classify(const std::string& prompt, const std::string& response_raw) const override;
  std::vector<GuardVerdict> classify_batch(std::span<const GuardPair> pairs) const override;

  std::string request_body(const std::string& prompt, const std::string& response_raw) const;
  // Extracts p_safe from a chat-completions response carrying top_logprobs.
  static double p_safe_from_response(const std::string& response_json);

 private:
  ChatCompletionsClient client_;
  double threshold_;
};

bool detect_refusal(std::string_view response_answer, const std::set<std::string>& markers);

std::set<std::string> default_refusal_markers();

}  // namespace thinksafe
