#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "thinksafe/decode.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/types.hpp"

namespace thinksafe {

class ToyLM;

enum class FinishReason { stop, length };
std::string_view to_string(FinishReason f);

struct Generation {
  std::string raw_text;
  std::size_t token_count = 0;
  FinishReason finish = FinishReason::stop;
  std::optional<std::vector<double>> per_token_logprobs;
};

struct GenerationRequest {
  std::string prompt_text;
  std::uint64_t seed = 0;
};

// Raised by generate_batch; `index` is the failing request.
class BatchItemError : public BackendError {
 public:
  BatchItemError(std::size_t index, const std::string& what) : BackendError(what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;

  virtual std::string id() const = 0;

  // Exactly decode.n_samples generations, in sample order.
  virtual std::vector<Generation> generate(const std::string& prompt_text, const DecodeParams& decode,
                                           std::uint64_t seed) = 0;

  // Results follow request order. The default runs requests one after another.
  virtual std::vector<std::vector<Generation>> generate_batch(std::span<const GenerationRequest> requests,
                                                              const DecodeParams& decode);

  virtual bool supports_logprobs() const { return false; }

  // Per-token log-probabilities of the response (with its closing <eos>)
  // given the prompt. Throws UnsupportedError when the backend cannot score.
  virtual std::vector<double> score_response(const std::string& prompt_text, const std::string& raw_text) const;
};

// Local backend over a toy model. Bit-deterministic given the seed; sample i
// draws from the stream derive_seed(seed, "sample", i).
class ToyBackend : public GenerationBackend {
 public:
  ToyBackend(std::shared_ptr<const ToyLM> model, std::string id);

  std::string id() const override { return id_; }
  std::vector<Generation> generate(const std::string& prompt_text, const DecodeParams& decode,
                                   std::uint64_t seed) override;
  bool supports_logprobs() const override { return true; }
  std::vector<double> score_response(const std::string& prompt_text, const std::string& raw_text) const override;

  const ToyLM& model() const { return *model_; }
  std::shared_ptr<const ToyLM> model_ptr() const { return model_; }

 private:
  std::shared_ptr<const ToyLM> model_;
  std::string id_;
};

struct RemoteEndpoint {
  std::string base_url;  // e.g. http://127.0.0.1:8000 (optional path prefix)
  std::string model;
  std::string api_key_env = "THINKSAFE_API_KEY";
  int max_concurrency = 4;
  int max_retries = 3;
  std::chrono::milliseconds backoff_initial{200};
  std::chrono::milliseconds backoff_cap{5000};
  std::chrono::seconds timeout{600};
  bool supports_top_k = false;
};

// Splits "http://host:port/prefix" into the scheme-host-port part and the path prefix.
std::pair<std::string, std::string> split_base_url(const std::string& base_url);

// Shared transport: POST {base_url}/v1/chat/completions with retries and
// capped exponential backoff. 429 and 5xx responses and transport failures
// are retried; other statuses fail immediately.
class ChatCompletionsClient {
 public:
  explicit ChatCompletionsClient(RemoteEndpoint endpoint);

  // Body must already contain model/messages/etc. Returns the parsed response JSON text.
  std::string post(const std::string& body) const;

  const RemoteEndpoint& endpoint() const { return endpoint_; }

 private:
  RemoteEndpoint endpoint_;
};

class RemoteBackend : public GenerationBackend {
 public:
  explicit RemoteBackend(RemoteEndpoint endpoint);

  std::string id() const override;
  std::vector<Generation> generate(const std::string& prompt_text, const DecodeParams& decode,
                                   std::uint64_t seed) override;
  std::vector<std::vector<Generation>> generate_batch(std::span<const GenerationRequest> requests,
                                                      const DecodeParams& decode) override;

  // Request body for one prompt; exposed for wire-format tests.
  std::string request_body(const std::string& prompt_text, const DecodeParams& decode, std::uint64_t seed) const;

 private:
  ChatCompletionsClient client_;
};

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception
// (lowest index) is rethrown after all workers finish.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace thinksafe
