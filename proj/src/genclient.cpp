#include "thinksafe/genclient.hpp"

#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/json_util.hpp"
#include "thinksafe/rng.hpp"
#include "thinksafe/toymodel.hpp"
#include "thinksafe/vocab.hpp"

namespace thinksafe {

using ojson = nlohmann::ordered_json;

std::string_view to_string(FinishReason f) { return f == FinishReason::stop ? "stop" : "length"; }

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t n_threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_index = n;
  std::exception_ptr failure;
  std::vector<std::thread> threads;
  threads.reserve(n_threads);
  for (std::size_t w = 0; w < n_threads; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (i < failed_index) {
            failed_index = i;
            failure = std::current_exception();
          }
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<std::vector<Generation>> GenerationBackend::generate_batch(std::span<const GenerationRequest> requests,
                                                                       const DecodeParams& decode) {
  std::vector<std::vector<Generation>> out;
  out.reserve(requests.size());
  for (std::size_t i = 0; i < requests.size(); ++i) {
    try {
      out.push_back(generate(requests[i].prompt_text, decode, requests[i].seed));
    } catch (const Error& e) {
      throw BatchItemError(i, e.what());
    }
  }
  return out;
}

std::vector<double> GenerationBackend::score_response(const std::string&, const std::string&) const {
  throw UnsupportedError("backend '" + id() + "' does not provide token log-probabilities");
}

namespace {

// Replaces bytes that do not form valid UTF-8 with U+FFFD so that generated
// text survives a trip through the dataset file unchanged.
std::string sanitize_utf8(const std::string& in) {
  std::string out;
  out.reserve(in.size());
  std::size_t i = 0;
  while (i < in.size()) {
    const auto c = static_cast<unsigned char>(in[i]);
    std::size_t len = 0;
    if (c < 0x80) len = 1;
    else if ((c & 0xE0) == 0xC0 && c >= 0xC2) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0 && c <= 0xF4) len = 4;
    bool ok = len > 0 && i + len <= in.size();
    for (std::size_t k = 1; ok && k < len; ++k) ok = (static_cast<unsigned char>(in[i + k]) & 0xC0) == 0x80;
    if (ok && len == 3) {
      const auto c1 = static_cast<unsigned char>(in[i + 1]);
      ok = !(c == 0xE0 && c1 < 0xA0) && !(c == 0xED && c1 >= 0xA0);
    }
    if (ok && len == 4) {
      const auto c1 = static_cast<unsigned char>(in[i + 1]);
      ok = !(c == 0xF0 && c1 < 0x90) && !(c == 0xF4 && c1 >= 0x90);
    }
    if (ok) {
      out.append(in, i, len);
      i += len;
    } else {
      out += "\xEF\xBF\xBD";
      ++i;
    }
  }
  return out;
}

}  // namespace

ToyBackend::ToyBackend(std::shared_ptr<const ToyLM> model, std::string id) : model_(std::move(model)), id_(std::move(id)) {
  if (!model_) throw ContractError("toy backend needs a model");
}

std::vector<Generation> ToyBackend::generate(const std::string& prompt_text, const DecodeParams& decode,
                                             std::uint64_t seed) {
  decode.validate();
  const TokenSeq prompt = prompt_tokens(prompt_text);
  if (prompt.size() >= static_cast<std::size_t>(model_->config().context_len))
    throw BackendError("prompt of " + std::to_string(prompt.size()) + " tokens does not fit the context");
  std::vector<Generation> out;
  out.reserve(static_cast<std::size_t>(decode.n_samples));
  for (int i = 0; i < decode.n_samples; ++i) {
    Rng rng(derive_seed(seed, "sample", static_cast<std::uint64_t>(i)));
    SampleResult s = sample(*model_, prompt, decode, rng);
    Generation g;
    TokenSeq text_tokens = s.tokens;
    if (s.stopped) text_tokens.pop_back();
    g.raw_text = sanitize_utf8(Vocab::decode(text_tokens));
    g.token_count = s.tokens.size();
    g.finish = s.stopped ? FinishReason::stop : FinishReason::length;
    g.per_token_logprobs = std::move(s.logprobs);
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<double> ToyBackend::score_response(const std::string& prompt_text, const std::string& raw_text) const {
  return sequence_logprob(*model_, prompt_tokens(prompt_text), response_tokens(raw_text)).per_token;
}

std::pair<std::string, std::string> split_base_url(const std::string& base_url) {
  const std::size_t scheme = base_url.find("://");
  if (scheme == std::string::npos) throw ConfigError("base_url needs a scheme: " + base_url);
  const std::size_t path = base_url.find('/', scheme + 3);
  if (path == std::string::npos) return {base_url, ""};
  std::string prefix = base_url.substr(path);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {base_url.substr(0, path), prefix};
}

ChatCompletionsClient::ChatCompletionsClient(RemoteEndpoint endpoint) : endpoint_(std::move(endpoint)) {
  split_base_url(endpoint_.base_url);
  if (endpoint_.max_concurrency < 1) throw ConfigError("max_concurrency must be >= 1");
  if (endpoint_.max_retries < 0) throw ConfigError("max_retries must be >= 0");
}

std::string ChatCompletionsClient::post(const std::string& body) const {
  const auto [host, prefix] = split_base_url(endpoint_.base_url);
  httplib::Client cli(host);
  cli.set_connection_timeout(std::chrono::seconds(10));
  cli.set_read_timeout(endpoint_.timeout);
  cli.set_write_timeout(std::chrono::seconds(30));
  httplib::Headers headers;
  if (const char* key = std::getenv(endpoint_.api_key_env.c_str()); key != nullptr && *key != '\0')
    headers.emplace("Authorization", std::string("Bearer ") + key);
  const std::string path = prefix + "/v1/chat/completions";

  std::string last_error;
  auto delay = endpoint_.backoff_initial;
  for (int attempt = 0; attempt <= endpoint_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(delay);
      delay = std::min(delay * 2, endpoint_.backoff_cap);
    }
    auto res = cli.Post(path, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) return res->body;
    last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
    if (res->status != 429 && res->status < 500) break;
  }
  throw BackendError("POST " + endpoint_.base_url + path + " failed: " + last_error);
}

RemoteBackend::RemoteBackend(RemoteEndpoint endpoint) : client_(std::move(endpoint)) {}

std::string RemoteBackend::id() const { return "remote:" + client_.endpoint().model; }

std::string RemoteBackend::request_body(const std::string& prompt_text, const DecodeParams& decode,
                                        std::uint64_t seed) const {
  ojson body;
  body["model"] = client_.endpoint().model;
  ojson msg;
  msg["role"] = "user";
  msg["content"] = prompt_text;
  body["messages"] = ojson::array({msg});
  if (decode.greedy) {
    body["temperature"] = 0.0;
  } else {
    body["temperature"] = decode.temperature;
  }
  body["top_p"] = decode.top_p;
  body["max_tokens"] = decode.max_tokens;
  body["n"] = decode.n_samples;
  body["seed"] = seed;
  if (client_.endpoint().supports_top_k) body["top_k"] = decode.top_k;
  return dump_compact(body);
}

std::vector<Generation> RemoteBackend::generate(const std::string& prompt_text, const DecodeParams& decode,
                                                std::uint64_t seed) {
  decode.validate();
  const std::string response = client_.post(request_body(prompt_text, decode, seed));
  std::vector<Generation> out;
  try {
    const auto j = ojson::parse(response);
    const auto& choices = j.at("choices");
    if (choices.size() != static_cast<std::size_t>(decode.n_samples))
      throw BackendError("endpoint returned " + std::to_string(choices.size()) + " choices, expected " +
                         std::to_string(decode.n_samples));
    // Choices may arrive out of order; "index" pins sample order.
    out.resize(choices.size());
    for (std::size_t i = 0; i < choices.size(); ++i) {
      const auto& c = choices[i];
      const std::size_t slot = c.contains("index") ? c.at("index").get<std::size_t>() : i;
      if (slot >= out.size()) throw BackendError("choice index out of range");
      Generation g;
      const auto& content = c.at("message").at("content");
      g.raw_text = content.is_null() ? std::string() : content.get<std::string>();
      const std::string finish = c.contains("finish_reason") && c.at("finish_reason").is_string()
                                     ? c.at("finish_reason").get<std::string>()
                                     : "stop";
      g.finish = finish == "length" ? FinishReason::length : FinishReason::stop;
      if (c.contains("logprobs") && c.at("logprobs").is_object() && c.at("logprobs").contains("content")) {
        std::vector<double> lps;
        for (const auto& tok : c.at("logprobs").at("content")) lps.push_back(tok.at("logprob").get<double>());
        g.token_count = lps.size();
        g.per_token_logprobs = std::move(lps);
      } else if (choices.size() == 1 && j.contains("usage") && j.at("usage").contains("completion_tokens")) {
        g.token_count = j.at("usage").at("completion_tokens").get<std::size_t>();
      } else {
        g.token_count = token_length(g.raw_text);
      }
      g.token_count = std::min<std::size_t>(g.token_count, static_cast<std::size_t>(decode.max_tokens));
      out[slot] = std::move(g);
    }
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("malformed chat completion response: ") + e.what());
  }
  return out;
}

std::vector<std::vector<Generation>> RemoteBackend::generate_batch(std::span<const GenerationRequest> requests,
                                                                   const DecodeParams& decode) {
  std::vector<std::vector<Generation>> out(requests.size());
  std::mutex mu;
  std::size_t failed = requests.size();
  std::string failure;
  parallel_for(requests.size(), client_.endpoint().max_concurrency, [&](std::size_t i) {
    try {
      out[i] = generate(requests[i].prompt_text, decode, requests[i].seed);
    } catch (const Error& e) {
      std::lock_guard<std::mutex> lock(mu);
      if (i < failed) {
        failed = i;
        failure = e.what();
      }
    }
  });
  if (failed < requests.size()) throw BatchItemError(failed, failure);
  return out;
}

}  // namespace thinksafe
