#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"

#include "thinksafe/corpus.hpp"
#include "thinksafe/toymodel.hpp"
#include "thinksafe/types.hpp"

namespace thinksafe::testing {

// About 1.3k parameters: small enough for a full finite-difference sweep.
inline ModelConfig tiny_transformer(int context_len = 16) {
  ModelConfig c;
  c.arch = Architecture::tiny_transformer;
  c.context_len = context_len;
  c.width = 4;
  c.n_layers = 1;
  c.n_heads = 1;
  c.ff_width = 8;
  c.init_std = 0.5;
  return c;
}

inline ModelConfig tiny_ngram() {
  ModelConfig c;
  c.arch = Architecture::ngram_logit_table;
  c.context_len = 16;
  c.ngram_n = 2;
  c.ngram_buckets = 7;
  c.init_std = 0.5;
  return c;
}

struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  std::size_t n_params = 0;
};

// Central differences over every trainable parameter. The relative error of
// one coordinate is |g - fd| / max(|g|, |fd|, floor).
inline GradCheck check_gradient(ToyLM& model, const std::vector<double>& analytic,
                                const std::function<double(const ToyLM&)>& loss, double h = 1e-5,
                                double floor = 1e-6) {
  auto params = model.trainable_params();
  GradCheck out;
  out.n_params = params.size();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss(model);
    params[i] = saved - h;
    const double down = loss(model);
    params[i] = saved;
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - fd) / std::max({std::abs(analytic[i]), std::abs(fd), floor});
    if (err > out.max_rel_err) {
      out.max_rel_err = err;
      out.worst_index = i;
    }
  }
  return out;
}

inline TrainingExample make_example(const std::string& id, Category category, const std::string& prompt,
                                    const std::string& reasoning, const std::string& answer, bool safe = true) {
  TrainingExample ex;
  ex.prompt_id = id;
  ex.category = category;
  ex.prompt_text = prompt;
  if (category == Category::harmful) ex.steering_template_id = "thinksafe";
  ex.reasoning = reasoning;
  ex.answer = answer;
  ex.raw_text = "<think>" + reasoning + "</think>" + answer;
  ex.tag_mode = TagMode::paired;
  ex.guard.p_safe = safe ? 0.99 : 0.01;
  ex.guard.label = safe ? SafetyLabel::safe : SafetyLabel::unsafe;
  ex.guard.guard_id = "test";
  ex.meta.backend_id = "test";
  ex.meta.decode.max_tokens = 8;
  return ex;
}

// Chat-completions stand-in on 127.0.0.1. The handler sees each request body
// and returns (status, body); requests are recorded in arrival order.
class MockEndpoint {
 public:
  using Handler = std::function<std::pair<int, std::string>(const httplib::Request&)>;

  explicit MockEndpoint(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard<std::mutex> lock(mu_);
        bodies_.push_back(req.body);
        auth_.push_back(req.get_header_value("Authorization"));
      }
      const auto [status, body] = handler_(req);
      res.status = status;
      res.set_content(body, "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockEndpoint() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::vector<std::string> bodies() const {
    std::lock_guard<std::mutex> lock(mu_);
    return bodies_;
  }
  std::vector<std::string> auth_headers() const {
    std::lock_guard<std::mutex> lock(mu_);
    return auth_;
  }

 private:
  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  mutable std::mutex mu_;
  std::vector<std::string> bodies_;
  std::vector<std::string> auth_;
};

}  // namespace thinksafe::testing
