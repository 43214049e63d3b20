#include "thinksafe/builder.hpp"

#include "thinksafe/decode.hpp"
#include "thinksafe/error.hpp"
#include "thinksafe/rng.hpp"

namespace thinksafe {

namespace {

struct PendingPrompt {
  const PromptRecord* record;
  std::string generation_text;  // what the backend sees (steered for harmful prompts)
  std::optional<std::string> steering_template_id;
  const DecodeParams* decode;
};

void require_handles(const BuildConfig& cfg, bool need_generator) {
  if (!cfg.guard) throw ConfigError("build config has no guard");
  if (need_generator && !cfg.generator) throw ConfigError("build config has no generator");
}

TrainingExample make_candidate(const PendingPrompt& p, const Generation& g, const std::string& backend_id,
                               std::uint64_t seed, int sample_index, TagMode tag_mode) {
  TrainingExample ex;
  ex.prompt_id = p.record->id;
  ex.category = p.record->category;
  ex.prompt_text = p.record->text;
  ex.steering_template_id = p.steering_template_id;
  const ParsedResponse parsed = parse_reasoning(g.raw_text, tag_mode);
  ex.reasoning = parsed.reasoning;
  ex.answer = parsed.answer;
  ex.raw_text = g.raw_text;
  ex.tag_mode = tag_mode;
  ex.meta.backend_id = backend_id;
  ex.meta.decode = *p.decode;
  ex.meta.seed = seed;
  ex.meta.sample_index = sample_index;
  return ex;
}

// Generates every pending prompt, grouping requests that share decode
// parameters so a remote backend can run them concurrently. Result i holds
// the samples of pending[i].
std::vector<std::vector<Generation>> generate_all(GenerationBackend& backend, const std::vector<PendingPrompt>& pending,
                                                  std::uint64_t seed) {
  std::vector<std::vector<Generation>> out(pending.size());
  std::vector<bool> done(pending.size(), false);
  for (std::size_t first = 0; first < pending.size(); ++first) {
    if (done[first]) continue;
    const DecodeParams& decode = *pending[first].decode;
    std::vector<std::size_t> members;
    std::vector<GenerationRequest> requests;
    for (std::size_t i = first; i < pending.size(); ++i) {
      if (done[i] || !(*pending[i].decode == decode)) continue;
      members.push_back(i);
      requests.push_back({pending[i].generation_text, generation_seed(seed, pending[i].record->id)});
      done[i] = true;
    }
    std::vector<std::vector<Generation>> results;
    try {
      results = backend.generate_batch(requests, decode);
    } catch (const BatchItemError& e) {
      throw BackendError("generation failed for prompt '" + pending[members[e.index()]].record->id + "': " + e.what());
    } catch (const Error& e) {
      throw BackendError(std::string("generation failed: ") + e.what());
    }
    for (std::size_t m = 0; m < members.size(); ++m) {
      if (results[m].size() != static_cast<std::size_t>(decode.n_samples))
        throw BackendError("backend returned the wrong number of samples for prompt '" +
                           pending[members[m]].record->id + "'");
      out[members[m]] = std::move(results[m]);
    }
  }
  return out;
}

std::vector<GuardVerdict> classify_all(const Guard& guard, const std::vector<TrainingExample>& candidates) {
  std::vector<GuardPair> pairs;
  pairs.reserve(candidates.size());
  for (const auto& c : candidates) pairs.push_back({c.prompt_text, c.raw_text});
  try {
    return guard.classify_batch(pairs);
  } catch (const BatchItemError& e) {
    throw BackendError("guard failed for prompt '" + candidates[e.index()].prompt_id + "': " + e.what());
  }
}

BuildResult finish(FilterResult filtered) {
  BuildResult out;
  out.stats = compute_stats(filtered.kept, filtered.dropped);
  out.dataset = std::move(filtered.kept);
  out.dropped = filtered.dropped;
  return out;
}

BuildResult single_sample_build(const BuildConfig& cfg, GenerationBackend& backend,
                                const std::vector<const PromptRecord*>& prompts) {
  const SteeringTemplate& tmpl = template_by_id(cfg.steering);
  DecodeParams harmful = cfg.decode_harmful;
  DecodeParams benign = cfg.decode_benign;
  harmful.validate();
  benign.validate();
  if (harmful.n_samples != 1 || benign.n_samples != 1)
    throw ConfigError("self-generation and distillation draw exactly one sample per prompt");
  std::vector<PendingPrompt> pending;
  pending.reserve(prompts.size());
  for (const PromptRecord* p : prompts) {
    if (p->category == Category::harmful) {
      pending.push_back({p, compose(tmpl, p->text), std::string(to_string(cfg.steering)), &harmful});
    } else {
      pending.push_back({p, p->text, std::nullopt, &benign});
    }
  }
  const auto generations = generate_all(backend, pending, cfg.seed);
  std::vector<TrainingExample> candidates;
  candidates.reserve(pending.size());
  for (std::size_t i = 0; i < pending.size(); ++i)
    candidates.push_back(make_candidate(pending[i], generations[i].front(), backend.id(),
                                        generation_seed(cfg.seed, pending[i].record->id), 0, cfg.tag_mode));
  return finish(filter_safe(std::move(candidates), *cfg.guard));
}

}  // namespace

std::uint64_t generation_seed(std::uint64_t global, const std::string& prompt_id) {
  return derive_seed(global, "build/generate", prompt_id);
}

FilterResult filter_safe(std::vector<TrainingExample> candidates, const Guard& guard) {
  const auto verdicts = classify_all(guard, candidates);
  FilterResult out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    candidates[i].guard = verdicts[i];
    if (verdicts[i].safe()) {
      out.kept.push_back(std::move(candidates[i]));
    } else {
      ++out.dropped[candidates[i].category];
    }
  }
  return out;
}

BuildResult build_thinksafe(const BuildConfig& cfg, const std::vector<PromptRecord>& harmful,
                            const std::vector<PromptRecord>& benign) {
  require_handles(cfg, true);
  std::vector<const PromptRecord*> prompts;
  for (const auto& p : harmful) {
    if (p.category != Category::harmful) throw ContractError("prompt '" + p.id + "' is not harmful");
    prompts.push_back(&p);
  }
  for (const auto& p : benign) {
    if (p.category != Category::benign) throw ContractError("prompt '" + p.id + "' is not benign");
    prompts.push_back(&p);
  }
  return single_sample_build(cfg, *cfg.generator, prompts);
}

BuildResult build_teacher_distill(const BuildConfig& cfg, const std::vector<PromptRecord>& prompts,
                                  GenerationBackend& teacher) {
  require_handles(cfg, false);
  std::vector<const PromptRecord*> ptrs;
  for (const auto& p : prompts) ptrs.push_back(&p);
  return single_sample_build(cfg, teacher, ptrs);
}

BuildResult build_rejection_sampling(const BuildConfig& cfg, const std::vector<PromptRecord>& prompts) {
  require_handles(cfg, true);
  DecodeParams harmful = cfg.decode_harmful;
  DecodeParams benign = cfg.decode_benign;
  harmful.validate();
  benign.validate();
  if (harmful.n_samples != kRejectionSamples || benign.n_samples != kRejectionSamples)
    throw ConfigError("rejection sampling draws exactly " + std::to_string(kRejectionSamples) + " samples per prompt");

  std::vector<PendingPrompt> pending;
  for (const auto& p : prompts) {
    const std::optional<std::string> steering =
        p.category == Category::harmful ? std::optional<std::string>("none") : std::nullopt;
    pending.push_back({&p, p.text, steering, p.category == Category::harmful ? &harmful : &benign});
  }
  const auto generations = generate_all(*cfg.generator, pending, cfg.seed);

  std::vector<TrainingExample> candidates;
  for (std::size_t i = 0; i < pending.size(); ++i)
    for (std::size_t s = 0; s < generations[i].size(); ++s)
      candidates.push_back(make_candidate(pending[i], generations[i][s], cfg.generator->id(),
                                          generation_seed(cfg.seed, pending[i].record->id), static_cast<int>(s),
                                          cfg.tag_mode));
  const auto verdicts = classify_all(*cfg.guard, candidates);

  FilterResult filtered;
  for (std::size_t i = 0; i < pending.size(); ++i) {
    const std::size_t base = i * kRejectionSamples;
    bool all_safe = true;
    for (std::size_t s = 0; s < kRejectionSamples; ++s) {
      candidates[base + s].guard = verdicts[base + s];
      all_safe = all_safe && verdicts[base + s].safe();
    }
    if (!all_safe) {
      ++filtered.dropped[pending[i].record->category];
      continue;
    }
    Rng rng(derive_seed(cfg.seed, "build/select", pending[i].record->id));
    filtered.kept.push_back(std::move(candidates[base + rng.below(kRejectionSamples)]));
  }
  return finish(std::move(filtered));
}

}  // namespace thinksafe
