// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/defense.hpp"

#include "looptrap/errors.hpp"

namespace looptrap {

std::string to_string(HaltReason reason) {
  switch (reason) {
    case HaltReason::kNone:
      return "none";
    case HaltReason::kRepeatThreshold:
      return "repeat_threshold";
    case HaltReason::kLowEntropy:
      return "low_entropy";
    case HaltReason::kPplReject:
      return "ppl_reject";
  }
  return "unknown";
}

GuardVerdict repeat_guard(std::span<const TokenId> stream, std::size_t r) {
  if (r < 2) throw InvalidArgumentError("repeat threshold must be >= 2");
  std::size_t run = 0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    run = (i > 0 && stream[i] == stream[i - 1]) ? run + 1 : 1;
    if (run - 1 > r) return GuardVerdict::halt(i, HaltReason::kRepeatThreshold);
  }
  return GuardVerdict::pass();
}

GuardVerdict entropy_guard(std::span<const double> step_entropies, std::size_t w, double tau) {
  if (w == 0) throw InvalidArgumentError("entropy window must be >= 1");
  double sum = 0.0;
  for (std::size_t i = 0; i < step_entropies.size(); ++i) {
    sum += step_entropies[i];
    if (i >= w) sum -= step_entropies[i - w];
    if (i + 1 >= w && sum / static_cast<double>(w) < tau) {
      return GuardVerdict::halt(i, HaltReason::kLowEntropy);
    }
  }
  return GuardVerdict::pass();
}

GuardVerdict ppl_gate(const TokenSequence& prompt, double threshold, const LanguageModel& model) {
  if (!(threshold > 1.0)) throw InvalidArgumentError("perplexity threshold must be > 1");
  if (prompt_perplexity(prompt, model) > threshold) return GuardVerdict::halt(0, HaltReason::kPplReject);
  return GuardVerdict::pass();
}

void DefenseConfig::validate() const {
  if (repeat_r && *repeat_r < 2) throw ConfigError("defense.repeat.r", "must be >= 2");
  if (entropy_window && *entropy_window == 0) throw ConfigError("defense.entropy.w", "must be >= 1");
  if (entropy_window && !(entropy_tau > 0.0)) throw ConfigError("defense.entropy.tau", "must be > 0");
  if (ppl_threshold && !(*ppl_threshold > 1.0)) throw ConfigError("defense.ppl.threshold", "must be > 1");
}

StreamingGuard::StreamingGuard(const DefenseConfig& config) : config_(config) {
  if (config_.entropy_window) window_.assign(*config_.entropy_window, 0.0);
}

bool StreamingGuard::observe(std::size_t index, TokenId token, double entropy) {
  if (verdict_.halted) return false;
  if (config_.repeat_r) {
    run_ = (seen_ > 0 && token == last_) ? run_ + 1 : 1;
    last_ = token;
    if (run_ - 1 > *config_.repeat_r) {
      verdict_ = GuardVerdict::halt(index, HaltReason::kRepeatThreshold);
      ++seen_;
      return false;
    }
  }
  if (config_.entropy_window) {
    const std::size_t w = *config_.entropy_window;
    double& slot = window_[seen_ % w];
    window_sum_ += entropy - (seen_ >= w ? slot : 0.0);
    slot = entropy;
    if (seen_ + 1 >= w && window_sum_ / static_cast<double>(w) < config_.entropy_tau) {
      verdict_ = GuardVerdict::halt(index, HaltReason::kLowEntropy);
      ++seen_;
      return false;
    }
  }
  ++seen_;
  return true;
}

GuardedTrials run_guarded_trials(const LanguageModel& model, const TokenSequence& prompt,
                                 const DecodingPolicy& policy, std::size_t trials, std::size_t max_len,
                                 const DefenseConfig& defense, bool eos_enabled) {
  defense.validate();
  GuardedTrials out;
  if (defense.ppl_threshold) {
    out.gate = ppl_gate(prompt, *defense.ppl_threshold, model);
    if (out.gate->halted) {
      for (std::size_t k = 0; k < trials; ++k) {
        TrialOutcome rejected;
        rejected.policy = policy.with_seed(policy.seed + k);
        rejected.seed = policy.seed + k;
        rejected.halted = true;
        out.outcomes.push_back(std::move(rejected));
        out.verdicts.push_back(*out.gate);
      }
      return out;
    }
  }
  for (std::size_t k = 0; k < trials; ++k) {
    StreamingGuard guard(defense);
    StepObserver observer;
    if (defense.any_streaming()) {
      observer = [&guard](std::size_t i, TokenId t, double h) { return guard.observe(i, t, h); };
    }
    out.outcomes.push_back(model.generate(prompt, policy.with_seed(policy.seed + k), max_len, eos_enabled, observer));
    out.verdicts.push_back(guard.verdict());
  }
  return out;
}

}  // namespace looptrap
