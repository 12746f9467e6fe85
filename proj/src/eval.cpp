// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "looptrap/errors.hpp"

namespace looptrap {

std::string special_input(std::string_view raw_prompt) {
  std::string out(raw_prompt);
  if (!out.empty() && out.back() != ' ') out += ' ';
  out += kSpecialInputPhrase;
  return out;
}

std::vector<TrialOutcome> run_trials(const LanguageModel& model, const TokenSequence& prompt,
                                     const DecodingPolicy& policy, std::size_t trials,
                                     std::size_t max_len, const TrialOptions& options) {
  if (trials == 0) throw InvalidArgumentError("trials must be >= 1");
  std::vector<TrialOutcome> out;
  out.reserve(trials);
  for (std::size_t k = 0; k < trials; ++k) {
    const StepObserver observer = options.observer_factory ? options.observer_factory() : StepObserver{};
    out.push_back(model.generate(prompt, policy.with_seed(policy.seed + k), max_len,
                                 options.eos_enabled, observer));
  }
  return out;
}

bool exceeds_success_fraction(std::size_t reached, std::size_t trials, double p) {
  if (trials == 0) return false;
  // Integer comparison avoids rounding at the boundary: reached/trials > p.
  return static_cast<double>(reached) > p * static_cast<double>(trials);
}

EvalReport summarize(const std::vector<std::vector<TrialOutcome>>& per_input, double p,
                     std::size_t max_len) {
  if (per_input.empty()) throw InvalidArgumentError("summarize needs at least one input");
  EvalReport report;
  double total_len = 0.0;
  std::size_t total_trials = 0;
  double entropy_sum = 0.0;
  std::size_t entropy_count = 0;
  std::size_t successes = 0;
  for (const auto& trials : per_input) {
    if (trials.empty()) throw InvalidArgumentError("input without trials");
    InputSummary s;
    s.trials = trials.size();
    std::size_t reached = 0;
    double len_sum = 0.0;
    double ent_sum = 0.0;
    std::size_t ent_n = 0;
    for (const auto& t : trials) {
      len_sum += static_cast<double>(t.length);
      reached += t.length == max_len ? 1 : 0;
      if (!t.step_entropies.empty()) {
        ent_sum += mean_output_entropy(t);
        ++ent_n;
      }
    }
    s.avg_len = len_sum / static_cast<double>(trials.size());
    s.reached_fraction = static_cast<double>(reached) / static_cast<double>(trials.size());
    s.success = exceeds_success_fraction(reached, trials.size(), p);
    s.mean_entropy = ent_n ? ent_sum / static_cast<double>(ent_n) : 0.0;
    total_len += len_sum;
    total_trials += trials.size();
    entropy_sum += ent_sum;
    entropy_count += ent_n;
    successes += s.success ? 1 : 0;
    report.per_input.push_back(s);
  }
  report.avg_len = total_len / static_cast<double>(total_trials);
  report.asr = static_cast<double>(successes) / static_cast<double>(per_input.size());
  report.mean_entropy = entropy_count ? entropy_sum / static_cast<double>(entropy_count) : 0.0;
  return report;
}

double step_entropy(const StepDistribution& dist) { return entropy_nats(dist.probs); }

double mean_output_entropy(const TrialOutcome& outcome) {
  if (outcome.step_entropies.empty()) throw InvalidArgumentError("mean entropy of an empty output");
  return std::accumulate(outcome.step_entropies.begin(), outcome.step_entropies.end(), 0.0) /
         static_cast<double>(outcome.step_entropies.size());
}

double prompt_perplexity(const TokenSequence& prompt, const LanguageModel& model) {
  if (prompt.size() < 2) throw InvalidArgumentError("perplexity needs at least two prompt tokens");
  const TokenSequence head(prompt.begin(), prompt.begin() + 1);
  const TokenSequence rest(prompt.begin() + 1, prompt.end());
  const auto dists = model.next_distributions(head, rest);
  double nll = 0.0;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const double p = dists[i].probs[static_cast<std::size_t>(rest[i])];
    nll -= std::log(std::max(p, 1e-300));
  }
  return std::max(1.0, std::exp(nll / static_cast<double>(rest.size())));
}

std::vector<EvalReport> decode_policy_sweep(const LanguageModel& model,
                                            std::span<const TokenSequence> prompts,
                                            std::span<const DecodingPolicy> policies,
                                            const SweepOptions& options) {
  if (policies.empty()) throw InvalidArgumentError("policy sweep needs at least one policy");
  std::vector<EvalReport> reports;
  TrialOptions trial_options;
  trial_options.eos_enabled = options.eos_enabled;
  for (const DecodingPolicy& policy : policies) {
    std::vector<std::vector<TrialOutcome>> per_input;
    for (const TokenSequence& prompt : prompts) {
      per_input.push_back(run_trials(model, prompt, policy.with_seed(options.base_seed), options.trials,
                                     options.max_len, trial_options));
    }
    reports.push_back(summarize(per_input, options.success_fraction, options.max_len));
  }
  return reports;
}

}  // namespace looptrap
