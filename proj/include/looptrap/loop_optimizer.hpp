// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Repetition-inducing suffix optimization: cycle loss over teacher-forced
// output positions, one-hot gradient candidate search, incumbent-inclusive
// selection, success probing, and the token-aligned ensemble variant.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "looptrap/eval.hpp"
#include "looptrap/gateway.hpp"
#include "looptrap/suffix.hpp"

namespace looptrap {

struct AttackConfig {
  CyclicSegment segment;
  std::size_t suffix_length = 30;  // L
  std::size_t top_k = 64;          // K
  std::size_t batch = 128;         // B
  std::size_t max_steps = 20;
  std::size_t teacher_horizon = 64;  // N_opt
  std::size_t trials = 16;
  double success_fraction = 0.125;  // p
  std::size_t probe_max_len = 128;
  DecodingPolicy decoding = DecodingPolicy::sampled(0.6, 0);
  double entropy_stop_threshold = 0.1;
  std::size_t entropy_stop_patience = 2;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct OptimizationContext {
  TokenSequence rendered_prompt;
  IndexRange suffix_span;
  TokenSequence teacher_target;
  CyclicSegment segment;
};

enum class AttackStatus { kRunning, kSuccess, kStepBudgetExhausted, kEntropyConverged };

std::string to_string(AttackStatus status);

struct ProbeResult {
  bool success = false;
  std::size_t reached = 0;
  std::size_t trials = 0;
  double mean_length = 0.0;
};

struct AdversarialState {
  std::string raw_input;
  AdversarialSuffix suffix;
  std::size_t step = 0;
  std::vector<double> loss_history;
  AttackStatus status = AttackStatus::kRunning;
  // Suffix tokens after initialisation and after every step.
  std::vector<TokenSequence> trajectory;
  ProbeResult last_probe;
};

// segment repeated periodically to `length` tokens.
TokenSequence teacher_target(const CyclicSegment& segment, std::size_t length);

OptimizationContext build_context(std::string_view raw_input, const AdversarialSuffix& suffix,
                                  const AttackConfig& cfg, const LanguageModel& model);

// -(1/N) sum_i log sum_{t in distinct(segment)} P_i[t], with the inner mass
// floored at kFloor.
class CycleLoss final : public DistributionLoss {
 public:
  static constexpr double kFloor = 1e-12;

  explicit CycleLoss(const CyclicSegment& segment);
  double evaluate(std::span<const StepDistribution> probs,
                  std::vector<std::vector<double>>* grad) const override;
  std::string wire_descriptor() const override;
  const std::vector<TokenId>& tokens() const { return tokens_; }

 private:
  std::vector<TokenId> tokens_;
};

double cycle_loss(const OptimizationContext& ctx, const LanguageModel& model);

// Top-K most negative gradient entries per position among `pool_mask`
// tokens, then B sampled uniformly without replacement (order preserved).
std::vector<Substitution> propose_candidates(const GradientTable& grad, const AttackConfig& cfg,
                                             const std::vector<bool>& pool_mask, std::mt19937_64& rng);

struct CandidateEvaluator {
  // Candidates failing this check are discarded before evaluation.
  std::function<bool(const AdversarialSuffix&)> admissible;
  std::function<double(const AdversarialSuffix&)> loss;
};

// Adopts the argmin over {incumbent} and all admissible candidates by
// (loss, index); the incumbent wins exact ties.
AdversarialState select_candidate(const AdversarialState& state, std::span<const Substitution> candidates,
                                  const CandidateEvaluator& evaluator, const VocabSpec& vocab);

ProbeResult success_probe(const AdversarialState& state, const AttackConfig& cfg,
                          const LanguageModel& model);

AdversarialState optimize(std::string_view raw_input, const AttackConfig& cfg, const LanguageModel& model);

struct EnsembleHandle {
  std::vector<ModelHandle> members;
  VocabSpec shared_vocab;
};

EnsembleHandle check_token_alignment(std::vector<ModelHandle> members);

// Elementwise sum of the member gradient tables; contexts[j] belongs to
// ensemble.members[j].
GradientTable ensemble_gradient(std::span<const OptimizationContext> contexts,
                                const EnsembleHandle& ensemble);

// Argmin of the summed member losses; same tie rule as select_candidate.
AdversarialState ensemble_select(const AdversarialState& state, std::span<const Substitution> candidates,
                                 std::span<const CandidateEvaluator> members, const VocabSpec& vocab);

AdversarialState optimize_ensemble(std::string_view raw_input, const AttackConfig& cfg,
                                   const EnsembleHandle& ensemble);

}  // namespace looptrap
