// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Countermeasures against looping prompts: a consecutive-repeat guard, a
// low-entropy monitor, and a perplexity gate applied before inference.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "looptrap/eval.hpp"
#include "looptrap/gateway.hpp"

namespace looptrap {

enum class HaltReason { kNone, kRepeatThreshold, kLowEntropy, kPplReject };

std::string to_string(HaltReason reason);

struct GuardVerdict {
  bool halted = false;
  std::optional<std::size_t> halt_position;
  HaltReason reason = HaltReason::kNone;

  static GuardVerdict pass() { return {}; }
  static GuardVerdict halt(std::size_t position, HaltReason why) { return {true, position, why}; }
};

// Halts at the first index where the current token has been repeated more
// than `r` times in a row, i.e. its run reaches r + 2 identical tokens.
GuardVerdict repeat_guard(std::span<const TokenId> stream, std::size_t r);

// Halts at the first index i >= w - 1 where the mean of the trailing `w`
// entropies is below `tau`.
GuardVerdict entropy_guard(std::span<const double> step_entropies, std::size_t w, double tau);

// Rejects (halt position 0) iff prompt perplexity exceeds `threshold`.
GuardVerdict ppl_gate(const TokenSequence& prompt, double threshold, const LanguageModel& model);

struct DefenseConfig {
  std::optional<std::size_t> repeat_r;
  std::optional<std::size_t> entropy_window;
  double entropy_tau = 0.05;
  std::optional<double> ppl_threshold;

  static constexpr std::size_t kDefaultRepeat = 10;
  static constexpr std::size_t kDefaultWindow = 32;
  static constexpr double kDefaultTau = 0.05;

  bool any_streaming() const { return repeat_r.has_value() || entropy_window.has_value(); }
  void validate() const;
};

// Per-request streaming state for the repeat and entropy guards.
class StreamingGuard {
 public:
  explicit StreamingGuard(const DefenseConfig& config);

  // Feeds one emitted token; returns false once a guard has fired.
  bool observe(std::size_t index, TokenId token, double entropy);
  const GuardVerdict& verdict() const { return verdict_; }

 private:
  DefenseConfig config_;
  GuardVerdict verdict_;
  TokenId last_ = -1;
  std::size_t run_ = 0;
  std::vector<double> window_;
  double window_sum_ = 0.0;
  std::size_t seen_ = 0;
};

struct GuardedTrials {
  std::vector<TrialOutcome> outcomes;
  std::vector<GuardVerdict> verdicts;
  std::optional<GuardVerdict> gate;
};

// Runs the PPL gate, then the trials with the streaming guards attached.
// A rejected prompt yields zero-length outcomes.
GuardedTrials run_guarded_trials(const LanguageModel& model, const TokenSequence& prompt,
                                 const DecodingPolicy& policy, std::size_t trials, std::size_t max_len,
                                 const DefenseConfig& defense, bool eos_enabled = true);

}  // namespace looptrap
