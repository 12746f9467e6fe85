// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared test models and independent oracles.

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "looptrap/gateway.hpp"
#include "looptrap/loop_optimizer.hpp"
#include "looptrap/toy_transformer.hpp"

namespace looptrap::testing {

// 50 single-character pieces, no special tokens.
inline constexpr const char* kFiftyAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789*%&@#.,!?-+=/:";

inline std::shared_ptr<ToyTransformer> fifty_token_model(std::uint64_t seed) {
  std::vector<std::string> pieces;
  for (const char* c = kFiftyAlphabet; *c; ++c) pieces.emplace_back(1, *c);
  auto tok = std::make_shared<const PieceTokenizer>(pieces, std::set<TokenId>{});
  ToyTransformerConfig cfg;
  cfg.vocab_size = pieces.size();
  cfg.seed = seed;
  return std::make_shared<ToyTransformer>(cfg, ToyWeights::random(cfg), "toy50", tok,
                                          ChatTemplate{"sys.", "u:", "/", "a:"});
}

// -(1/N) sum_i log max(sum over distinct segment tokens of P_i, 1e-12),
// summed position by position from next_distributions.
inline double cycle_loss_oracle(const OptimizationContext& ctx, const LanguageModel& model) {
  const auto dists = model.next_distributions(ctx.rendered_prompt, ctx.teacher_target);
  const std::set<TokenId> distinct(ctx.segment.tokens.begin(), ctx.segment.tokens.end());
  double total = 0.0;
  for (const auto& d : dists) {
    double mass = 0.0;
    for (TokenId t : distinct) mass += d.probs[static_cast<std::size_t>(t)];
    total += -std::log(std::max(mass, 1e-12));
  }
  return total / static_cast<double>(dists.size());
}

// Forwards everything to `inner`; gradients are scaled by `gradient_scale`.
class ScaledGradientModel final : public LanguageModel {
 public:
  ScaledGradientModel(ModelHandle inner, double gradient_scale) : inner_(std::move(inner)), scale_(gradient_scale) {}

  std::string id() const override { return inner_->id() + "*scaled"; }
  const Tokenizer& tokenizer() const override { return inner_->tokenizer(); }
  const ChatTemplate& chat_template() const override { return inner_->chat_template(); }
  Capabilities capabilities() const override { return inner_->capabilities(); }
  std::size_t context_length() const override { return inner_->context_length(); }
  std::optional<TokenId> eos_id() const override { return inner_->eos_id(); }
  std::vector<StepDistribution> next_distributions(const TokenSequence& p, const TokenSequence& c) const override {
    return inner_->next_distributions(p, c);
  }
  GradientTable one_hot_gradient(const TokenSequence& p, IndexRange span, const TokenSequence& c,
                                 const DistributionLoss& loss) const override {
    GradientTable g = inner_->one_hot_gradient(p, span, c, loss);
    g.values *= scale_;
    return g;
  }
  TrialOutcome generate(const TokenSequence& p, const DecodingPolicy& policy, std::size_t max_new, bool eos,
                        const StepObserver& observer = {}) const override {
    return inner_->generate(p, policy, max_new, eos, observer);
  }
  AttentionTensor attention_matrix(const TokenSequence& p, const TokenSequence& c) const override {
    return inner_->attention_matrix(p, c);
  }

 private:
  ModelHandle inner_;
  double scale_;
};

// Generation-only stub: a trial reaches `max_new` iff its seed is below
// `reach_below`, otherwise it emits EOS after `short_length` tokens.
class ScriptedModel final : public LanguageModel {
 public:
  explicit ScriptedModel(std::uint64_t reach_below, std::size_t short_length = 3)
      : reach_below_(reach_below), short_length_(short_length) {}

  std::string id() const override { return "scripted"; }
  const Tokenizer& tokenizer() const override { return *tok_; }
  const ChatTemplate& chat_template() const override { return tmpl_; }
  Capabilities capabilities() const override { return {}; }
  std::size_t context_length() const override { return 4096; }
  std::optional<TokenId> eos_id() const override { return ToyVocabulary::kEos; }
  TrialOutcome generate(const TokenSequence&, const DecodingPolicy& policy, std::size_t max_new, bool eos_enabled,
                        const StepObserver& observer = {}) const override {
    TrialOutcome o;
    o.policy = policy;
    o.seed = policy.seed;
    const std::size_t n = (policy.seed < reach_below_ || !eos_enabled) ? max_new : std::min(short_length_, max_new);
    for (std::size_t i = 0; i < n; ++i) {
      o.output.push_back(10);
      o.step_entropies.push_back(0.0);
      if (observer && !observer(i, 10, 0.0)) {
        o.halted = true;
        break;
      }
    }
    o.length = o.output.size();
    o.reached_max = o.length == max_new;
    return o;
  }

 private:
  std::uint64_t reach_below_;
  std::size_t short_length_;
  std::shared_ptr<const PieceTokenizer> tok_ = make_toy_tokenizer(64);
  ChatTemplate tmpl_ = toy_chat_template();
};

}  // namespace looptrap::testing
