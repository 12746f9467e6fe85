// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Uniform surface over autoregressive language models. Every backend (the
// built-in toy transformer, the HTTP adapter) implements LanguageModel; the
// optimizer, evaluation and analysis code only ever talks to this interface.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "looptrap/tokenizer.hpp"

namespace looptrap {

struct ChatTemplate {
  std::string system_text;
  std::string user_prefix;
  std::string user_suffix;
  std::string assistant_prefix;
};

struct RenderedPrompt {
  TokenSequence tokens;
  // Index of the first generated token; equals tokens.size().
  std::size_t output_region_start = 0;
};

// Each template piece is encoded separately, so template boundaries are
// always token boundaries.
RenderedPrompt render_chat(const ChatTemplate& tmpl, std::string_view user_text,
                           const Tokenizer& tokenizer);

// Same as render_chat, with text already placed in the assistant region
// (a prefilled previous response). output_region_start still points at the
// first token after the assistant prefix.
RenderedPrompt render_chat_with_prefill(const ChatTemplate& tmpl, std::string_view user_text,
                                        std::string_view assistant_prefill,
                                        const Tokenizer& tokenizer);

struct StepDistribution {
  std::vector<double> probs;
  std::size_t position = 1;  // 1-based output index
};

struct DecodingPolicy {
  enum class Kind { kGreedy, kBeam, kTemperature };

  Kind kind = Kind::kGreedy;
  std::size_t beam_width = 2;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static DecodingPolicy greedy() { return {}; }
  static DecodingPolicy beam(std::size_t width) { return {Kind::kBeam, width, 1.0, 0}; }
  static DecodingPolicy sampled(double temperature, std::uint64_t seed) {
    return {Kind::kTemperature, 2, temperature, seed};
  }

  bool stochastic() const { return kind == Kind::kTemperature; }
  DecodingPolicy with_seed(std::uint64_t s) const {
    DecodingPolicy p = *this;
    p.seed = s;
    return p;
  }
  void validate() const;
  std::string label() const;

  friend bool operator==(const DecodingPolicy&, const DecodingPolicy&) = default;
};

struct GradientTable {
  // rows = suffix positions, cols = vocabulary; d(loss)/d(one-hot coordinate)
  Eigen::MatrixXd values;
  double loss_at_point = 0.0;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }
};

struct TrialOutcome {
  TokenSequence output;
  std::size_t length = 0;
  bool reached_max = false;
  std::vector<double> step_entropies;  // nats, one per emitted token
  DecodingPolicy policy;
  std::uint64_t seed = 0;
  // Generation was cut short by a StepObserver (streaming guard).
  bool halted = false;
};

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

// layers x stored query rows x key positions, row-major. Stored rows cover
// absolute query positions [query_offset, query_offset + queries); at()
// takes absolute positions.
struct AttentionTensor {
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::size_t query_offset = 0;
  std::vector<double> weights;

  double at(std::size_t l, std::size_t h, std::size_t q, std::size_t k) const {
    return weights[((l * heads + h) * queries + (q - query_offset)) * keys + k];
  }
  double& at(std::size_t l, std::size_t h, std::size_t q, std::size_t k) {
    return weights[((l * heads + h) * queries + (q - query_offset)) * keys + k];
  }
};

// Scalar loss over a list of next-token distributions. The gradient output,
// when requested, receives d(loss)/d(probs) with the same shape as `probs`.
class DistributionLoss {
 public:
  virtual ~DistributionLoss() = default;
  virtual double evaluate(std::span<const StepDistribution> probs,
                          std::vector<std::vector<double>>* grad) const = 0;
  // JSON description for adapters that evaluate the loss remotely; empty when
  // the loss has no wire form.
  virtual std::string wire_descriptor() const { return {}; }
};

struct Capabilities {
  bool differentiable = false;
  bool attention = false;
  bool logits = false;
};

// Invoked after every emitted token with (index, token, entropy); returning
// false stops generation.
using StepObserver = std::function<bool(std::size_t, TokenId, double)>;

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::string id() const = 0;
  virtual const Tokenizer& tokenizer() const = 0;
  virtual const ChatTemplate& chat_template() const = 0;
  virtual Capabilities capabilities() const = 0;
  virtual std::size_t context_length() const = 0;
  virtual std::optional<TokenId> eos_id() const = 0;

  const VocabSpec& vocab() const { return tokenizer().vocab(); }
  TokenSequence encode(std::string_view text) const { return tokenizer().encode(text); }
  std::string decode(std::span<const TokenId> tokens) const { return tokenizer().decode(tokens); }
  RenderedPrompt render_chat(std::string_view user_text) const {
    return looptrap::render_chat(chat_template(), user_text, tokenizer());
  }

  // One distribution per continuation position, teacher-forced on the
  // preceding continuation tokens.
  virtual std::vector<StepDistribution> next_distributions(const TokenSequence& prompt,
                                                           const TokenSequence& continuation) const;

  // Gradient of `loss` (evaluated on next_distributions(prompt, continuation))
  // with respect to the relaxed one-hot indicator at each suffix position.
  virtual GradientTable one_hot_gradient(const TokenSequence& prompt, IndexRange suffix_span,
                                         const TokenSequence& continuation,
                                         const DistributionLoss& loss) const;

  virtual TrialOutcome generate(const TokenSequence& prompt, const DecodingPolicy& policy,
                                std::size_t max_new, bool eos_enabled,
                                const StepObserver& observer = {}) const = 0;

  virtual AttentionTensor attention_matrix(const TokenSequence& prompt,
                                           const TokenSequence& continuation) const;
};

using ModelHandle = std::shared_ptr<const LanguageModel>;

// Incremental decoding state (KV cache or equivalent) for backends that
// expose logits.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  // Appends tokens and returns the logits predicting the next token.
  virtual std::vector<double> feed(std::span<const TokenId> tokens) = 0;
  virtual std::unique_ptr<DecodeSession> clone() const = 0;
  virtual std::size_t length() const = 0;
};

// Greedy, beam, and temperature decoding on top of a DecodeSession.
TrialOutcome decode_with_policy(DecodeSession& session, const TokenSequence& prompt,
                                const DecodingPolicy& policy, std::size_t max_new,
                                std::optional<TokenId> eos, bool eos_enabled,
                                const StepObserver& observer);

std::vector<double> softmax(std::span<const double> logits);
// Shannon entropy in nats; zero-probability entries contribute nothing.
double entropy_nats(std::span<const double> probs);

}  // namespace looptrap
