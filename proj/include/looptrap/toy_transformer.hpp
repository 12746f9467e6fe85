// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small decoder-only transformer in double precision with a hand-written
// backward pass. Used as the reference backend for every algorithm in the
// toolkit: it is small enough for exhaustive and finite-difference oracles.

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "looptrap/gateway.hpp"
#include "looptrap/tokenizer.hpp"

namespace looptrap {

struct ToyTransformerConfig {
  std::size_t vocab_size = 64;
  std::size_t width = 32;
  std::size_t heads = 2;
  std::size_t blocks = 2;
  std::size_t context = 256;
  // Hidden units of each MLP; 0 removes the MLP sublayer.
  std::size_t mlp_hidden = 128;
  bool layer_norm = true;
  std::uint64_t seed = 0;
};

struct ToyBlockWeights {
  Eigen::VectorXd ln1_gain, ln1_bias;
  Eigen::MatrixXd wq, wk, wv, wo;  // width x width, heads side by side
  Eigen::VectorXd ln2_gain, ln2_bias;
  Eigen::MatrixXd w_in;  // width x mlp_hidden
  Eigen::VectorXd b_in;
  Eigen::MatrixXd w_out;  // mlp_hidden x width
  Eigen::VectorXd b_out;
};

struct ToyWeights {
  Eigen::MatrixXd token_embedding;     // vocab x width
  Eigen::MatrixXd position_embedding;  // context x width
  std::vector<ToyBlockWeights> blocks;
  Eigen::VectorXd final_gain, final_bias;
  Eigen::MatrixXd unembed;  // width x vocab
  Eigen::VectorXd unembed_bias;

  // Seeded Gaussian initialisation with sinusoidal positions.
  static ToyWeights random(const ToyTransformerConfig& cfg);
  static ToyWeights zeros(const ToyTransformerConfig& cfg);
};

ChatTemplate toy_chat_template();

class ToyTransformer final : public LanguageModel {
 public:
  explicit ToyTransformer(ToyTransformerConfig cfg, std::string id = "toy");
  ToyTransformer(ToyTransformerConfig cfg, ToyWeights weights, std::string id);
  ToyTransformer(ToyTransformerConfig cfg, ToyWeights weights, std::string id,
                 std::shared_ptr<const Tokenizer> tokenizer, ChatTemplate tmpl);

  std::string id() const override { return id_; }
  const Tokenizer& tokenizer() const override { return *tokenizer_; }
  const ChatTemplate& chat_template() const override { return template_; }
  Capabilities capabilities() const override { return {true, true, true}; }
  std::size_t context_length() const override { return cfg_.context; }
  std::optional<TokenId> eos_id() const override;

  std::vector<StepDistribution> next_distributions(const TokenSequence& prompt,
                                                   const TokenSequence& continuation) const override;
  GradientTable one_hot_gradient(const TokenSequence& prompt, IndexRange suffix_span,
                                 const TokenSequence& continuation,
                                 const DistributionLoss& loss) const override;
  TrialOutcome generate(const TokenSequence& prompt, const DecodingPolicy& policy,
                        std::size_t max_new, bool eos_enabled,
                        const StepObserver& observer = {}) const override;
  AttentionTensor attention_matrix(const TokenSequence& prompt,
                                   const TokenSequence& continuation) const override;

  // Logits (sequence length x vocab) for a hard token sequence.
  Eigen::MatrixXd logits(const TokenSequence& tokens) const;

  // Loss for a relaxed input: row p of `soft_inputs` holds the one-hot
  // weights mixed into the token embedding at position p. Exposed for
  // gradient definition and verification only.
  double soft_input_loss(const Eigen::MatrixXd& soft_inputs, std::size_t prompt_length,
                         std::size_t continuation_length, const DistributionLoss& loss) const;

  std::unique_ptr<DecodeSession> start_session() const;

  const ToyTransformerConfig& config() const { return cfg_; }
  const ToyWeights& weights() const { return weights_; }

 private:
  struct Forward;
  Forward run_forward(const Eigen::MatrixXd& inputs, bool keep_cache) const;
  Eigen::MatrixXd embed(const TokenSequence& tokens) const;
  void check_tokens(const TokenSequence& tokens) const;
  Eigen::MatrixXd backward_to_inputs(const Forward& fwd, const Eigen::MatrixXd& dlogits) const;

  ToyTransformerConfig cfg_;
  ToyWeights weights_;
  std::string id_;
  std::shared_ptr<const Tokenizer> tokenizer_;
  ChatTemplate template_;

  friend class ToySession;
};

std::shared_ptr<const PieceTokenizer> make_toy_tokenizer(std::size_t vocab_size);

// Default toy model: 2 blocks, width 32, 2 heads, |V| = 64, context 256.
std::shared_ptr<ToyTransformer> make_toy_model(std::uint64_t seed = 0, std::string id = "toy");

// All attention logits are zero, so every query attends uniformly to its
// causal prefix.
std::shared_ptr<ToyTransformer> make_uniform_attention_model(ToyTransformerConfig cfg,
                                                             std::string id = "toy-uniform");

// Output logits are the constant vector `logits` at every position.
std::shared_ptr<ToyTransformer> make_constant_logits_model(const std::vector<double>& logits,
                                                           std::size_t context = 256,
                                                           std::string id = "toy-constant");

struct LoopProneOptions {
  std::size_t vocab_size = 64;
  std::size_t context = 512;
  // Score for a key whose previous token matches the query token.
  double match_score = 4.0;
  // Extra score for keys inside the assistant (output) region.
  double region_score = 2.0;
  // Logit gain of the copied-token signal.
  double copy_gain = 16.0;
  // Logit gain of the context token frequency signal.
  double frequency_gain = 3.0;
  double eos_bias = 1.5;
};

// Hand-wired induction-head transformer: an output-region repetition is
// copied forward with growing confidence, input-region repetition only
// weakly. Layer norm and MLPs are disabled.
std::shared_ptr<ToyTransformer> make_loop_prone_model(const LoopProneOptions& options = {},
                                                      std::string id = "toy-loop");

}  // namespace looptrap
