// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON-over-HTTP model gateway. RemoteModel is a LanguageModel backed by a
// server speaking the protocol below; GatewayServer exposes any local
// LanguageModel the same way (tools/hf_gateway.py is the reference server
// for pretrained checkpoints).
//
//   GET  /info                -> id, pieces, special_ids, eos_id, context_length,
//                                chat_template, capabilities
//   POST /encode              {text}                               -> {tokens}
//   POST /decode              {tokens}                             -> {text}
//   POST /next_distributions  {prompt, continuation}               -> {probs}
//   POST /one_hot_gradient    {prompt, span, continuation, loss}   -> {values, loss}
//   POST /generate            {prompt, policy, max_new, eos_enabled}
//                                                                   -> {output, step_entropies}
//   POST /attention           {prompt, continuation}
//                                -> {layers, heads, queries, keys, weights}
//
// Errors come back as HTTP 4xx/5xx with {"error": kind, "message": text}.

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <thread>

#include "looptrap/gateway.hpp"

namespace looptrap {

class RemoteModel final : public LanguageModel {
 public:
  // `endpoint` is "http://host:port". Fetches /info eagerly.
  explicit RemoteModel(std::string endpoint, double timeout_seconds = 600.0);
  ~RemoteModel() override;

  std::string id() const override;
  const Tokenizer& tokenizer() const override;
  const ChatTemplate& chat_template() const override;
  Capabilities capabilities() const override;
  std::size_t context_length() const override;
  std::optional<TokenId> eos_id() const override;

  std::vector<StepDistribution> next_distributions(const TokenSequence& prompt,
                                                   const TokenSequence& continuation) const override;
  GradientTable one_hot_gradient(const TokenSequence& prompt, IndexRange suffix_span,
                                 const TokenSequence& continuation, const DistributionLoss& loss) const override;
  // Remote generation does not stream; an observer is replayed over the
  // finished output and truncates it at the first halt.
  TrialOutcome generate(const TokenSequence& prompt, const DecodingPolicy& policy, std::size_t max_new,
                        bool eos_enabled, const StepObserver& observer = {}) const override;
  AttentionTensor attention_matrix(const TokenSequence& prompt, const TokenSequence& continuation) const override;

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
};

// Serves `model` on host:port (port 0 picks a free port) from a background
// thread until stop() or destruction.
class GatewayServer {
 public:
  GatewayServer(ModelHandle model, std::string host = "127.0.0.1", int port = 0);
  ~GatewayServer();
  GatewayServer(const GatewayServer&) = delete;
  GatewayServer& operator=(const GatewayServer&) = delete;

  int port() const { return port_; }
  std::string endpoint() const;
  void stop();
  // Blocks serving requests on the calling thread.
  static void serve_forever(ModelHandle model, const std::string& host, int port);

  struct Impl;

 private:
  std::unique_ptr<Impl> impl_;
  std::string host_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace looptrap
