// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/gateway.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "looptrap/errors.hpp"

namespace looptrap {

namespace {

void append(TokenSequence& out, const Tokenizer& tok, std::string_view text) {
  if (text.empty()) return;
  TokenSequence piece = tok.encode(text);
  out.insert(out.end(), piece.begin(), piece.end());
}

}  // namespace

RenderedPrompt render_chat(const ChatTemplate& tmpl, std::string_view user_text,
                           const Tokenizer& tokenizer) {
  return render_chat_with_prefill(tmpl, user_text, {}, tokenizer);
}

RenderedPrompt render_chat_with_prefill(const ChatTemplate& tmpl, std::string_view user_text,
                                        std::string_view assistant_prefill,
                                        const Tokenizer& tokenizer) {
  RenderedPrompt out;
  append(out.tokens, tokenizer, tmpl.system_text);
  append(out.tokens, tokenizer, tmpl.user_prefix);
  append(out.tokens, tokenizer, user_text);
  append(out.tokens, tokenizer, tmpl.user_suffix);
  append(out.tokens, tokenizer, tmpl.assistant_prefix);
  out.output_region_start = out.tokens.size();
  append(out.tokens, tokenizer, assistant_prefill);
  return out;
}

void DecodingPolicy::validate() const {
  switch (kind) {
    case Kind::kGreedy:
      return;
    case Kind::kBeam:
      if (beam_width < 2) throw InvalidArgumentError("beam_width must be >= 2");
      return;
    case Kind::kTemperature:
      if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw InvalidArgumentError("temperature must be a positive finite number");
      }
      return;
  }
}

std::string DecodingPolicy::label() const {
  std::ostringstream os;
  switch (kind) {
    case Kind::kGreedy:
      os << "greedy";
      break;
    case Kind::kBeam:
      os << "beam-" << beam_width;
      break;
    case Kind::kTemperature:
      os << "temperature-" << temperature;
      break;
  }
  return os.str();
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size(), 0.0);
  if (logits.empty()) return out;
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw InvalidArgumentError("softmax over all -inf logits");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

double entropy_nats(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(0.0, h);
}

std::vector<StepDistribution> LanguageModel::next_distributions(const TokenSequence&,
                                                                const TokenSequence&) const {
  throw CapabilityError(id() + ": adapter does not expose next-token distributions");
}

GradientTable LanguageModel::one_hot_gradient(const TokenSequence&, IndexRange, const TokenSequence&,
                                              const DistributionLoss&) const {
  throw CapabilityError(id() + ": adapter is not differentiable");
}

AttentionTensor LanguageModel::attention_matrix(const TokenSequence&, const TokenSequence&) const {
  throw CapabilityError(id() + ": adapter does not expose attention");
}

}  // namespace looptrap
