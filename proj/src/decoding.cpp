// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "looptrap/errors.hpp"
#include "looptrap/gateway.hpp"

namespace looptrap {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void mask_eos(std::vector<double>& logits, std::optional<TokenId> eos, bool eos_enabled) {
  if (!eos_enabled && eos && static_cast<std::size_t>(*eos) < logits.size()) {
    logits[static_cast<std::size_t>(*eos)] = kNegInf;
  }
}

std::size_t argmax_lowest(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

TrialOutcome finish(TokenSequence output, std::vector<double> entropies, std::size_t max_new,
                    const DecodingPolicy& policy, bool halted) {
  TrialOutcome out;
  out.length = output.size();
  out.reached_max = out.length == max_new;
  out.output = std::move(output);
  out.step_entropies = std::move(entropies);
  out.policy = policy;
  out.seed = policy.seed;
  out.halted = halted;
  return out;
}

TrialOutcome stepwise(DecodeSession& session, const TokenSequence& prompt,
                      const DecodingPolicy& policy, std::size_t max_new, std::optional<TokenId> eos,
                      bool eos_enabled, const StepObserver& observer) {
  std::mt19937_64 rng(policy.seed);
  TokenSequence output;
  std::vector<double> entropies;
  std::vector<double> logits = session.feed(prompt);
  bool halted = false;
  for (std::size_t i = 0; i < max_new; ++i) {
    mask_eos(logits, eos, eos_enabled);
    if (policy.kind == DecodingPolicy::Kind::kTemperature) {
      for (double& v : logits) v /= policy.temperature;
    }
    const std::vector<double> probs = softmax(logits);
    TokenId next;
    if (policy.kind == DecodingPolicy::Kind::kTemperature) {
      std::discrete_distribution<std::size_t> pick(probs.begin(), probs.end());
      next = static_cast<TokenId>(pick(rng));
    } else {
      next = static_cast<TokenId>(argmax_lowest(probs));
    }
    if (eos_enabled && eos && next == *eos) break;
    output.push_back(next);
    entropies.push_back(entropy_nats(probs));
    if (observer && !observer(i, next, entropies.back())) {
      halted = true;
      break;
    }
    if (i + 1 < max_new) {
      const TokenId fed[1] = {next};
      logits = session.feed(fed);
    }
  }
  return finish(std::move(output), std::move(entropies), max_new, policy, halted);
}

struct Hypothesis {
  std::unique_ptr<DecodeSession> session;
  TokenSequence tokens;
  std::vector<double> entropies;
  std::vector<double> logits;
  double logprob = 0.0;
};

struct Finished {
  TokenSequence tokens;
  std::vector<double> entropies;
  double score = 0.0;
};

double normalized(double logprob, std::size_t len) {
  return logprob / static_cast<double>(std::max<std::size_t>(len, 1));
}

TrialOutcome beam_search(DecodeSession& session, const TokenSequence& prompt,
                         const DecodingPolicy& policy, std::size_t max_new,
                         std::optional<TokenId> eos, bool eos_enabled,
                         const StepObserver& observer) {
  const std::size_t width = policy.beam_width;
  std::vector<Hypothesis> live;
  {
    Hypothesis root;
    root.session = session.clone();
    root.logits = root.session->feed(prompt);
    live.push_back(std::move(root));
  }
  std::vector<Finished> finished;

  struct Expansion {
    double score;
    std::size_t hyp;
    TokenId token;
    double entropy;
  };

  for (std::size_t step = 0; step < max_new && !live.empty(); ++step) {
    std::vector<Expansion> expansions;
    for (std::size_t h = 0; h < live.size(); ++h) {
      std::vector<double> logits = live[h].logits;
      mask_eos(logits, eos, eos_enabled);
      const std::vector<double> probs = softmax(logits);
      const double ent = entropy_nats(probs);
      for (std::size_t t = 0; t < probs.size(); ++t) {
        if (probs[t] <= 0.0) continue;
        expansions.push_back({live[h].logprob + std::log(probs[t]), h, static_cast<TokenId>(t), ent});
      }
    }
    std::stable_sort(expansions.begin(), expansions.end(), [](const Expansion& a, const Expansion& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.token < b.token;
    });

    std::vector<Hypothesis> next;
    for (const Expansion& e : expansions) {
      if (next.size() == width) break;
      const Hypothesis& parent = live[e.hyp];
      if (eos_enabled && eos && e.token == *eos) {
        finished.push_back({parent.tokens, parent.entropies, normalized(e.score, parent.tokens.size())});
        continue;
      }
      Hypothesis child;
      child.tokens = parent.tokens;
      child.tokens.push_back(e.token);
      child.entropies = parent.entropies;
      child.entropies.push_back(e.entropy);
      child.logprob = e.score;
      child.session = parent.session->clone();
      if (step + 1 < max_new) {
        const TokenId fed[1] = {e.token};
        child.logits = child.session->feed(fed);
      }
      next.push_back(std::move(child));
    }
    live = std::move(next);
    if (finished.size() >= width) break;
  }

  // Best of finished and surviving hypotheses under length-normalised score.
  const Finished* best_finished = nullptr;
  for (const auto& f : finished) {
    if (!best_finished || f.score > best_finished->score) best_finished = &f;
  }
  const Hypothesis* best_live = nullptr;
  for (const auto& h : live) {
    if (!best_live || normalized(h.logprob, h.tokens.size()) >
                          normalized(best_live->logprob, best_live->tokens.size())) {
      best_live = &h;
    }
  }
  TokenSequence tokens;
  std::vector<double> entropies;
  if (best_live && (!best_finished ||
                    normalized(best_live->logprob, best_live->tokens.size()) >= best_finished->score)) {
    tokens = best_live->tokens;
    entropies = best_live->entropies;
  } else if (best_finished) {
    tokens = best_finished->tokens;
    entropies = best_finished->entropies;
  }

  // Beam search cannot stream; observers see the chosen hypothesis afterwards.
  bool halted = false;
  if (observer) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (!observer(i, tokens[i], entropies[i])) {
        tokens.resize(i + 1);
        entropies.resize(i + 1);
        halted = true;
        break;
      }
    }
  }
  return finish(std::move(tokens), std::move(entropies), max_new, policy, halted);
}

}  // namespace

TrialOutcome decode_with_policy(DecodeSession& session, const TokenSequence& prompt,
                                const DecodingPolicy& policy, std::size_t max_new,
                                std::optional<TokenId> eos, bool eos_enabled,
                                const StepObserver& observer) {
  policy.validate();
  if (max_new == 0) throw InvalidArgumentError("max_new must be >= 1");
  if (prompt.empty()) throw InvalidArgumentError("prompt must be non-empty");
  if (policy.kind == DecodingPolicy::Kind::kBeam) {
    return beam_search(session, prompt, policy, max_new, eos, eos_enabled, observer);
  }
  return stepwise(session, prompt, policy, max_new, eos, eos_enabled, observer);
}

}  // namespace looptrap
