// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"
#include "looptrap/defense.hpp"
#include "looptrap/errors.hpp"
#include "looptrap/toy_transformer.hpp"

namespace looptrap {
namespace {

// First index whose run length exceeds r + 1, via run-length encoding.
std::optional<std::size_t> rle_halt(const std::vector<TokenId>& s, std::size_t r) {
  std::size_t start = 0;
  while (start < s.size()) {
    std::size_t end = start;
    while (end < s.size() && s[end] == s[start]) ++end;
    if (end - start > r + 1) return start + r + 1;
    start = end;
  }
  return std::nullopt;
}

TEST(RepeatGuard, HaltsOnLongRun) {
  const std::vector<TokenId> run(12, 7);
  const GuardVerdict v = repeat_guard(run, 10);
  EXPECT_TRUE(v.halted);
  EXPECT_EQ(v.halt_position, 11u);
  EXPECT_EQ(v.reason, HaltReason::kRepeatThreshold);
  EXPECT_FALSE(repeat_guard(std::vector<TokenId>(11, 7), 10).halted);
}

TEST(RepeatGuard, PeriodicPhraseIsNotARun) {
  std::vector<TokenId> phrase;
  for (int k = 0; k < 40; ++k) {
    for (TokenId t : {1, 2, 3, 4, 5}) phrase.push_back(t);
  }
  EXPECT_FALSE(repeat_guard(phrase, 10).halted);
}

TEST(RepeatGuard, MatchesRunLengthOracle) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<TokenId> s;
    const std::size_t n = rng() % 80;
    while (s.size() < n) {
      const TokenId t = static_cast<TokenId>(rng() % 3);
      const std::size_t len = 1 + rng() % 14;
      for (std::size_t i = 0; i < len && s.size() < n; ++i) s.push_back(t);
    }
    const std::size_t r = 2 + rng() % 10;
    const GuardVerdict v = repeat_guard(s, r);
    const auto expected = rle_halt(s, r);
    EXPECT_EQ(v.halted, expected.has_value());
    EXPECT_EQ(v.halt_position, expected);
  }
}

TEST(RepeatGuard, RejectsSmallThreshold) {
  EXPECT_THROW(repeat_guard(std::vector<TokenId>{1, 1}, 1), InvalidArgumentError);
}

TEST(EntropyGuard, ConstantLowEntropy) {
  const std::vector<double> h(64, 0.01);
  const GuardVerdict v = entropy_guard(h, 32, 0.05);
  EXPECT_TRUE(v.halted);
  EXPECT_EQ(v.halt_position, 31u);
  EXPECT_EQ(v.reason, HaltReason::kLowEntropy);
  EXPECT_FALSE(entropy_guard(std::vector<double>(31, 0.0), 32, 0.05).halted);
  EXPECT_THROW(entropy_guard(h, 0, 0.05), InvalidArgumentError);
}

TEST(EntropyGuard, DecayingEntropyOracle) {
  std::vector<double> h;
  for (int i = 0; i < 200; ++i) h.push_back(2.0 * std::exp(-0.05 * i));
  std::optional<std::size_t> expected;
  for (std::size_t i = 31; i < h.size() && !expected; ++i) {
    double s = 0.0;
    for (std::size_t j = i - 31; j <= i; ++j) s += h[j];
    if (s / 32.0 < 0.05) expected = i;
  }
  ASSERT_TRUE(expected.has_value());
  EXPECT_EQ(entropy_guard(h, 32, 0.05).halt_position, expected);
}

TEST(PplGate, UniformModelAgainstThreshold) {
  const auto model = make_constant_logits_model(std::vector<double>(64, 0.0), 256);
  const TokenSequence p{10, 11, 12, 13};
  const GuardVerdict v = ppl_gate(p, 50.0, *model);
  EXPECT_TRUE(v.halted);
  EXPECT_EQ(v.reason, HaltReason::kPplReject);
  EXPECT_FALSE(ppl_gate(p, 100.0, *model).halted);
  EXPECT_THROW(ppl_gate(p, 1.0, *model), InvalidArgumentError);
}

TEST(StreamingGuard, AgreesWithOfflineGuards) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TokenId> s;
    std::vector<double> h;
    for (int i = 0; i < 60; ++i) {
      s.push_back(static_cast<TokenId>(rng() % 2));
      h.push_back(static_cast<double>(rng() % 100) / 1000.0);
    }
    DefenseConfig cfg;
    cfg.repeat_r = 3;
    cfg.entropy_window = 8;
    cfg.entropy_tau = 0.03;
    StreamingGuard g(cfg);
    std::optional<std::size_t> stopped;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!g.observe(i, s[i], h[i])) {
        stopped = i;
        break;
      }
    }
    const auto rep = repeat_guard(s, 3).halt_position;
    const auto ent = entropy_guard(h, 8, 0.03).halt_position;
    std::optional<std::size_t> first = rep;
    if (ent && (!first || *ent < *first)) first = ent;
    EXPECT_EQ(stopped, first);
    EXPECT_EQ(g.verdict().halt_position, first);
    if (rep && rep == first) {
      EXPECT_EQ(g.verdict().reason, HaltReason::kRepeatThreshold);
    }
  }
}

TEST(DefenseConfig, Validation) {
  DefenseConfig cfg;
  cfg.repeat_r = 1;
  try {
    cfg.validate();
    FAIL() << "r = 1 accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "defense.repeat.r");
  }
  cfg.repeat_r = 10;
  cfg.entropy_window = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.entropy_window = 32;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(GuardedTrials, HaltsLoopingGeneration) {
  const testing::ScriptedModel model(16);
  DefenseConfig cfg;
  cfg.repeat_r = 10;
  const GuardedTrials g = run_guarded_trials(model, {10}, DecodingPolicy::sampled(0.6, 0), 4, 64, cfg);
  ASSERT_EQ(g.outcomes.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_TRUE(g.outcomes[k].halted);
    EXPECT_EQ(g.outcomes[k].length, 12u);
    EXPECT_FALSE(g.outcomes[k].reached_max);
    EXPECT_EQ(g.verdicts[k].halt_position, 11u);
  }
}

TEST(GuardedTrials, GateRejectsBeforeGeneration) {
  const auto model = make_constant_logits_model(std::vector<double>(64, 0.0), 256);
  DefenseConfig cfg;
  cfg.ppl_threshold = 10.0;
  const GuardedTrials g = run_guarded_trials(*model, {10, 11, 12}, DecodingPolicy::sampled(0.6, 0), 3, 64, cfg);
  ASSERT_TRUE(g.gate.has_value());
  EXPECT_TRUE(g.gate->halted);
  for (const auto& o : g.outcomes) EXPECT_EQ(o.length, 0u);
}

}  // namespace
}  // namespace looptrap
