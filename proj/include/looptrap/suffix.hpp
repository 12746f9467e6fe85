// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adversarial suffixes built by repeating a short cyclic segment, plus the
// single-token edits the optimizer applies to them.

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "looptrap/gateway.hpp"
#include "looptrap/tokenizer.hpp"

namespace looptrap {

struct CyclicSegment {
  TokenSequence tokens;

  std::size_t length() const { return tokens.size(); }
  // Distinct token ids, ascending.
  std::vector<TokenId> distinct() const;
};

enum class SuffixOrigin { kInitial, kOptimized };

struct AdversarialSuffix {
  TokenSequence tokens;
  CyclicSegment segment;
  SuffixOrigin origin = SuffixOrigin::kInitial;

  std::size_t length() const { return tokens.size(); }
};

struct Substitution {
  std::size_t position = 0;
  TokenId new_token = 0;

  friend bool operator==(const Substitution&, const Substitution&) = default;
  friend auto operator<=>(const Substitution&, const Substitution&) = default;
};

CyclicSegment segment_from_text(std::string_view text, const Tokenizer& tokenizer);

// Segment of `length` tokens drawn uniformly from the substitution pool.
CyclicSegment random_segment(std::size_t length, const Tokenizer& tokenizer, std::mt19937_64& rng);

// Periodic fill of `length` tokens: tokens[k] = segment.tokens[k mod c].
AdversarialSuffix init_suffix(const CyclicSegment& segment, std::size_t length, const VocabSpec& vocab);

AdversarialSuffix apply_substitution(const AdversarialSuffix& suffix, Substitution sub,
                                     const VocabSpec& vocab);

bool roundtrip_stable(std::span<const TokenId> tokens, const Tokenizer& tokenizer);
bool roundtrip_stable(const AdversarialSuffix& suffix, const LanguageModel& model);

// Tokens eligible as substitutions: not special, decoded form non-empty and
// not whitespace-only, and stable under single-token decode -> encode.
std::vector<bool> substitution_pool_mask(const Tokenizer& tokenizer);

std::size_t hamming_distance(std::span<const TokenId> a, std::span<const TokenId> b);

}  // namespace looptrap
