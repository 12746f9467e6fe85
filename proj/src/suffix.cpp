// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/suffix.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <string>

#include "looptrap/errors.hpp"

namespace looptrap {

namespace {

void check_segment(const CyclicSegment& segment, const VocabSpec& vocab) {
  if (segment.tokens.empty()) throw InvalidArgumentError("cyclic segment must be non-empty");
  for (TokenId t : segment.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab.size) {
      throw OutOfRangeError("segment token " + std::to_string(t) + " outside vocabulary");
    }
    if (vocab.is_special(t)) {
      throw InvalidArgumentError("special token " + std::to_string(t) + " inside cyclic segment");
    }
  }
}

}  // namespace

std::vector<TokenId> CyclicSegment::distinct() const {
  std::set<TokenId> s(tokens.begin(), tokens.end());
  return {s.begin(), s.end()};
}

CyclicSegment segment_from_text(std::string_view text, const Tokenizer& tokenizer) {
  CyclicSegment seg{tokenizer.encode(text)};
  check_segment(seg, tokenizer.vocab());
  return seg;
}

CyclicSegment random_segment(std::size_t length, const Tokenizer& tokenizer, std::mt19937_64& rng) {
  if (length == 0) throw InvalidArgumentError("cyclic segment length must be >= 1");
  const std::vector<bool> mask = substitution_pool_mask(tokenizer);
  std::vector<TokenId> pool;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) pool.push_back(static_cast<TokenId>(t));
  }
  if (pool.empty()) throw EmptyPoolError("no eligible tokens for a cyclic segment");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  CyclicSegment seg;
  for (std::size_t i = 0; i < length; ++i) seg.tokens.push_back(pool[pick(rng)]);
  return seg;
}

AdversarialSuffix init_suffix(const CyclicSegment& segment, std::size_t length, const VocabSpec& vocab) {
  check_segment(segment, vocab);
  if (length == 0) throw InvalidArgumentError("suffix length must be >= 1");
  if (segment.length() > length) {
    throw InvalidArgumentError("cyclic segment length " + std::to_string(segment.length()) +
                               " exceeds suffix length " + std::to_string(length));
  }
  AdversarialSuffix out;
  out.segment = segment;
  out.origin = SuffixOrigin::kInitial;
  out.tokens.reserve(length);
  for (std::size_t k = 0; k < length; ++k) out.tokens.push_back(segment.tokens[k % segment.length()]);
  return out;
}

AdversarialSuffix apply_substitution(const AdversarialSuffix& suffix, Substitution sub,
                                     const VocabSpec& vocab) {
  if (sub.position >= suffix.tokens.size()) {
    throw OutOfRangeError("substitution position " + std::to_string(sub.position) +
                          " outside suffix of length " + std::to_string(suffix.tokens.size()));
  }
  if (sub.new_token < 0 || static_cast<std::size_t>(sub.new_token) >= vocab.size) {
    throw OutOfRangeError("substitution token " + std::to_string(sub.new_token) + " outside vocabulary");
  }
  if (vocab.is_special(sub.new_token)) {
    throw InvalidArgumentError("substitution introduces special token " + std::to_string(sub.new_token));
  }
  AdversarialSuffix out = suffix;
  out.tokens[sub.position] = sub.new_token;
  out.origin = SuffixOrigin::kOptimized;
  return out;
}

bool roundtrip_stable(std::span<const TokenId> tokens, const Tokenizer& tokenizer) {
  try {
    const TokenSequence again = tokenizer.encode(tokenizer.decode(tokens));
    return std::equal(again.begin(), again.end(), tokens.begin(), tokens.end());
  } catch (const UnknownCharacterError&) {
    return false;
  }
}

bool roundtrip_stable(const AdversarialSuffix& suffix, const LanguageModel& model) {
  return roundtrip_stable(suffix.tokens, model.tokenizer());
}

std::vector<bool> substitution_pool_mask(const Tokenizer& tokenizer) {
  const VocabSpec& vocab = tokenizer.vocab();
  std::vector<bool> mask(vocab.size, false);
  for (std::size_t t = 0; t < vocab.size; ++t) {
    const auto id = static_cast<TokenId>(t);
    if (vocab.is_special(id)) continue;
    const std::string text = tokenizer.token_text(id);
    const bool blank = std::all_of(text.begin(), text.end(),
                                   [](unsigned char ch) { return std::isspace(ch) != 0; });
    if (text.empty() || blank) continue;
    const TokenId single[1] = {id};
    mask[t] = roundtrip_stable(single, tokenizer);
  }
  return mask;
}

std::size_t hamming_distance(std::span<const TokenId> a, std::span<const TokenId> b) {
  if (a.size() != b.size()) throw InvalidArgumentError("hamming distance needs equal lengths");
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

}  // namespace looptrap
