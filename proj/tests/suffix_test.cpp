// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "looptrap/errors.hpp"
#include "looptrap/suffix.hpp"
#include "looptrap/toy_transformer.hpp"

namespace looptrap {
namespace {

class SuffixTest : public ::testing::Test {
 protected:
  std::shared_ptr<const PieceTokenizer> tok_ = make_toy_tokenizer(64);
  const VocabSpec& vocab() const { return tok_->vocab(); }
  TokenId id(const char* piece) const { return tok_->id_of(piece); }
};

TEST_F(SuffixTest, PeriodicTruncation) {
  const TokenId a = id("a"), b = id("b");
  const AdversarialSuffix s = init_suffix({{a, b}}, 5, vocab());
  EXPECT_EQ(s.tokens, (TokenSequence{a, b, a, b, a}));
  EXPECT_EQ(s.origin, SuffixOrigin::kInitial);
}

TEST_F(SuffixTest, SingleStarSegment) {
  const CyclicSegment seg = segment_from_text("*", *tok_);
  const AdversarialSuffix s = init_suffix(seg, 30, vocab());
  EXPECT_EQ(tok_->decode(s.tokens), std::string(30, '*'));
}

TEST_F(SuffixTest, PhraseSegmentFillsWholePeriods) {
  const CyclicSegment seg = segment_from_text("* % & @ #", *tok_);
  ASSERT_EQ(seg.length(), 9u);
  const AdversarialSuffix s = init_suffix(seg, 30, vocab());
  ASSERT_EQ(s.length(), 30u);
  for (std::size_t k = 0; k < 30; ++k) EXPECT_EQ(s.tokens[k], seg.tokens[k % 9]);
  const CyclicSegment spaced = segment_from_text("*%&@#", *tok_);
  EXPECT_EQ(tok_->decode(init_suffix(spaced, 30, vocab()).tokens), "*%&@#*%&@#*%&@#*%&@#*%&@#*%&@#");
}

TEST_F(SuffixTest, LengthAndPeriodicityProperty) {
  std::mt19937_64 rng(17);
  for (std::size_t L = 1; L <= 256; L += 5) {
    for (std::size_t c : {std::size_t{1}, std::size_t{2}, std::size_t{5}, L}) {
      if (c > L) continue;
      const CyclicSegment seg = random_segment(c, *tok_, rng);
      const AdversarialSuffix s = init_suffix(seg, L, vocab());
      ASSERT_EQ(s.length(), L);
      for (std::size_t k = 0; k < L; ++k) ASSERT_EQ(s.tokens[k], seg.tokens[k % c]);
    }
  }
}

TEST_F(SuffixTest, InitRejectsInvalidSegments) {
  EXPECT_THROW(init_suffix({{id("a"), id("b"), id("c")}}, 2, vocab()), InvalidArgumentError);
  EXPECT_THROW(init_suffix({{ToyVocabulary::kEos}}, 4, vocab()), InvalidArgumentError);
  EXPECT_THROW(init_suffix({}, 4, vocab()), InvalidArgumentError);
  EXPECT_THROW(init_suffix({{id("a")}}, 0, vocab()), InvalidArgumentError);
}

TEST_F(SuffixTest, SubstitutionSameTokenFlipsOrigin) {
  const TokenId a = id("a"), b = id("b");
  const AdversarialSuffix s = init_suffix({{a, b}}, 3, vocab());
  const AdversarialSuffix t = apply_substitution(s, {0, a}, vocab());
  EXPECT_EQ(t.tokens, s.tokens);
  EXPECT_EQ(t.origin, SuffixOrigin::kOptimized);
  EXPECT_EQ(s.origin, SuffixOrigin::kInitial);
}

TEST_F(SuffixTest, SubstitutionChangesOnePosition) {
  const TokenId a = id("a"), b = id("b");
  const AdversarialSuffix s = init_suffix({{a}}, 3, vocab());
  EXPECT_EQ(apply_substitution(s, {1, b}, vocab()).tokens, (TokenSequence{a, b, a}));
  EXPECT_EQ(s.tokens, (TokenSequence{a, a, a}));
}

TEST_F(SuffixTest, HammingDistanceProperty) {
  std::mt19937_64 rng(23);
  const auto pool = substitution_pool_mask(*tok_);
  std::vector<TokenId> eligible;
  for (std::size_t t = 0; t < pool.size(); ++t) {
    if (pool[t]) eligible.push_back(static_cast<TokenId>(t));
  }
  AdversarialSuffix s = init_suffix(random_segment(3, *tok_, rng), 12, vocab());
  for (int i = 0; i < 200; ++i) {
    const Substitution sub{rng() % 12, eligible[rng() % eligible.size()]};
    const AdversarialSuffix t = apply_substitution(s, sub, vocab());
    const std::size_t d = hamming_distance(s.tokens, t.tokens);
    EXPECT_LE(d, 1u);
    EXPECT_EQ(d == 0, s.tokens[sub.position] == sub.new_token);
    for (TokenId tok : t.tokens) EXPECT_FALSE(vocab().is_special(tok));
    s = t;
  }
}

TEST_F(SuffixTest, SubstitutionErrors) {
  const AdversarialSuffix s = init_suffix({{id("a")}}, 3, vocab());
  EXPECT_THROW(apply_substitution(s, {3, id("b")}, vocab()), OutOfRangeError);
  EXPECT_THROW(apply_substitution(s, {0, 64}, vocab()), OutOfRangeError);
  EXPECT_THROW(apply_substitution(s, {0, ToyVocabulary::kUser}, vocab()), InvalidArgumentError);
}

TEST_F(SuffixTest, CharacterTokenizerAlwaysStable) {
  const auto model = make_toy_model();
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const AdversarialSuffix s = init_suffix(random_segment(1 + rng() % 4, *tok_, rng), 10, vocab());
    EXPECT_TRUE(roundtrip_stable(s, *model));
  }
}

TEST_F(SuffixTest, PoolExcludesSpecialsAndWhitespace) {
  const auto mask = substitution_pool_mask(*tok_);
  ASSERT_EQ(mask.size(), 64u);
  for (TokenId t : ToyVocabulary::special_ids()) EXPECT_FALSE(mask[static_cast<std::size_t>(t)]);
  EXPECT_FALSE(mask[static_cast<std::size_t>(id(" "))]);
  EXPECT_TRUE(mask[static_cast<std::size_t>(id("*"))]);
}

TEST_F(SuffixTest, PoolExcludesTokensUnstableAlone) {
  const PieceTokenizer merge({"a", "b", "ab", "aa", " "}, {});
  const auto mask = substitution_pool_mask(merge);
  EXPECT_EQ(mask, (std::vector<bool>{true, true, true, true, false}));
  EXPECT_FALSE(roundtrip_stable(TokenSequence{0, 0}, merge));
}

TEST_F(SuffixTest, SegmentFromText) {
  const CyclicSegment seg = segment_from_text("abca", *tok_);
  EXPECT_EQ(seg.length(), 4u);
  EXPECT_EQ(seg.distinct(), (std::vector<TokenId>{id("a"), id("b"), id("c")}));
  EXPECT_THROW(segment_from_text("", *tok_), InvalidArgumentError);
}

}  // namespace
}  // namespace looptrap
