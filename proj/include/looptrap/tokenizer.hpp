// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace looptrap {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

struct VocabSpec {
  std::size_t size = 0;
  std::set<TokenId> special_ids;
  // SHA-256 over the full index -> token-string mapping.
  std::string fingerprint;

  bool is_special(TokenId id) const { return special_ids.contains(id); }
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  virtual TokenSequence encode(std::string_view text) const = 0;
  virtual std::string decode(std::span<const TokenId> tokens) const = 0;
  virtual const VocabSpec& vocab() const = 0;
  // Surface string of a single token (special tokens render as their marker).
  virtual std::string token_text(TokenId id) const = 0;

  std::size_t vocab_size() const { return vocab().size; }
};

// Tokenizer over an explicit list of piece strings. Encoding is greedy
// longest-match from left to right. With single-character pieces this is a
// character-level tokenizer; multi-character pieces give a merge-capable
// tokenizer whose decode -> encode path is not always stable.
class PieceTokenizer final : public Tokenizer {
 public:
  PieceTokenizer(std::vector<std::string> pieces, std::set<TokenId> special_ids);

  TokenSequence encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> tokens) const override;
  const VocabSpec& vocab() const override { return vocab_; }
  std::string token_text(TokenId id) const override;

  TokenId id_of(std::string_view piece) const;
  const std::vector<std::string>& pieces() const { return pieces_; }

 private:
  std::vector<std::string> pieces_;
  VocabSpec vocab_;
  std::size_t longest_piece_ = 0;
};

// Token strings for the built-in toy vocabulary: the special markers
// followed by a fixed character alphabet, truncated to `size` entries.
struct ToyVocabulary {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kSystem = 2;
  static constexpr TokenId kUser = 3;
  static constexpr TokenId kAssistant = 4;
  static constexpr TokenId kEndTurn = 5;
  static constexpr std::size_t kSpecialCount = 6;

  static std::vector<std::string> pieces(std::size_t size);
  // Largest supported vocabulary size.
  static std::size_t max_size();
  static std::set<TokenId> special_ids();
};

std::string vocab_fingerprint(const std::vector<std::string>& pieces);

}  // namespace looptrap
