// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <unordered_map>

#include "looptrap/digest.hpp"
#include "looptrap/errors.hpp"

namespace looptrap {

namespace {

// Order matters: truncated toy vocabularies keep the prefix.
constexpr std::string_view kToyAlphabet =
    " abcdefghijklmnopqrstuvwxyz*%&@#.,!?'0123456789-:;()/<>\n+=";

}  // namespace

std::string vocab_fingerprint(const std::vector<std::string>& pieces) {
  std::string buf;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    buf += std::to_string(i);
    buf += '\t';
    buf += std::to_string(pieces[i].size());
    buf += ':';
    buf += pieces[i];
    buf += '\n';
  }
  return sha256_hex(buf);
}

PieceTokenizer::PieceTokenizer(std::vector<std::string> pieces, std::set<TokenId> special_ids)
    : pieces_(std::move(pieces)) {
  if (pieces_.empty()) throw InvalidArgumentError("tokenizer needs at least one piece");
  for (TokenId id : special_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
      throw OutOfRangeError("special id " + std::to_string(id) + " outside vocabulary");
    }
  }
  std::set<std::string> seen;
  for (const auto& p : pieces_) {
    if (p.empty()) throw InvalidArgumentError("empty tokenizer piece");
    if (!seen.insert(p).second) throw InvalidArgumentError("duplicate tokenizer piece '" + p + "'");
    longest_piece_ = std::max(longest_piece_, p.size());
  }
  vocab_.size = pieces_.size();
  vocab_.special_ids = std::move(special_ids);
  vocab_.fingerprint = vocab_fingerprint(pieces_);
}

TokenId PieceTokenizer::id_of(std::string_view piece) const {
  auto it = std::find(pieces_.begin(), pieces_.end(), piece);
  if (it == pieces_.end()) throw UnknownCharacterError("no token for '" + std::string(piece) + "'");
  return static_cast<TokenId>(it - pieces_.begin());
}

TokenSequence PieceTokenizer::encode(std::string_view text) const {
  // Built lazily per call; vocabularies here are tiny.
  std::unordered_map<std::string_view, TokenId> index;
  index.reserve(pieces_.size());
  for (std::size_t i = 0; i < pieces_.size(); ++i) index.emplace(pieces_[i], static_cast<TokenId>(i));

  TokenSequence out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t take = std::min(longest_piece_, text.size() - pos);
    bool matched = false;
    for (; take > 0; --take) {
      auto it = index.find(text.substr(pos, take));
      if (it != index.end()) {
        out.push_back(it->second);
        pos += take;
        matched = true;
        break;
      }
    }
    if (!matched) {
      char hex[8];
      std::snprintf(hex, sizeof hex, "0x%02x", static_cast<unsigned char>(text[pos]));
      throw UnknownCharacterError(std::string("cannot encode character ") + hex + " at offset " + std::to_string(pos));
    }
  }
  return out;
}

std::string PieceTokenizer::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId t : tokens) out += token_text(t);
  return out;
}

std::string PieceTokenizer::token_text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
    throw OutOfRangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(pieces_.size()));
  }
  return pieces_[static_cast<std::size_t>(id)];
}

std::vector<std::string> ToyVocabulary::pieces(std::size_t size) {
  static const std::vector<std::string> kSpecials = {"<|pad|>",  "<|eos|>",       "<|system|>",
                                                     "<|user|>", "<|assistant|>", "<|end|>"};
  if (size == 0 || size > kSpecials.size() + kToyAlphabet.size()) {
    throw InvalidArgumentError("toy vocabulary size must be in [1, " +
                               std::to_string(kSpecials.size() + kToyAlphabet.size()) + "]");
  }
  std::vector<std::string> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    if (i < kSpecials.size()) {
      out.push_back(kSpecials[i]);
    } else {
      out.emplace_back(1, kToyAlphabet[i - kSpecials.size()]);
    }
  }
  return out;
}

std::size_t ToyVocabulary::max_size() { return kSpecialCount + kToyAlphabet.size(); }

std::set<TokenId> ToyVocabulary::special_ids() {
  return {kPad, kEos, kSystem, kUser, kAssistant, kEndTurn};
}

}  // namespace looptrap
