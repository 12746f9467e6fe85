// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace looptrap {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tokenizer cannot represent a character of the input text.
class UnknownCharacterError : public Error {
 public:
  using Error::Error;
};

// Token id, position, or index outside its valid range.
class OutOfRangeError : public Error {
 public:
  using Error::Error;
};

class ContextOverflowError : public Error {
 public:
  using Error::Error;
};

// Operation requested from an adapter that does not advertise the capability.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

class InvalidArgumentError : public Error {
 public:
  using Error::Error;
};

// Suffix tokens do not survive decode -> re-encode.
class RoundTripError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class EmptyPoolError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace looptrap
