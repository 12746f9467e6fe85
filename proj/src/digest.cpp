// Copyright 2026 The looptrap Authors
// SPDX-License-Identifier: Apache-2.0

#include "looptrap/digest.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdio>

#include "looptrap/errors.hpp"

namespace looptrap {

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 digest failed");
  }
  std::string out;
  out.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", md[i]);
    out += buf;
  }
  return out;
}

}  // namespace looptrap
