// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace crd {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three specials.
inline constexpr Token kBos = 256;
inline constexpr Token kEos = 257;
inline constexpr Token kPad = 258;
inline constexpr std::size_t kByteVocabSize = 259;

inline bool is_special(Token t) { return t >= 256; }

inline TokenSeq encode_text(std::string_view text, bool add_bos = true) {
  TokenSeq out;
  out.reserve(text.size() + 1);
  if (add_bos) out.push_back(kBos);
  for (unsigned char c : text) out.push_back(c);
  return out;
}

// Specials are dropped; decoding stops at nothing, callers truncate at EOS.
inline std::string decode_text(std::span<const Token> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens) {
    if (!is_special(t)) out.push_back(static_cast<char>(t));
  }
  return out;
}

}  // namespace crd
