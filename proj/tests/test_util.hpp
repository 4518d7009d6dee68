// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <random>
#include <string>

#include "crd/common.hpp"
#include "crd/model.hpp"
#include "crd/tokenizer.hpp"

namespace crd::testing {

inline ModelConfig small_config(std::size_t layers = 2, std::size_t d = 16, std::size_t heads = 2,
                                std::size_t kv_heads = 2, std::uint64_t seed = 7) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = heads;
  c.n_kv_heads = kv_heads;
  c.max_context = 64;
  c.seed = seed;
  return c;
}

inline std::string random_text(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len,
                               std::string_view alphabet = "abcdefghijklmnopqrstuvwxyz ") {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::string s(len(rng), ' ');
  for (auto& ch : s) ch = alphabet[pick(rng)];
  return s;
}

inline TokenSeq random_prompt(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len) {
  return encode_text(random_text(rng, min_len, max_len));
}

// Kind of the crd::Error thrown by f, or nullopt when nothing is thrown.
template <class F>
std::optional<ErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace crd::testing
