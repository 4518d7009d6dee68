// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Synthetic workloads: a key-lookup task with a fixed code table (learnable
// rule, used as the toy evaluation set), a random key->value memorization
// benchmark (only learnable by seeing the pairs), and a filler-text corpus.

#include <array>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "crd/curation.hpp"
#include "crd/tokenizer.hpp"
#include "crd/train.hpp"

namespace crd {

inline constexpr std::array<const char*, 48> kWords = {
    "the",   "a",     "river", "stone", "quiet", "green", "over",  "under", "small", "house", "light", "cold",
    "north", "field", "with",  "some",  "many",  "old",   "new",   "bright", "road", "slow",  "fast",  "wind",
    "hill",  "deep",  "and",   "then",  "near",  "far",   "blue",  "paper", "glass", "warm",  "tree",  "sand",
    "long",  "short", "round", "high",  "low",   "open",  "shut",  "early", "late",  "dark",  "soft",  "hard"};

inline std::string filler_sentence(std::mt19937_64& rng, std::size_t min_words, std::size_t max_words) {
  std::uniform_int_distribution<std::size_t> n(min_words, max_words);
  std::uniform_int_distribution<std::size_t> w(0, kWords.size() - 1);
  std::string s;
  const std::size_t count = n(rng);
  for (std::size_t i = 0; i < count; ++i) {
    if (i) s.push_back(' ');
    s += kWords[w(rng)];
  }
  return s;
}

inline std::string random_string(std::mt19937_64& rng, std::size_t len, std::string_view alphabet) {
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::string s(len, ' ');
  for (auto& c : s) c = alphabet[pick(rng)];
  return s;
}

// Code table: letter -> 3-character code, fixed by a seed.
struct LookupTask {
  std::array<std::string, 26> codes;
  std::size_t min_words = 2, max_words = 6;  // filler before the question

  explicit LookupTask(std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    for (auto& c : codes) c = random_string(rng, 3, "ABCDEFGHJKLMNPQRSTUVWXYZ23456789");
  }

  BenchmarkItem item(std::mt19937_64& rng, std::string id) const {
    std::uniform_int_distribution<int> key(0, 25);
    const int k = key(rng);
    const std::string prompt = filler_sentence(rng, min_words, max_words) + ". code for " + static_cast<char>('a' + k) + "?";
    return {std::move(id), prompt, codes[static_cast<std::size_t>(k)]};
  }

  PlainBenchmark benchmark(std::size_t n, std::uint64_t seed) const {
    PlainBenchmark b;
    b.task = "toy-lookup";
    b.scoring = "normalized_exact_match";
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
      std::string id = std::to_string(i);
      if (id.size() < 4) id.insert(0, 4 - id.size(), '0');
      b.items.push_back(item(rng, "toy-" + id));
    }
    return b;
  }
};

// Training sequence for a question/answer pair: BOS prompt answer EOS.
inline TokenSeq qa_sequence(std::string_view prompt, std::string_view answer) {
  TokenSeq t = encode_text(prompt);
  for (unsigned char c : answer) t.push_back(c);
  t.push_back(kEos);
  return t;
}

// Random key -> value pairs; nothing about a value is inferable from its key.
inline PlainBenchmark memorization_benchmark(std::size_t n, std::uint64_t seed) {
  PlainBenchmark b;
  b.task = "kv-memorization";
  b.scoring = "exact_match";
  std::mt19937_64 rng(seed);
  std::set<std::string> keys;
  while (b.items.size() < n) {
    std::string key = random_string(rng, 4, "abcdefghijklmnopqrstuvwxyz");
    if (!keys.insert(key).second) continue;
    std::string value = random_string(rng, 4, "abcdefghijklmnopqrstuvwxyz0123456789");
    b.items.push_back({"kv-" + std::to_string(b.items.size()), "lookup " + key + ":", value});
  }
  return b;
}

// Filler-text corpus, one sentence per training sequence.
inline std::vector<TokenSeq> filler_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenSeq> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    TokenSeq t = encode_text(filler_sentence(rng, 4, 10) + ".");
    t.push_back(kEos);
    out.push_back(std::move(t));
  }
  return out;
}

// Chops an arbitrary byte string into BOS-prefixed training sequences.
inline std::vector<TokenSeq> bytes_as_sequences(std::span<const std::uint8_t> bytes, std::size_t max_len) {
  std::vector<TokenSeq> out;
  const std::size_t chunk = max_len - 1;
  for (std::size_t off = 0; off < bytes.size(); off += chunk) {
    TokenSeq t{kBos};
    const std::size_t end = std::min(bytes.size(), off + chunk);
    for (std::size_t i = off; i < end; ++i) t.push_back(bytes[i]);
    out.push_back(std::move(t));
  }
  return out;
}

struct TrainLog {
  std::vector<double> losses;
  double final_loss() const { return losses.empty() ? 0.0 : losses.back(); }
};

// Runs `steps` optimizer steps; next_batch(step) returns the batch.
inline TrainLog train_loop(ModelParams<float>& p, std::size_t steps, const OptimizerOptions& opt,
                           const std::function<std::vector<TokenSeq>(std::size_t)>& next_batch) {
  TrainLog log;
  Trainer<float> trainer(p, opt);
  for (std::size_t s = 0; s < steps; ++s) {
    const auto batch = next_batch(s);
    log.losses.push_back(trainer.step(batch));
  }
  return log;
}

// Trains a model on freshly drawn lookup items.
inline TrainLog train_lookup_model(ModelParams<float>& p, const LookupTask& task, std::size_t steps,
                                   std::size_t batch, double lr, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  OptimizerOptions opt;
  opt.learning_rate = lr;
  return train_loop(p, steps, opt, [&](std::size_t) {
    std::vector<TokenSeq> b;
    for (std::size_t i = 0; i < batch; ++i) {
      const auto it = task.item(rng, "");
      b.push_back(qa_sequence(it.prompt, it.answer));
    }
    return b;
  });
}

// Mean per-sequence NLL over held-out sequences.
inline double mean_sequence_loss(const ModelParams<float>& p, std::span<const TokenSeq> seqs) {
  double s = 0.0;
  for (const auto& t : seqs) s += nll_loss(forward_train(p, t), t);
  return seqs.empty() ? 0.0 : s / static_cast<double>(seqs.size());
}

}  // namespace crd
