// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "crd/forward.hpp"

namespace crd {

template <class T>
struct LayerCache {
  std::vector<std::uint32_t> positions;  // ascending absolute positions
  std::vector<T> keys;                   // [positions.size() x kv_dim], rotary applied
  std::vector<T> values;                 // [positions.size() x kv_dim]

  std::size_t size() const { return positions.size(); }
  bool operator==(const LayerCache&) const = default;
};

// Keys and values for the prompt (and any decoded continuation) per layer.
// A cache is a single-session object: decode_step mutates it.
template <class T>
struct KVCache {
  std::size_t prompt_length = 0;
  std::size_t next_position = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_head = 0;
  std::vector<LayerCache<T>> layers;

  std::size_t kv_dim() const { return n_kv_heads * d_head; }
  bool operator==(const KVCache&) const = default;

  // Index lists strictly ascending, the last prompt position present in every
  // layer, and payload sizes consistent with the index lists.
  void validate() const {
    require(prompt_length >= 1, ErrorKind::kShape, "cache has no prompt positions");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& lc = layers[l];
      const std::string where = "layer " + std::to_string(l) + ": ";
      require(lc.keys.size() == lc.size() * kv_dim() && lc.values.size() == lc.size() * kv_dim(),
              ErrorKind::kShape, where + "payload size does not match index list");
      for (std::size_t i = 1; i < lc.size(); ++i) {
        require(lc.positions[i - 1] < lc.positions[i], ErrorKind::kShape,
                where + "retained positions not strictly ascending");
      }
      bool has_last = false;
      for (auto pos : lc.positions) has_last = has_last || pos == prompt_length - 1;
      require(has_last, ErrorKind::kShape, where + "final prompt position not retained");
    }
  }

  template <class U>
  KVCache<U> cast() const {
    KVCache<U> out;
    out.prompt_length = prompt_length;
    out.next_position = next_position;
    out.n_kv_heads = n_kv_heads;
    out.d_head = d_head;
    out.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      out.layers[l].positions = layers[l].positions;
      out.layers[l].keys.assign(layers[l].keys.begin(), layers[l].keys.end());
      out.layers[l].values.assign(layers[l].values.begin(), layers[l].values.end());
    }
    return out;
  }
};

template <class T>
struct PenultimateState {
  std::vector<T> h;  // residual entering the last layer at the final prompt position
  bool operator==(const PenultimateState&) const = default;
};

template <class T>
struct PrefillResult {
  KVCache<T> cache;
  PenultimateState<T> penultimate;
  // attention_mass[l][j]: softmax weight the final prompt query puts on
  // position j at layer l, summed over heads. Used as the compression score.
  std::vector<std::vector<T>> attention_mass;
};

template <class T>
struct DecodeResult {
  Token token = 0;
  std::vector<T> logits;
};

// Runs the prompt once, keeping K/V for every layer and the penultimate state.
// The last layer only needs its K/V (and the final query for scoring); its
// feed-forward half and the LM head are never evaluated here.
template <class T>
PrefillResult<T> prefill(const ModelParams<T>& p, std::span<const Token> prompt) {
  const auto& c = p.config;
  require(!prompt.empty(), ErrorKind::kLength, "prefill needs a non-empty prompt");
  detail::check_tokens<T>(c, prompt);
  const std::size_t n = prompt.size();
  const std::size_t d = c.d_model;
  const std::size_t f = c.ffn_dim();
  const auto shape = detail::attn_shape<T>(c);

  PrefillResult<T> out;
  out.cache.prompt_length = n;
  out.cache.next_position = n;
  out.cache.n_kv_heads = c.n_kv_heads;
  out.cache.d_head = c.d_head();
  out.cache.layers.resize(c.n_layers);
  out.attention_mass.assign(c.n_layers, std::vector<T>(n, T(0)));

  std::vector<std::size_t> positions(n);
  std::vector<std::uint32_t> pos32(n);
  for (std::size_t i = 0; i < n; ++i) {
    positions[i] = i;
    pos32[i] = static_cast<std::uint32_t>(i);
  }

  std::vector<T> x(n * d);
  for (std::size_t i = 0; i < n; ++i) detail::embed_row(p, prompt[i], i, x.data() + i * d);

  std::vector<T> a(n * d), q(n * c.q_dim()), att(n * c.q_dim());
  std::vector<T> b(n * d), u1(n * f), u3(c.activation == Activation::kSwiGlu ? n * f : 0), act(n * f);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto& lc = out.cache.layers[l];
    lc.positions = pos32;
    lc.keys.resize(n * c.kv_dim());
    lc.values.resize(n * c.kv_dim());
    const bool last = l + 1 == c.n_layers;
    detail::qkv_rows(p, l, x.data(), n, positions, a.data(), static_cast<T*>(nullptr), static_cast<T*>(nullptr),
                     q.data(), lc.keys.data(), lc.values.data(), !last);
    if (last) {
      // Final query only, for the attention-mass score.
      std::vector<T> qlast(c.q_dim()), olast(c.q_dim());
      kernels::matmul_rows(a.data() + (n - 1) * d, 1, d, p.layers[l].wq.data(), c.q_dim(), qlast.data());
      if (c.pos_encoding == PosEncoding::kRotary) {
        kernels::rope_row(qlast.data(), c.n_heads, c.d_head(), n - 1, c.rope_base);
      }
      kernels::attend_row(qlast.data(), lc.keys.data(), lc.values.data(), n, shape, olast.data(),
                          static_cast<T*>(nullptr), out.attention_mass[l].data());
      out.penultimate.h.assign(x.begin() + static_cast<std::ptrdiff_t>((n - 1) * d), x.end());
      break;
    }
    for (std::size_t i = 0; i < n; ++i) {
      kernels::attend_row(q.data() + i * c.q_dim(), lc.keys.data(), lc.values.data(), i + 1, shape,
                          att.data() + i * c.q_dim(), static_cast<T*>(nullptr),
                          i + 1 == n ? out.attention_mass[l].data() : static_cast<T*>(nullptr));
    }
    detail::PostAttnBuffers<T> buf{nullptr, nullptr, b.data(), nullptr, u1.data(),
                                   u3.empty() ? nullptr : u3.data(), act.data()};
    detail::post_attention_rows(p, l, x.data(), att.data(), n, buf);
  }
  return out;
}

namespace detail {

template <class T>
DecodeResult<T> finish_row(const ModelParams<T>& p, const T* x) {
  const auto& c = p.config;
  DecodeResult<T> r;
  std::vector<T> y(c.d_model);
  r.logits.resize(c.vocab_size);
  head_rows(p, x, 1, y.data(), static_cast<T*>(nullptr), static_cast<T*>(nullptr), r.logits.data());
  r.token = static_cast<Token>(kernels::argmax<T>(r.logits));
  return r;
}

template <class T>
void post_attention_single(const ModelParams<T>& p, std::size_t l, T* x, const T* att) {
  const auto& c = p.config;
  const std::size_t f = c.ffn_dim();
  std::vector<T> b(c.d_model), u1(f), u3(c.activation == Activation::kSwiGlu ? f : 0), act(f);
  PostAttnBuffers<T> buf{nullptr, nullptr, b.data(), nullptr, u1.data(), u3.empty() ? nullptr : u3.data(),
                         act.data()};
  post_attention_rows(p, l, x, att, 1, buf);
}

}  // namespace detail

// First continuation token from the released pair: the last layer's query is
// computed from h, attends over the last layer's cache, and the rest of the
// block plus the LM head produce the logits. The cache is not extended.
template <class T>
DecodeResult<T> decode_first(const ModelParams<T>& p, const KVCache<T>& cache, std::span<const T> h) {
  const auto& c = p.config;
  require(h.size() == c.d_model, ErrorKind::kShape,
          "penultimate state has " + std::to_string(h.size()) + " values, expected d_model " +
              std::to_string(c.d_model));
  require(cache.layers.size() == c.n_layers && cache.prompt_length >= 1, ErrorKind::kShape,
          "cache does not match model layers");
  require(cache.kv_dim() == c.kv_dim(), ErrorKind::kShape, "cache kv width does not match model");
  const std::size_t l = c.n_layers - 1;
  const auto& lc = cache.layers[l];
  require(lc.size() >= 1, ErrorKind::kShape, "empty last-layer cache");

  std::vector<T> x(h.begin(), h.end());
  std::vector<T> a(c.d_model), q(c.q_dim()), att(c.q_dim());
  kernels::norm_row(x.data(), c.d_model, c.norm, static_cast<T>(c.norm_eps), p.layers[l].attn_norm_w.data(),
                    detail::bias_ptr(p.layers[l].attn_norm_b), a.data());
  kernels::matmul_rows(a.data(), 1, c.d_model, p.layers[l].wq.data(), c.q_dim(), q.data());
  if (c.pos_encoding == PosEncoding::kRotary) {
    kernels::rope_row(q.data(), c.n_heads, c.d_head(), cache.prompt_length - 1, c.rope_base);
  }
  // Attend only over prompt positions even if the cache was already extended.
  std::size_t n = 0;
  while (n < lc.size() && lc.positions[n] < cache.prompt_length) ++n;
  kernels::attend_row(q.data(), lc.keys.data(), lc.values.data(), n, detail::attn_shape<T>(c), att.data());
  detail::post_attention_single(p, l, x.data(), att.data());
  return detail::finish_row(p, x.data());
}

// Feeds prev_token at the next absolute position through every layer,
// appending its key/value to each layer's cache.
template <class T>
DecodeResult<T> decode_step(const ModelParams<T>& p, KVCache<T>& cache, Token prev_token) {
  const auto& c = p.config;
  require(prev_token < c.vocab_size, ErrorKind::kVocab, "token id out of range");
  require(cache.next_position < c.max_context, ErrorKind::kContextOverflow,
          "position " + std::to_string(cache.next_position) + " exceeds max_context " +
              std::to_string(c.max_context));
  require(cache.layers.size() == c.n_layers && cache.kv_dim() == c.kv_dim(), ErrorKind::kShape,
          "cache does not match model");
  const std::size_t pos = cache.next_position;
  const std::size_t kvd = c.kv_dim();
  const std::size_t positions[1] = {pos};

  std::vector<T> x(c.d_model);
  detail::embed_row(p, prev_token, pos, x.data());
  std::vector<T> a(c.d_model), q(c.q_dim()), k(kvd), v(kvd), att(c.q_dim());
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto& lc = cache.layers[l];
    detail::qkv_rows(p, l, x.data(), 1, std::span<const std::size_t>(positions, 1), a.data(),
                     static_cast<T*>(nullptr), static_cast<T*>(nullptr), q.data(), k.data(), v.data());
    lc.positions.push_back(static_cast<std::uint32_t>(pos));
    lc.keys.insert(lc.keys.end(), k.begin(), k.end());
    lc.values.insert(lc.values.end(), v.begin(), v.end());
    kernels::attend_row(q.data(), lc.keys.data(), lc.values.data(), lc.size(), detail::attn_shape<T>(c),
                        att.data());
    detail::post_attention_single(p, l, x.data(), att.data());
  }
  cache.next_position = pos + 1;
  return detail::finish_row(p, x.data());
}

struct GenerateOptions {
  std::size_t max_new = 16;
  Token stop_token = kEos;
  // 0 selects greedy decoding; otherwise softmax(logits / temperature) is
  // sampled with a generator seeded from `seed`.
  double temperature = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

template <class T>
class TokenPicker {
 public:
  explicit TokenPicker(const GenerateOptions& o) : temperature_(o.temperature), rng_(o.seed) {}

  Token pick(const DecodeResult<T>& r) {
    if (temperature_ <= 0.0) return r.token;
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : r.logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> w(r.logits.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = std::exp((static_cast<double>(r.logits[i]) - mx) / temperature_);
    }
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    return static_cast<Token>(dist(rng_));
  }

 private:
  double temperature_;
  std::mt19937_64 rng_;
};

}  // namespace detail

// Chains decode_first and decode_step. The stop token, when produced, is the
// last element of the result. The cache is taken by value and consumed.
template <class T>
TokenSeq generate(const ModelParams<T>& p, KVCache<T> cache, std::span<const T> h, const GenerateOptions& opt) {
  require(opt.max_new >= 1, ErrorKind::kParameter, "max_new must be >= 1");
  detail::TokenPicker<T> picker(opt);
  TokenSeq out;
  Token tok = picker.pick(decode_first(p, cache, h));
  out.push_back(tok);
  while (out.size() < opt.max_new && tok != opt.stop_token) {
    tok = picker.pick(decode_step(p, cache, tok));
    out.push_back(tok);
  }
  return out;
}

// Cache-free reference decoder: re-runs the full causal pass over the growing
// plaintext sequence for every new token.
template <class T>
TokenSeq generate_plaintext(const ModelParams<T>& p, std::span<const Token> prompt, const GenerateOptions& opt) {
  require(opt.max_new >= 1, ErrorKind::kParameter, "max_new must be >= 1");
  detail::TokenPicker<T> picker(opt);
  TokenSeq seq(prompt.begin(), prompt.end());
  TokenSeq out;
  const auto V = p.config.vocab_size;
  while (out.size() < opt.max_new) {
    require(seq.size() <= p.config.max_context, ErrorKind::kContextOverflow, "sequence exceeds max_context");
    const Mat<T> logits = forward_train(p, seq);
    DecodeResult<T> r;
    r.logits.assign(logits.data() + (seq.size() - 1) * V, logits.data() + seq.size() * V);
    r.token = static_cast<Token>(kernels::argmax<T>(r.logits));
    const Token tok = picker.pick(r);
    out.push_back(tok);
    if (tok == opt.stop_token) break;
    seq.push_back(tok);
  }
  return out;
}

}  // namespace crd
