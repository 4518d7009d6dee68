// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <vector>

#include "crd/kernels.hpp"
#include "crd/model.hpp"
#include "crd/tokenizer.hpp"

namespace crd {

namespace detail {

template <class T>
const T* bias_ptr(const Mat<T>& b) {
  return b.size() == 0 ? nullptr : b.data();
}

template <class T>
kernels::AttnShape attn_shape(const ModelConfig& c) {
  return {c.n_heads, c.n_kv_heads, c.d_head()};
}

// Input embedding for one token at an absolute position.
template <class T>
void embed_row(const ModelParams<T>& p, Token tok, std::size_t pos, T* out) {
  const std::size_t d = p.config.d_model;
  const T* e = p.tok_emb.data() + static_cast<std::size_t>(tok) * d;
  if (p.config.pos_encoding == PosEncoding::kLearnedAbsolute) {
    const T* pe = p.pos_emb.data() + pos * d;
    for (std::size_t i = 0; i < d; ++i) out[i] = e[i] + pe[i];
  } else {
    std::copy(e, e + d, out);
  }
}

// Pre-attention norm and Q/K/V projections for `rows` residual rows at the
// given positions. Rotary phases are applied to q and k in place.
template <class T>
void qkv_rows(const ModelParams<T>& p, std::size_t l, const T* x, std::size_t rows,
              std::span<const std::size_t> positions, T* a, T* xhat, T* rstd, T* q, T* k, T* v,
              bool want_q = true) {
  const auto& c = p.config;
  const auto& lp = p.layers[l];
  const std::size_t d = c.d_model;
  for (std::size_t r = 0; r < rows; ++r) {
    const T rs = kernels::norm_row(x + r * d, d, c.norm, static_cast<T>(c.norm_eps), lp.attn_norm_w.data(),
                                   bias_ptr(lp.attn_norm_b), a + r * d, xhat ? xhat + r * d : nullptr);
    if (rstd) rstd[r] = rs;
  }
  if (want_q) kernels::matmul_rows(a, rows, d, lp.wq.data(), c.q_dim(), q);
  kernels::matmul_rows(a, rows, d, lp.wk.data(), c.kv_dim(), k);
  kernels::matmul_rows(a, rows, d, lp.wv.data(), c.kv_dim(), v);
  if (c.pos_encoding == PosEncoding::kRotary) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (want_q) kernels::rope_row(q + r * c.q_dim(), c.n_heads, c.d_head(), positions[r], c.rope_base);
      kernels::rope_row(k + r * c.kv_dim(), c.n_kv_heads, c.d_head(), positions[r], c.rope_base);
    }
  }
}

// Buffers the tape keeps for the post-attention half of a block.
template <class T>
struct PostAttnBuffers {
  T* x_mid = nullptr;   // [rows x d]
  T* xhat2 = nullptr;   // [rows x d]
  T* b = nullptr;       // [rows x d]
  T* rstd2 = nullptr;   // [rows]
  T* u1 = nullptr;      // [rows x f]
  T* u3 = nullptr;      // [rows x f]
  T* act = nullptr;     // [rows x f]
};

// x <- x + att_out Wo; x <- x + FFN(norm(x)). x is updated in place.
template <class T>
void post_attention_rows(const ModelParams<T>& p, std::size_t l, T* x, const T* att_out, std::size_t rows,
                         const PostAttnBuffers<T>& buf) {
  const auto& c = p.config;
  const auto& lp = p.layers[l];
  const std::size_t d = c.d_model;
  const std::size_t f = c.ffn_dim();
  std::vector<T> tmp(rows * std::max(d, f));
  kernels::matmul_rows(att_out, rows, c.q_dim(), lp.wo.data(), d, tmp.data());
  for (std::size_t i = 0; i < rows * d; ++i) x[i] += tmp[i];
  if (buf.x_mid) std::copy(x, x + rows * d, buf.x_mid);

  for (std::size_t r = 0; r < rows; ++r) {
    const T rs = kernels::norm_row(x + r * d, d, c.norm, static_cast<T>(c.norm_eps), lp.ffn_norm_w.data(),
                                   bias_ptr(lp.ffn_norm_b), buf.b + r * d,
                                   buf.xhat2 ? buf.xhat2 + r * d : nullptr);
    if (buf.rstd2) buf.rstd2[r] = rs;
  }
  kernels::matmul_rows(buf.b, rows, d, lp.w1.data(), f, buf.u1);
  if (c.activation == Activation::kSwiGlu) {
    kernels::matmul_rows(buf.b, rows, d, lp.w3.data(), f, buf.u3);
    for (std::size_t i = 0; i < rows * f; ++i) buf.act[i] = kernels::silu(buf.u1[i]) * buf.u3[i];
  } else {
    for (std::size_t i = 0; i < rows * f; ++i) buf.act[i] = kernels::gelu(buf.u1[i]);
  }
  kernels::matmul_rows(buf.act, rows, f, lp.w2.data(), d, tmp.data());
  for (std::size_t i = 0; i < rows * d; ++i) x[i] += tmp[i];
}

// Final norm and LM head.
template <class T>
void head_rows(const ModelParams<T>& p, const T* x, std::size_t rows, T* y, T* xhat, T* rstd, T* logits) {
  const auto& c = p.config;
  const std::size_t d = c.d_model;
  for (std::size_t r = 0; r < rows; ++r) {
    const T rs = kernels::norm_row(x + r * d, d, c.norm, static_cast<T>(c.norm_eps), p.final_norm_w.data(),
                                   bias_ptr(p.final_norm_b), y + r * d, xhat ? xhat + r * d : nullptr);
    if (rstd) rstd[r] = rs;
  }
  kernels::matmul_rows(y, rows, d, p.lm_head.data(), c.vocab_size, logits);
}

template <class T>
void check_tokens(const ModelConfig& c, std::span<const Token> tokens) {
  require(!tokens.empty(), ErrorKind::kLength, "empty token sequence");
  require(tokens.size() <= c.max_context, ErrorKind::kLength,
          "sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_context " +
              std::to_string(c.max_context));
  for (Token t : tokens) {
    require(t < c.vocab_size, ErrorKind::kVocab,
            "token id " + std::to_string(t) + " >= vocab size " + std::to_string(c.vocab_size));
  }
}

}  // namespace detail

template <class T>
struct LayerTape {
  std::vector<T> x_in;   // [T x d] residual entering the block
  std::vector<T> xhat1, a, rstd1;
  std::vector<T> q, k, v;  // q, k after rotary
  std::vector<T> att_w;    // row i holds n_heads x (i + 1) weights at offset n_heads * i(i+1)/2
  std::vector<T> att_out;  // [T x q_dim]
  std::vector<T> x_mid;
  std::vector<T> xhat2, b, rstd2;
  std::vector<T> u1, u3, act;
};

// Every activation of one full-sequence pass; consumed by backprop.
template <class T>
struct SequenceTape {
  TokenSeq tokens;
  std::vector<LayerTape<T>> layers;
  std::vector<T> x_final, xhatf, y, rstdf;
  Mat<T> logits;  // [T x V]
};

// Full-sequence causal pass. The residual entering layer l for every position
// is recorded in tape.layers[l].x_in.
template <class T>
void forward_sequence(const ModelParams<T>& p, std::span<const Token> tokens, SequenceTape<T>& tape) {
  const auto& c = p.config;
  detail::check_tokens<T>(c, tokens);
  const std::size_t n = tokens.size();
  const std::size_t d = c.d_model;
  const std::size_t f = c.ffn_dim();
  const auto shape = detail::attn_shape<T>(c);

  tape.tokens.assign(tokens.begin(), tokens.end());
  tape.layers.resize(c.n_layers);
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;

  std::vector<T> x(n * d);
  for (std::size_t i = 0; i < n; ++i) detail::embed_row(p, tokens[i], i, x.data() + i * d);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto& lt = tape.layers[l];
    lt.x_in = x;
    lt.xhat1.resize(n * d);
    lt.a.resize(n * d);
    lt.rstd1.resize(n);
    lt.q.resize(n * c.q_dim());
    lt.k.resize(n * c.kv_dim());
    lt.v.resize(n * c.kv_dim());
    detail::qkv_rows(p, l, x.data(), n, positions, lt.a.data(), lt.xhat1.data(), lt.rstd1.data(), lt.q.data(),
                     lt.k.data(), lt.v.data());

    lt.att_w.resize(c.n_heads * n * (n + 1) / 2);
    lt.att_out.resize(n * c.q_dim());
    for (std::size_t i = 0; i < n; ++i) {
      kernels::attend_row(lt.q.data() + i * c.q_dim(), lt.k.data(), lt.v.data(), i + 1, shape,
                          lt.att_out.data() + i * c.q_dim(), lt.att_w.data() + c.n_heads * i * (i + 1) / 2);
    }

    lt.x_mid.resize(n * d);
    lt.xhat2.resize(n * d);
    lt.b.resize(n * d);
    lt.rstd2.resize(n);
    lt.u1.resize(n * f);
    lt.u3.resize(c.activation == Activation::kSwiGlu ? n * f : 0);
    lt.act.resize(n * f);
    detail::PostAttnBuffers<T> buf{lt.x_mid.data(), lt.xhat2.data(), lt.b.data(), lt.rstd2.data(),
                                   lt.u1.data(),    lt.u3.empty() ? nullptr : lt.u3.data(), lt.act.data()};
    detail::post_attention_rows(p, l, x.data(), lt.att_out.data(), n, buf);
  }

  tape.x_final = x;
  tape.xhatf.resize(n * d);
  tape.y.resize(n * d);
  tape.rstdf.resize(n);
  tape.logits.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c.vocab_size));
  detail::head_rows(p, x.data(), n, tape.y.data(), tape.xhatf.data(), tape.rstdf.data(), tape.logits.data());
}

// Logits [T x V]; row i predicts token i + 1.
template <class T>
Mat<T> forward_train(const ModelParams<T>& p, std::span<const Token> tokens) {
  SequenceTape<T> tape;
  forward_sequence(p, tokens, tape);
  return std::move(tape.logits);
}

// Sum of next-token negative log-likelihoods (natural log) over the T - 1
// predictions that follow the leading BOS.
template <class T>
double nll_loss(const Mat<T>& logits, std::span<const Token> tokens) {
  require(static_cast<std::size_t>(logits.rows()) == tokens.size(), ErrorKind::kShape,
          "logits rows (" + std::to_string(logits.rows()) + ") != sequence length (" +
              std::to_string(tokens.size()) + ")");
  const auto V = static_cast<std::size_t>(logits.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    require(tokens[i + 1] < V, ErrorKind::kVocab, "target id out of range");
    std::span<const T> row(logits.data() + i * V, V);
    loss -= kernels::log_softmax_at(row, tokens[i + 1]);
  }
  return loss;
}

}  // namespace crd
