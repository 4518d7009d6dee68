// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "crd/common.hpp"
#include "crd/tokenizer.hpp"

namespace crd {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class PosEncoding { kRotary, kLearnedAbsolute };
enum class NormKind { kRms, kLayer };
enum class Activation { kSwiGlu, kGelu };

inline std::string_view to_string(PosEncoding p) {
  return p == PosEncoding::kRotary ? "rotary" : "learned-absolute";
}
inline std::string_view to_string(NormKind n) { return n == NormKind::kRms ? "rms" : "layer"; }
inline std::string_view to_string(Activation a) {
  return a == Activation::kSwiGlu ? "swiglu" : "gelu";
}

inline PosEncoding parse_pos_encoding(std::string_view s) {
  if (s == "rotary") return PosEncoding::kRotary;
  if (s == "learned-absolute" || s == "learned") return PosEncoding::kLearnedAbsolute;
  fail(ErrorKind::kConfig, "unknown pos_encoding '" + std::string(s) + "'");
}
inline NormKind parse_norm(std::string_view s) {
  if (s == "rms") return NormKind::kRms;
  if (s == "layer") return NormKind::kLayer;
  fail(ErrorKind::kConfig, "unknown norm '" + std::string(s) + "'");
}
inline Activation parse_activation(std::string_view s) {
  if (s == "swiglu") return Activation::kSwiGlu;
  if (s == "gelu") return Activation::kGelu;
  fail(ErrorKind::kConfig, "unknown activation '" + std::string(s) + "'");
}

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 4;
  std::size_t vocab_size = kByteVocabSize;
  std::size_t max_context = 256;
  // 0 selects the activation-specific default (see ffn_dim()).
  std::size_t d_ff = 0;
  PosEncoding pos_encoding = PosEncoding::kRotary;
  NormKind norm = NormKind::kRms;
  Activation activation = Activation::kSwiGlu;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  std::uint64_t seed = 0;

  std::size_t d_head() const { return n_heads == 0 ? 0 : d_model / n_heads; }
  std::size_t q_dim() const { return n_heads * d_head(); }
  std::size_t kv_dim() const { return n_kv_heads * d_head(); }
  std::size_t ffn_dim() const {
    if (d_ff != 0) return d_ff;
    if (activation == Activation::kGelu) return 4 * d_model;
    return ((8 * d_model / 3) + 7) / 8 * 8;
  }

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    require(n_layers >= 1, ErrorKind::kConfig, "n_layers must be >= 1");
    require(d_model >= 1, ErrorKind::kConfig, "d_model must be >= 1");
    require(n_heads >= 1, ErrorKind::kConfig, "n_heads must be >= 1");
    require(d_model % n_heads == 0, ErrorKind::kConfig,
            "n_heads (" + std::to_string(n_heads) + ") must divide d_model (" +
                std::to_string(d_model) + ")");
    require(n_kv_heads >= 1 && n_heads % n_kv_heads == 0, ErrorKind::kConfig,
            "n_kv_heads must divide n_heads");
    require(vocab_size >= 4, ErrorKind::kConfig, "vocab_size must be >= 4");
    require(max_context >= 1, ErrorKind::kConfig, "max_context must be >= 1");
    require(pos_encoding != PosEncoding::kRotary || d_head() % 2 == 0, ErrorKind::kConfig,
            "rotary positions need an even d_head");
    require(norm_eps > 0.0, ErrorKind::kConfig, "norm_eps must be positive");
  }
};

// The micro-architecture used throughout the toolkit unless a config says otherwise.
inline ModelConfig default_config(bool gqa = false) {
  ModelConfig c;
  c.n_kv_heads = gqa ? 2 : 4;
  return c;
}

template <class T>
struct LayerParams {
  Mat<T> attn_norm_w, attn_norm_b;  // [1 x d]; bias only for layer norm
  Mat<T> wq;                        // [d x q_dim]
  Mat<T> wk, wv;                    // [d x kv_dim]
  Mat<T> wo;                        // [q_dim x d]
  Mat<T> ffn_norm_w, ffn_norm_b;
  Mat<T> w1;  // [d x f]
  Mat<T> w3;  // [d x f], swiglu gate partner; empty for gelu
  Mat<T> w2;  // [f x d]
};

template <class T>
struct ModelParams {
  ModelConfig config;
  Mat<T> tok_emb;  // [V x d]
  Mat<T> pos_emb;  // [T_max x d]; empty unless learned-absolute
  std::vector<LayerParams<T>> layers;
  Mat<T> final_norm_w, final_norm_b;
  Mat<T> lm_head;  // [d x V]

  // Visits every non-empty tensor in the fixed checkpoint order.
  template <class F>
  void for_each(F&& f) {
    for_each_impl(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    for_each_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](std::string_view, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    out.tok_emb = tok_emb.template cast<U>();
    out.pos_emb = pos_emb.template cast<U>();
    out.final_norm_w = final_norm_w.template cast<U>();
    out.final_norm_b = final_norm_b.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    out.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& a = layers[l];
      auto& b = out.layers[l];
      b.attn_norm_w = a.attn_norm_w.template cast<U>();
      b.attn_norm_b = a.attn_norm_b.template cast<U>();
      b.wq = a.wq.template cast<U>();
      b.wk = a.wk.template cast<U>();
      b.wv = a.wv.template cast<U>();
      b.wo = a.wo.template cast<U>();
      b.ffn_norm_w = a.ffn_norm_w.template cast<U>();
      b.ffn_norm_b = a.ffn_norm_b.template cast<U>();
      b.w1 = a.w1.template cast<U>();
      b.w3 = a.w3.template cast<U>();
      b.w2 = a.w2.template cast<U>();
    }
    return out;
  }

 private:
  template <class Self, class F>
  static void for_each_impl(Self& self, F& f) {
    auto visit = [&](const std::string& name, auto& m) {
      if (m.size() != 0) f(std::string_view(name), m);
    };
    visit("tok_emb", self.tok_emb);
    visit("pos_emb", self.pos_emb);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& lp = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      visit(p + "attn_norm_w", lp.attn_norm_w);
      visit(p + "attn_norm_b", lp.attn_norm_b);
      visit(p + "wq", lp.wq);
      visit(p + "wk", lp.wk);
      visit(p + "wv", lp.wv);
      visit(p + "wo", lp.wo);
      visit(p + "ffn_norm_w", lp.ffn_norm_w);
      visit(p + "ffn_norm_b", lp.ffn_norm_b);
      visit(p + "w1", lp.w1);
      visit(p + "w3", lp.w3);
      visit(p + "w2", lp.w2);
    }
    visit("final_norm_w", self.final_norm_w);
    visit("final_norm_b", self.final_norm_b);
    visit("lm_head", self.lm_head);
  }
};

// Allocates zero tensors with the shapes dictated by config. Used for params
// and for gradient accumulators alike.
template <class T>
ModelParams<T> zeros_like(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto V = static_cast<Eigen::Index>(c.vocab_size);
  const auto q = static_cast<Eigen::Index>(c.q_dim());
  const auto kv = static_cast<Eigen::Index>(c.kv_dim());
  const auto f = static_cast<Eigen::Index>(c.ffn_dim());
  const bool layer_norm = c.norm == NormKind::kLayer;
  ModelParams<T> p;
  p.config = c;
  p.tok_emb = Mat<T>::Zero(V, d);
  if (c.pos_encoding == PosEncoding::kLearnedAbsolute) {
    p.pos_emb = Mat<T>::Zero(static_cast<Eigen::Index>(c.max_context), d);
  }
  p.layers.resize(c.n_layers);
  for (auto& l : p.layers) {
    l.attn_norm_w = Mat<T>::Zero(1, d);
    l.ffn_norm_w = Mat<T>::Zero(1, d);
    if (layer_norm) {
      l.attn_norm_b = Mat<T>::Zero(1, d);
      l.ffn_norm_b = Mat<T>::Zero(1, d);
    }
    l.wq = Mat<T>::Zero(d, q);
    l.wk = Mat<T>::Zero(d, kv);
    l.wv = Mat<T>::Zero(d, kv);
    l.wo = Mat<T>::Zero(q, d);
    l.w1 = Mat<T>::Zero(d, f);
    if (c.activation == Activation::kSwiGlu) l.w3 = Mat<T>::Zero(d, f);
    l.w2 = Mat<T>::Zero(f, d);
  }
  p.final_norm_w = Mat<T>::Zero(1, d);
  if (layer_norm) p.final_norm_b = Mat<T>::Zero(1, d);
  p.lm_head = Mat<T>::Zero(d, V);
  return p;
}

// Gaussian init with std 1/sqrt(d_model); norm gains start at one. Values are
// drawn in double so float and double models from one seed agree after rounding.
template <class T>
ModelParams<T> init_model(const ModelConfig& config) {
  ModelParams<T> p = zeros_like<T>(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config.d_model)));
  p.for_each([&](std::string_view name, Mat<T>& m) {
    const bool gain = name.ends_with("norm_w");
    const bool bias = name.ends_with("norm_b");
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (gain) {
        m.data()[i] = T(1);
      } else if (!bias) {
        m.data()[i] = static_cast<T>(normal(rng));
      }
    }
  });
  return p;
}

template <class T>
bool all_finite(const ModelParams<T>& p) {
  bool ok = true;
  p.for_each([&](std::string_view, const Mat<T>& m) { ok = ok && m.allFinite(); });
  return ok;
}

}  // namespace crd
