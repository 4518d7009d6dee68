// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "crd/forward.hpp"

namespace crd {

namespace detail {

template <class T>
using RowMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstRowMap = Eigen::Map<const Mat<T>>;

template <class T>
ConstRowMap<T> cmap(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return ConstRowMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
RowMap<T> map(std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return RowMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Backprop through norm rows. dy is [rows x d]; dx is overwritten.
template <class T>
void norm_backward(NormKind kind, const std::vector<T>& xhat, const std::vector<T>& rstd, const std::vector<T>& dy,
                   const Mat<T>& gain, std::size_t rows, std::size_t d, Mat<T>& dgain, Mat<T>* dbias,
                   std::vector<T>& dx) {
  dx.assign(rows * d, T(0));
  std::vector<T> dxh(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xh = xhat.data() + r * d;
    const T* g = dy.data() + r * d;
    T mean_dxh = T(0), mean_dxh_xh = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      dgain(0, static_cast<Eigen::Index>(i)) += g[i] * xh[i];
      if (dbias) (*dbias)(0, static_cast<Eigen::Index>(i)) += g[i];
      dxh[i] = g[i] * gain(0, static_cast<Eigen::Index>(i));
      mean_dxh += dxh[i];
      mean_dxh_xh += dxh[i] * xh[i];
    }
    mean_dxh /= static_cast<T>(d);
    mean_dxh_xh /= static_cast<T>(d);
    if (kind == NormKind::kRms) mean_dxh = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      dx[r * d + i] = rstd[r] * (dxh[i] - mean_dxh - xh[i] * mean_dxh_xh);
    }
  }
}

}  // namespace detail

// Sums d(loss)/d(param) for one sequence into grads, where loss is the summed
// next-token NLL scaled by `scale`. Returns the unscaled loss.
template <class T>
double accumulate_gradients(const ModelParams<T>& p, std::span<const Token> tokens, T scale, ModelParams<T>& grads) {
  using detail::cmap;
  using detail::map;
  const auto& c = p.config;
  SequenceTape<T> tape;
  forward_sequence(p, tokens, tape);
  const std::size_t n = tokens.size();
  const std::size_t d = c.d_model;
  const std::size_t V = c.vocab_size;
  const std::size_t f = c.ffn_dim();
  const std::size_t qd = c.q_dim();
  const std::size_t kvd = c.kv_dim();
  const std::size_t dh = c.d_head();
  const std::size_t group = c.n_heads / c.n_kv_heads;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

  // dlogits = softmax - onehot(target), zero on the last row.
  double loss = 0.0;
  std::vector<T> dlogits(n * V, T(0));
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const T* row = tape.logits.data() + i * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const std::size_t target = tokens[i + 1];
    loss -= static_cast<double>(row[target]) - mx - std::log(sum);
    for (std::size_t j = 0; j < V; ++j) {
      dlogits[i * V + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - mx) / sum) * scale;
    }
    dlogits[i * V + target] -= scale;
  }

  // LM head and final norm.
  grads.lm_head.noalias() += cmap(tape.y, n, d).transpose() * cmap(dlogits, n, V);
  std::vector<T> dy(n * d);
  map(dy, n, d).noalias() = cmap(dlogits, n, V) * p.lm_head.transpose();
  std::vector<T> dx;
  detail::norm_backward(c.norm, tape.xhatf, tape.rstdf, dy, p.final_norm_w, n, d, grads.final_norm_w,
                        grads.final_norm_b.size() ? &grads.final_norm_b : nullptr, dx);

  std::vector<T> dnorm;
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& lp = p.layers[li];
    auto& lg = grads.layers[li];
    const auto& lt = tape.layers[li];

    // Feed-forward half: x_out = x_mid + W2(act(norm(x_mid))).
    std::vector<T> dact(n * f);
    lg.w2.noalias() += cmap(lt.act, n, f).transpose() * cmap(dx, n, d);
    map(dact, n, f).noalias() = cmap(dx, n, d) * lp.w2.transpose();
    std::vector<T> du1(n * f), du3;
    if (c.activation == Activation::kSwiGlu) {
      du3.resize(n * f);
      for (std::size_t i = 0; i < n * f; ++i) {
        du3[i] = dact[i] * kernels::silu(lt.u1[i]);
        du1[i] = dact[i] * lt.u3[i] * kernels::silu_grad(lt.u1[i]);
      }
    } else {
      for (std::size_t i = 0; i < n * f; ++i) du1[i] = dact[i] * kernels::gelu_grad(lt.u1[i]);
    }
    lg.w1.noalias() += cmap(lt.b, n, d).transpose() * cmap(du1, n, f);
    std::vector<T> db(n * d);
    map(db, n, d).noalias() = cmap(du1, n, f) * lp.w1.transpose();
    if (c.activation == Activation::kSwiGlu) {
      lg.w3.noalias() += cmap(lt.b, n, d).transpose() * cmap(du3, n, f);
      map(db, n, d).noalias() += cmap(du3, n, f) * lp.w3.transpose();
    }
    detail::norm_backward(c.norm, lt.xhat2, lt.rstd2, db, lp.ffn_norm_w, n, d, lg.ffn_norm_w,
                          lg.ffn_norm_b.size() ? &lg.ffn_norm_b : nullptr, dnorm);
    for (std::size_t i = 0; i < n * d; ++i) dx[i] += dnorm[i];  // now d(x_mid)

    // Attention half: x_mid = x_in + Wo(attn(norm(x_in))).
    lg.wo.noalias() += cmap(lt.att_out, n, qd).transpose() * cmap(dx, n, d);
    std::vector<T> datt(n * qd);
    map(datt, n, qd).noalias() = cmap(dx, n, d) * lp.wo.transpose();

    std::vector<T> dq(n * qd, T(0)), dk(n * kvd, T(0)), dv(n * kvd, T(0));
    std::vector<T> dw;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t m = i + 1;
      const T* wrow = lt.att_w.data() + c.n_heads * i * (i + 1) / 2;
      dw.resize(m);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const std::size_t g = h / group;
        const T* w = wrow + h * m;
        const T* go = datt.data() + i * qd + h * dh;
        T wdot = T(0);
        for (std::size_t j = 0; j < m; ++j) {
          const T* vj = lt.v.data() + j * kvd + g * dh;
          dw[j] = kernels::dot(go, vj, dh);
          wdot += w[j] * dw[j];
          T* dvj = dv.data() + j * kvd + g * dh;
          for (std::size_t e = 0; e < dh; ++e) dvj[e] += w[j] * go[e];
        }
        const T* qh = lt.q.data() + i * qd + h * dh;
        T* dqh = dq.data() + i * qd + h * dh;
        for (std::size_t j = 0; j < m; ++j) {
          const T ds = w[j] * (dw[j] - wdot) * att_scale;
          const T* kj = lt.k.data() + j * kvd + g * dh;
          T* dkj = dk.data() + j * kvd + g * dh;
          for (std::size_t e = 0; e < dh; ++e) {
            dqh[e] += ds * kj[e];
            dkj[e] += ds * qh[e];
          }
        }
      }
    }
    if (c.pos_encoding == PosEncoding::kRotary) {
      for (std::size_t i = 0; i < n; ++i) {
        kernels::rope_row(dq.data() + i * qd, c.n_heads, dh, i, c.rope_base, -1.0);
        kernels::rope_row(dk.data() + i * kvd, c.n_kv_heads, dh, i, c.rope_base, -1.0);
      }
    }
    const auto A = cmap(lt.a, n, d);
    lg.wq.noalias() += A.transpose() * cmap(dq, n, qd);
    lg.wk.noalias() += A.transpose() * cmap(dk, n, kvd);
    lg.wv.noalias() += A.transpose() * cmap(dv, n, kvd);
    std::vector<T> da(n * d);
    auto DA = map(da, n, d);
    DA.noalias() = cmap(dq, n, qd) * lp.wq.transpose();
    DA.noalias() += cmap(dk, n, kvd) * lp.wk.transpose();
    DA.noalias() += cmap(dv, n, kvd) * lp.wv.transpose();
    detail::norm_backward(c.norm, lt.xhat1, lt.rstd1, da, lp.attn_norm_w, n, d, lg.attn_norm_w,
                          lg.attn_norm_b.size() ? &lg.attn_norm_b : nullptr, dnorm);
    for (std::size_t i = 0; i < n * d; ++i) dx[i] += dnorm[i];  // now d(x_in)
  }

  for (std::size_t i = 0; i < n; ++i) {
    grads.tok_emb.row(static_cast<Eigen::Index>(tokens[i])) +=
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(dx.data() + i * d, static_cast<Eigen::Index>(d));
    if (c.pos_encoding == PosEncoding::kLearnedAbsolute) {
      grads.pos_emb.row(static_cast<Eigen::Index>(i)) +=
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(dx.data() + i * d, static_cast<Eigen::Index>(d));
    }
  }
  return loss;
}

template <class T>
struct LossAndGradients {
  double loss = 0.0;  // mean over the batch of per-sequence summed NLL
  ModelParams<T> grads;
};

template <class T>
LossAndGradients<T> loss_and_gradients(const ModelParams<T>& p, std::span<const TokenSeq> batch) {
  require(!batch.empty(), ErrorKind::kParameter, "empty training batch");
  LossAndGradients<T> out{0.0, zeros_like<T>(p.config)};
  const T scale = T(1) / static_cast<T>(batch.size());
  for (const auto& seq : batch) out.loss += accumulate_gradients(p, seq, scale, out.grads);
  out.loss /= static_cast<double>(batch.size());
  require(std::isfinite(out.loss), ErrorKind::kDivergence, "non-finite training loss");
  return out;
}

template <class T>
struct TrainStepResult {
  ModelParams<T> params;
  double loss = 0.0;
};

namespace detail {

// Rescales the gradient set so its global L2 norm is at most max_norm.
template <class T>
void clip_global_norm(std::span<Mat<T>*> grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto* g : grads) sq += static_cast<double>(g->squaredNorm());
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    for (auto* g : grads) *g *= static_cast<T>(max_norm / norm);
  }
}

}  // namespace detail

// One plain SGD step on the mean per-sequence NLL, with the gradient clipped
// to a global norm of clip_norm (0 disables clipping).
template <class T>
TrainStepResult<T> train_step(const ModelParams<T>& p, std::span<const TokenSeq> batch, T learning_rate,
                              double clip_norm = 1.0) {
  auto lg = loss_and_gradients(p, batch);
  TrainStepResult<T> out{p, lg.loss};
  if (learning_rate != T(0)) {
    std::vector<Mat<T>*> gs;
    lg.grads.for_each([&](std::string_view, Mat<T>& g) { gs.push_back(&g); });
    detail::clip_global_norm<T>(gs, clip_norm);
    std::size_t i = 0;
    out.params.for_each([&](std::string_view, Mat<T>& w) { w -= learning_rate * *gs[i++]; });
  }
  return out;
}

enum class OptimizerKind { kSgd, kMomentum, kAdam };

struct OptimizerOptions {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; 0 disables
};

// Stateful optimizer for longer training runs (momentum/Adam state lives here).
template <class T>
class Trainer {
 public:
  Trainer(ModelParams<T>& params, OptimizerOptions opt) : params_(params), opt_(opt) {
    m_ = zeros_like<T>(params.config);
    v_ = zeros_like<T>(params.config);
  }

  double step(std::span<const TokenSeq> batch) {
    auto lg = loss_and_gradients(params_, batch);
    std::vector<Mat<T>*> g, m, v;
    lg.grads.for_each([&](std::string_view, Mat<T>& x) { g.push_back(&x); });
    m_.for_each([&](std::string_view, Mat<T>& x) { m.push_back(&x); });
    v_.for_each([&](std::string_view, Mat<T>& x) { v.push_back(&x); });
    detail::clip_global_norm<T>(g, opt_.clip_norm);
    ++t_;
    const T lr = static_cast<T>(opt_.learning_rate);
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    std::size_t i = 0;
    params_.for_each([&](std::string_view, Mat<T>& w) {
      Mat<T>& gi = *g[i];
      switch (opt_.kind) {
        case OptimizerKind::kSgd:
          w -= lr * gi;
          break;
        case OptimizerKind::kMomentum:
          *m[i] = static_cast<T>(opt_.momentum) * *m[i] + gi;
          w -= lr * *m[i];
          break;
        case OptimizerKind::kAdam: {
          *m[i] = static_cast<T>(opt_.beta1) * *m[i] + static_cast<T>(1.0 - opt_.beta1) * gi;
          *v[i] = static_cast<T>(opt_.beta2) * *v[i] + static_cast<T>(1.0 - opt_.beta2) * gi.cwiseProduct(gi);
          const T s1 = static_cast<T>(1.0 / bc1);
          const T s2 = static_cast<T>(1.0 / bc2);
          const T eps = static_cast<T>(opt_.eps);
          w.array() -= lr * (m[i]->array() * s1) / ((v[i]->array() * s2).sqrt() + eps);
          break;
        }
      }
      ++i;
    });
    return lg.loss;
  }

  std::size_t steps() const { return t_; }

 private:
  ModelParams<T>& params_;
  OptimizerOptions opt_;
  ModelParams<T> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace crd
