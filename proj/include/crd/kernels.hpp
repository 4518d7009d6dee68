// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Row-wise forward kernels shared by the full-sequence pass and the cached
// decode pass. Every output element is accumulated in a fixed order that does
// not depend on how many rows are processed together, so a row computed in a
// batch is bit-identical to the same row computed alone.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "crd/model.hpp"

namespace crd::kernels {

// Y[r, :] = X[r, :] * W for r in [0, rows). W is row-major [in x out].
// Y[r, j] accumulates X[r, i] * W[i, j] for i = 0..in-1 in order.
template <class T>
void matmul_rows(const T* x, std::size_t rows, std::size_t in, const T* w, std::size_t out, T* y) {
  std::fill(y, y + rows * out, T(0));
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) {
    const T* x0 = x + (r + 0) * in;
    const T* x1 = x + (r + 1) * in;
    const T* x2 = x + (r + 2) * in;
    const T* x3 = x + (r + 3) * in;
    T* y0 = y + (r + 0) * out;
    T* y1 = y + (r + 1) * out;
    T* y2 = y + (r + 2) * out;
    T* y3 = y + (r + 3) * out;
    for (std::size_t i = 0; i < in; ++i) {
      const T* wi = w + i * out;
      const T a0 = x0[i], a1 = x1[i], a2 = x2[i], a3 = x3[i];
      for (std::size_t j = 0; j < out; ++j) {
        const T wij = wi[j];
        y0[j] += a0 * wij;
        y1[j] += a1 * wij;
        y2[j] += a2 * wij;
        y3[j] += a3 * wij;
      }
    }
  }
  for (; r < rows; ++r) {
    const T* xr = x + r * in;
    T* yr = y + r * out;
    for (std::size_t i = 0; i < in; ++i) {
      const T* wi = w + i * out;
      const T a = xr[i];
      for (std::size_t j = 0; j < out; ++j) yr[j] += a * wi[j];
    }
  }
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = T(0);
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Normalizes one row. xhat receives the pre-gain normalized values and the
// return value is the reciprocal standard deviation (both used by backprop).
template <class T>
T norm_row(const T* x, std::size_t d, NormKind kind, T eps, const T* gain, const T* bias, T* out,
           T* xhat = nullptr) {
  T mean = T(0);
  if (kind == NormKind::kLayer) {
    for (std::size_t i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<T>(d);
  }
  T ss = T(0);
  for (std::size_t i = 0; i < d; ++i) {
    const T c = x[i] - mean;
    ss += c * c;
  }
  const T rstd = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
  for (std::size_t i = 0; i < d; ++i) {
    const T xh = (x[i] - mean) * rstd;
    if (xhat) xhat[i] = xh;
    out[i] = xh * gain[i] + (bias ? bias[i] : T(0));
  }
  return rstd;
}

// Rotates interleaved pairs (2i, 2i+1) of every head by pos * base^(-2i/d_head).
// sign = -1 applies the inverse rotation.
template <class T>
void rope_row(T* v, std::size_t n_heads, std::size_t d_head, std::size_t pos, double base,
              double sign = 1.0) {
  for (std::size_t p = 0; p < d_head / 2; ++p) {
    const double inv_freq = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(d_head));
    const double angle = sign * static_cast<double>(pos) * inv_freq;
    const T c = static_cast<T>(std::cos(angle));
    const T s = static_cast<T>(std::sin(angle));
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* pair = v + h * d_head + 2 * p;
      const T a = pair[0], b = pair[1];
      pair[0] = a * c - b * s;
      pair[1] = a * s + b * c;
    }
  }
}

struct AttnShape {
  std::size_t n_heads;
  std::size_t n_kv_heads;
  std::size_t d_head;
  std::size_t kv_dim() const { return n_kv_heads * d_head; }
  std::size_t group() const { return n_heads / n_kv_heads; }
};

// Attends one query row (all heads) over n cached rows. keys/values are
// [n x kv_dim]. Query head h reads kv head h / group. If weights is non-null it
// receives the per-head softmax weights laid out [n_heads x n]; if mass is
// non-null the weights summed over heads are added into it ([n]).
template <class T>
void attend_row(const T* q, const T* keys, const T* values, std::size_t n, const AttnShape& s,
                T* out, T* weights = nullptr, T* mass = nullptr) {
  const std::size_t dh = s.d_head;
  const std::size_t kvd = s.kv_dim();
  const std::size_t group = s.group();
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> w(n);
  for (std::size_t h = 0; h < s.n_heads; ++h) {
    const std::size_t g = h / group;
    const T* qh = q + h * dh;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = dot(qh, keys + j * kvd + g * dh, dh) * scale;
      mx = std::max(mx, w[j]);
    }
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = std::exp(w[j] - mx);
      sum += w[j];
    }
    for (std::size_t j = 0; j < n; ++j) w[j] /= sum;
    T* oh = out + h * dh;
    std::fill(oh, oh + dh, T(0));
    for (std::size_t j = 0; j < n; ++j) {
      const T* vj = values + j * kvd + g * dh;
      const T wj = w[j];
      for (std::size_t e = 0; e < dh; ++e) oh[e] += wj * vj[e];
    }
    if (weights) std::copy(w.begin(), w.end(), weights + h * n);
    if (mass) {
      for (std::size_t j = 0; j < n; ++j) mass[j] += w[j];
    }
  }
}

template <class T>
T gelu(T x) {
  const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  const T k = static_cast<T>(0.7978845608028654);
  const T u = k * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = k * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T silu(T x) {
  return x * sigmoid(x);
}

template <class T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

// Lowest index wins ties.
template <class T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// log softmax(v)[idx], evaluated in double.
template <class T>
double log_softmax_at(std::span<const T> v, std::size_t idx) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T x : v) mx = std::max(mx, static_cast<double>(x));
  double sum = 0.0;
  for (T x : v) sum += std::exp(static_cast<double>(x) - mx);
  return static_cast<double>(v[idx]) - mx - std::log(sum);
}

}  // namespace crd::kernels
