// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "crd/checkpoint.hpp"
#include "crd/format.hpp"
#include "crd/inference.hpp"

namespace crd {

using MatD = Eigen::MatrixXd;
using VecD = Eigen::VectorXd;
using RowD = Eigen::RowVectorXd;

template <class T>
MatD to_double(const Mat<T>& m) {
  return m.template cast<double>();
}

// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
// of R's diagonal folded back into Q.
inline MatD random_orthogonal(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatD g(d, d);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n(rng);
  Eigen::HouseholderQR<MatD> qr(g);
  MatD q = qr.householderQ();
  const MatD r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index i = 0; i < q.cols(); ++i)
    if (r(i, i) < 0) q.col(i) *= -1.0;
  return q;
}

// Cosine similarity of x to every anchor row. A zero x maps to zeros, and so
// does a zero anchor row.
inline VecD relative_projection(const VecD& x, const MatD& anchors) {
  require(x.size() == anchors.cols(), ErrorKind::kShape, "latent dimension does not match the anchors");
  VecD out = VecD::Zero(anchors.rows());
  const double nx = x.norm();
  if (nx == 0.0) return out;
  for (Eigen::Index i = 0; i < anchors.rows(); ++i) {
    const double na = anchors.row(i).norm();
    if (na > 0.0) out(i) = anchors.row(i).dot(x) / (na * nx);
  }
  return out;
}

struct ProcrustesMap {
  MatD r;
  double residual = 0.0;  // ||X_a R - X_t||_F
};

inline ProcrustesMap fit_procrustes(const MatD& x_anchor, const MatD& x_target) {
  require(x_anchor.cols() == x_target.cols(), ErrorKind::kShape,
          "a rotation cannot bridge different dimensions; use subspace alignment");
  require(x_anchor.rows() == x_target.rows(), ErrorKind::kShape, "paired sets need the same row count");
  Eigen::JacobiSVD<MatD> svd(x_anchor.transpose() * x_target, Eigen::ComputeFullU | Eigen::ComputeFullV);
  ProcrustesMap m;
  m.r = svd.matrixU() * svd.matrixV().transpose();
  m.residual = (x_anchor * m.r - x_target).norm();
  return m;
}

// Row-vector affine map y = x W + b.
struct AffineMap {
  MatD w;
  RowD b;
  double residual = 0.0;  // relative Frobenius residual of the fit

  std::size_t in_dim() const { return static_cast<std::size_t>(w.rows()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(w.cols()); }

  std::vector<float> apply_rows(std::span<const float> x) const {
    const auto in = static_cast<Eigen::Index>(in_dim());
    require(x.size() % in_dim() == 0, ErrorKind::kShape, "row width does not match the map");
    const auto n = static_cast<Eigen::Index>(x.size()) / in;
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> xm(x.data(), n, in);
    MatD y = xm.cast<double>() * w;
    if (b.size()) y.rowwise() += b;
    std::vector<float> out(static_cast<std::size_t>(y.size()));
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data(), n, y.cols()) =
        y.cast<float>();
    return out;
  }
};

enum class Paradigm { kSubspace, kRelative };

inline std::string to_string(Paradigm p) { return p == Paradigm::kSubspace ? "subspace" : "relative"; }

inline Paradigm parse_paradigm(std::string_view s) {
  if (s == "subspace") return Paradigm::kSubspace;
  if (s == "relative") return Paradigm::kRelative;
  fail(ErrorKind::kConfig, "unknown paradigm '" + std::string(s) + "' (expected subspace or relative)");
}

// Per-family maps from anchor latents into target latents: one for h, one
// per layer for key rows and for value rows.
struct AlignmentMap {
  Paradigm paradigm = Paradigm::kSubspace;
  Digest anchor_fingerprint{};
  Digest target_fingerprint{};
  std::size_t rank = 0;     // subspace
  std::size_t anchors = 0;  // relative
  std::size_t target_n_kv_heads = 0;
  std::size_t target_d_head = 0;
  AffineMap hidden;
  std::vector<AffineMap> keys;
  std::vector<AffineMap> values;
  std::vector<std::string> warnings;
  double relative_discrepancy = 0.0;  // relative: anchor similarity-profile mismatch

  double max_residual() const {
    double m = hidden.residual;
    for (const auto& k : keys) m = std::max(m, k.residual);
    for (const auto& v : values) m = std::max(m, v.residual);
    return m;
  }
};

namespace detail {

// Rank-r subspace fit of A (n x p) onto B (n x q), rows paired. With
// A_r = U_A S_A V_A^T truncated and B = U_B S_B V_B^T thin:
//   P_U = U_A^T U_B        (basis alignment of the left subspaces)
//   P_V = S_A^-1 P_U S_B   (coefficients in the right subspaces)
//   W   = V_A P_V V_B^T
// so that A W = U_A U_A^T B, the best fit available inside A's rank-r
// subspace. Larger r can only shrink the residual.
inline AffineMap fit_subspace_family(const MatD& a, const MatD& b, std::size_t r,
                                     std::vector<std::string>& warnings, const std::string& name) {
  Eigen::BDCSVD<MatD> sa(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::BDCSVD<MatD> sb(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
  // A family narrower than r is used at its full width.
  const auto rr = std::min(static_cast<Eigen::Index>(r), sa.singularValues().size());
  const MatD ua = sa.matrixU().leftCols(rr);
  const MatD va = sa.matrixV().leftCols(rr);
  VecD inv = VecD::Zero(rr);
  const double tol = sa.singularValues()(0) * 1e-10;
  bool deficient = false;
  for (Eigen::Index i = 0; i < rr; ++i) {
    const double s = sa.singularValues()(i);
    deficient = deficient || s <= tol;
    inv(i) = s > tol ? 1.0 / s : 0.0;
  }
  if (deficient) warnings.push_back(name + ": anchor weights have rank below " + std::to_string(rr));
  const MatD p_u = ua.transpose() * sb.matrixU();
  const MatD p_v = inv.asDiagonal() * p_u * sb.singularValues().asDiagonal();
  AffineMap m;
  m.w = va * p_v * sb.matrixV().transpose();
  const double nb = b.norm();
  m.residual = nb > 0 ? (a * m.w - b).norm() / nb : 0.0;
  return m;
}

// Least-squares affine fit [X 1] W = Y via a complete orthogonal
// decomposition, which also gives the minimum-norm answer when X is rank
// deficient.
inline AffineMap fit_affine(const MatD& x, const MatD& y, std::vector<std::string>& warnings,
                            const std::string& name) {
  MatD x1(x.rows(), x.cols() + 1);
  x1.leftCols(x.cols()) = x;
  x1.col(x.cols()).setOnes();
  Eigen::CompleteOrthogonalDecomposition<MatD> cod(x1);
  if (cod.rank() < x1.cols()) {
    warnings.push_back(name + ": anchor latent matrix is rank deficient (rank " + std::to_string(cod.rank()) +
                       " of " + std::to_string(x1.cols()) + "); map is poorly conditioned");
  }
  const MatD sol = cod.solve(y);
  AffineMap m;
  m.w = sol.topRows(x.cols());
  m.b = sol.row(x.cols());
  const double ny = y.norm();
  m.residual = ny > 0 ? (x1 * sol - y).norm() / ny : 0.0;
  return m;
}

inline void check_pairable(const ModelConfig& a, const ModelConfig& t) {
  require(a.n_layers == t.n_layers, ErrorKind::kCompatibility, "anchor and target need the same layer count");
  require(a.pos_encoding == t.pos_encoding, ErrorKind::kCompatibility,
          "anchor and target use different positional encodings");
  require(a.vocab_size == t.vocab_size, ErrorKind::kCompatibility, "anchor and target must share the tokenizer");
}

template <class T>
MatD gain_diag(const Mat<T>& g) {
  return to_double(g).transpose().asDiagonal();
}

}  // namespace detail

inline std::size_t default_rank(const ModelConfig& a, const ModelConfig& t) {
  return std::max<std::size_t>(1, std::min(a.d_model, t.d_model) / 4);
}

// Weight-only alignment: reads parameters, never prompts.
template <class T>
AlignmentMap fit_subspace_alignment(const ModelParams<T>& anchor, const ModelParams<T>& target, std::size_t r) {
  const auto& ca = anchor.config;
  const auto& ct = target.config;
  detail::check_pairable(ca, ct);
  const std::size_t max_r = std::min(ca.d_model, ct.d_model);
  require(r >= 1 && r <= max_r, ErrorKind::kRank,
          "rank " + std::to_string(r) + " outside [1, " + std::to_string(max_r) + "]");
  AlignmentMap m;
  m.paradigm = Paradigm::kSubspace;
  m.rank = r;
  m.anchor_fingerprint = model_fingerprint(anchor);
  m.target_fingerprint = model_fingerprint(target);
  m.target_n_kv_heads = ct.n_kv_heads;
  m.target_d_head = ct.d_head();
  // Shared vocabulary rows pair the two embedding tables.
  m.hidden = detail::fit_subspace_family(to_double(anchor.tok_emb), to_double(target.tok_emb), r, m.warnings,
                                         "hidden");
  for (std::size_t l = 0; l < ca.n_layers; ++l) {
    const auto& la = anchor.layers[l];
    const auto& lt = target.layers[l];
    const MatD ga = detail::gain_diag(la.attn_norm_w);
    const MatD into_target = m.hidden.w * detail::gain_diag(lt.attn_norm_w);
    const std::string tag = "layer " + std::to_string(l);
    m.keys.push_back(detail::fit_subspace_family(ga * to_double(la.wk), into_target * to_double(lt.wk), r,
                                                 m.warnings, tag + " keys"));
    m.values.push_back(detail::fit_subspace_family(ga * to_double(la.wv), into_target * to_double(lt.wv), r,
                                                   m.warnings, tag + " values"));
  }
  return m;
}

struct RelativeMapOptions {
  std::size_t min_anchors = 8;
};

// Affine maps fitted on latents of shared anchor prompts. Callers supply
// anchor prompts only; scored items never enter a fit.
template <class T>
AlignmentMap fit_relative_map(std::span<const std::string> anchor_prompts, const ModelParams<T>& anchor,
                              const ModelParams<T>& target, const RelativeMapOptions& opt = {}) {
  const auto& ca = anchor.config;
  const auto& ct = target.config;
  detail::check_pairable(ca, ct);
  require(!anchor_prompts.empty(), ErrorKind::kParameter, "relative map needs at least one anchor prompt");
  AlignmentMap m;
  m.paradigm = Paradigm::kRelative;
  m.anchors = anchor_prompts.size();
  m.anchor_fingerprint = model_fingerprint(anchor);
  m.target_fingerprint = model_fingerprint(target);
  m.target_n_kv_heads = ct.n_kv_heads;
  m.target_d_head = ct.d_head();
  if (anchor_prompts.size() < opt.min_anchors) {
    m.warnings.push_back("only " + std::to_string(anchor_prompts.size()) + " anchors (at least " +
                         std::to_string(opt.min_anchors) + " expected)");
  }

  const std::size_t k = anchor_prompts.size();
  const std::size_t L = ca.n_layers;
  MatD ha(k, ca.d_model), ht(k, ct.d_model);
  std::vector<std::vector<double>> ka(L), kt(L), va(L), vt(L);
  std::size_t rows = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const TokenSeq tokens = encode_text(anchor_prompts[i]);
    const auto pa = prefill(anchor, tokens);
    const auto pt = prefill(target, tokens);
    for (std::size_t j = 0; j < ca.d_model; ++j) ha(i, j) = pa.penultimate.h[j];
    for (std::size_t j = 0; j < ct.d_model; ++j) ht(i, j) = pt.penultimate.h[j];
    for (std::size_t l = 0; l < L; ++l) {
      ka[l].insert(ka[l].end(), pa.cache.layers[l].keys.begin(), pa.cache.layers[l].keys.end());
      va[l].insert(va[l].end(), pa.cache.layers[l].values.begin(), pa.cache.layers[l].values.end());
      kt[l].insert(kt[l].end(), pt.cache.layers[l].keys.begin(), pt.cache.layers[l].keys.end());
      vt[l].insert(vt[l].end(), pt.cache.layers[l].values.begin(), pt.cache.layers[l].values.end());
    }
    rows += tokens.size();
  }
  m.hidden = detail::fit_affine(ha, ht, m.warnings, "hidden");
  auto as_mat = [&](const std::vector<double>& v, std::size_t cols) {
    return MatD(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)));
  };
  for (std::size_t l = 0; l < L; ++l) {
    const std::string tag = "layer " + std::to_string(l);
    m.keys.push_back(detail::fit_affine(as_mat(ka[l], ca.kv_dim()), as_mat(kt[l], ct.kv_dim()), m.warnings,
                                        tag + " keys"));
    m.values.push_back(detail::fit_affine(as_mat(va[l], ca.kv_dim()), as_mat(vt[l], ct.kv_dim()), m.warnings,
                                          tag + " values"));
  }

  // How well translated anchors keep their similarity profile against the
  // target's own anchors.
  MatD mapped = ha * m.hidden.w;
  mapped.rowwise() += m.hidden.b;
  double worst = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const VecD a = relative_projection(mapped.row(i).transpose(), ht);
    const VecD b = relative_projection(ht.row(i).transpose(), ht);
    worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
  }
  m.relative_discrepancy = worst;
  return m;
}

// Maps every K row, V row and h. Index lists and the answer pass through
// untouched; values are re-projected onto the record's dtype grid.
inline CRDRecord translate_record(const CRDRecord& r, const AlignmentMap& m) {
  const auto& c = r.cache;
  require(c.layers.size() == m.keys.size(), ErrorKind::kShape, "record layer count does not match the map");
  require(r.h.size() == m.hidden.in_dim(), ErrorKind::kShape, "record hidden size does not match the map");
  KVCache<float> out;
  out.prompt_length = c.prompt_length;
  out.next_position = c.next_position;
  out.n_kv_heads = m.target_n_kv_heads;
  out.d_head = m.target_d_head;
  out.layers.resize(c.layers.size());
  for (std::size_t l = 0; l < c.layers.size(); ++l) {
    require(c.kv_dim() == m.keys[l].in_dim() && c.kv_dim() == m.values[l].in_dim(), ErrorKind::kShape,
            "record key/value width does not match the map");
    out.layers[l].positions = c.layers[l].positions;
    out.layers[l].keys = m.keys[l].apply_rows(c.layers[l].keys);
    out.layers[l].values = m.values[l].apply_rows(c.layers[l].values);
  }
  const auto h = m.hidden.apply_rows(r.h);
  return make_record(r.id, out, h, r.y, r.dtype);
}

inline CRDFile translate_file(const CRDFile& f, const AlignmentMap& m) {
  require(f.fingerprint == m.anchor_fingerprint, ErrorKind::kCompatibility,
          "file was not curated by this map's anchor model");
  CRDFile out;
  out.fingerprint = m.target_fingerprint;
  out.records.reserve(f.records.size());
  for (const auto& r : f.records) out.records.push_back(translate_record(r, m));
  return out;
}

// Identity on every family for a given model shape.
inline AlignmentMap identity_map(const ModelConfig& c, const Digest& fingerprint) {
  AlignmentMap m;
  m.rank = c.d_model;
  m.anchor_fingerprint = m.target_fingerprint = fingerprint;
  m.target_n_kv_heads = c.n_kv_heads;
  m.target_d_head = c.d_head();
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto kv = static_cast<Eigen::Index>(c.kv_dim());
  m.hidden.w = MatD::Identity(d, d);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    m.keys.push_back({MatD::Identity(kv, kv), RowD(), 0.0});
    m.values.push_back({MatD::Identity(kv, kv), RowD(), 0.0});
  }
  return m;
}

// Builds a function-preserving clone whose every latent space is rotated:
// residual stream by a random R, each key head by 2x2 rotations on the rotary
// pairs (these commute with the positional rotation), each value head by a
// random orthogonal matrix. Norm gains are folded into the following weights,
// which is exact for RMS norm only.
template <class T>
struct RotatedClone {
  ModelParams<T> params;
  MatD residual;                  // x_clone = x R
  std::vector<MatD> key_heads;    // per kv head
  std::vector<MatD> value_heads;  // per kv head
};

template <class T>
RotatedClone<T> make_rotated_clone(const ModelParams<T>& p, std::uint64_t seed) {
  const auto& c = p.config;
  require(c.norm == NormKind::kRms, ErrorKind::kConfig, "rotated clones need RMS norm");
  std::mt19937_64 rng(seed);
  const std::size_t dh = c.d_head();
  RotatedClone<T> out;
  out.residual = random_orthogonal(c.d_model, rng);
  const MatD& R = out.residual;
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  for (std::size_t g = 0; g < c.n_kv_heads; ++g) {
    MatD rk = MatD::Zero(dh, dh);
    if (c.pos_encoding == PosEncoding::kRotary) {
      for (std::size_t i = 0; i + 1 < dh; i += 2) {
        const double a = angle(rng);
        rk(i, i) = std::cos(a);
        rk(i, i + 1) = std::sin(a);
        rk(i + 1, i) = -std::sin(a);
        rk(i + 1, i + 1) = std::cos(a);
      }
    } else {
      rk = random_orthogonal(dh, rng);
    }
    out.key_heads.push_back(rk);
    out.value_heads.push_back(random_orthogonal(dh, rng));
  }
  const std::size_t group = c.n_heads / c.n_kv_heads;
  auto block_diag = [&](const std::vector<MatD>& per_kv, std::size_t heads, std::size_t stride) {
    MatD m = MatD::Zero(heads * dh, heads * dh);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto o = static_cast<Eigen::Index>(h * dh);
      m.block(o, o, dh, dh) = per_kv[h / stride];
    }
    return m;
  };
  const MatD bk = block_diag(out.key_heads, c.n_kv_heads, 1);
  const MatD bq = block_diag(out.key_heads, c.n_heads, group);
  const MatD bv = block_diag(out.value_heads, c.n_kv_heads, 1);
  const MatD bo = block_diag(out.value_heads, c.n_heads, group);

  auto set = [](Mat<T>& dst, const MatD& src) { dst = src.cast<T>(); };
  ModelParams<T> q = p;
  set(q.tok_emb, to_double(p.tok_emb) * R);
  if (p.pos_emb.size()) set(q.pos_emb, to_double(p.pos_emb) * R);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& a = p.layers[l];
    auto& b = q.layers[l];
    const MatD in_attn = R.transpose() * detail::gain_diag(a.attn_norm_w);
    set(b.wq, in_attn * to_double(a.wq) * bq);
    set(b.wk, in_attn * to_double(a.wk) * bk);
    set(b.wv, in_attn * to_double(a.wv) * bv);
    set(b.wo, bo.transpose() * to_double(a.wo) * R);
    b.attn_norm_w.setOnes();
    const MatD in_ffn = R.transpose() * detail::gain_diag(a.ffn_norm_w);
    set(b.w1, in_ffn * to_double(a.w1));
    if (a.w3.size()) set(b.w3, in_ffn * to_double(a.w3));
    set(b.w2, to_double(a.w2) * R);
    b.ffn_norm_w.setOnes();
  }
  set(q.lm_head, R.transpose() * detail::gain_diag(p.final_norm_w) * to_double(p.lm_head));
  q.final_norm_w.setOnes();
  out.params = std::move(q);
  return out;
}

// Map file: "crd-map 1" text header with key=value lines, tensor lines,
// "end", float32 payload, u64 checksum (same layout as checkpoints).
inline Bytes serialize_map(const AlignmentMap& m) {
  std::vector<std::pair<std::string, const MatD*>> tensors;
  std::vector<MatD> biases;
  biases.reserve(1 + 2 * m.keys.size());
  auto add = [&](const std::string& name, const AffineMap& a) {
    tensors.emplace_back(name + ".w", &a.w);
    if (a.b.size()) {
      biases.push_back(a.b);
      tensors.emplace_back(name + ".b", &biases.back());
    }
  };
  add("hidden", m.hidden);
  for (std::size_t l = 0; l < m.keys.size(); ++l) {
    add("layers." + std::to_string(l) + ".keys", m.keys[l]);
    add("layers." + std::to_string(l) + ".values", m.values[l]);
  }
  std::ostringstream head;
  head << "crd-map 1\n"
       << "paradigm=" << to_string(m.paradigm) << "\n"
       << "anchor=" << to_hex(m.anchor_fingerprint) << "\n"
       << "target=" << to_hex(m.target_fingerprint) << "\n"
       << "rank=" << m.rank << "\n"
       << "anchors=" << m.anchors << "\n"
       << "layers=" << m.keys.size() << "\n"
       << "target_n_kv_heads=" << m.target_n_kv_heads << "\n"
       << "target_d_head=" << m.target_d_head << "\n"
       << "relative_discrepancy=" << format_double(m.relative_discrepancy) << "\n"
       << "residual.hidden=" << format_double(m.hidden.residual) << "\n";
  for (std::size_t l = 0; l < m.keys.size(); ++l) {
    head << "residual.layers." << l << ".keys=" << format_double(m.keys[l].residual) << "\n"
         << "residual.layers." << l << ".values=" << format_double(m.values[l].residual) << "\n";
  }
  for (const auto& w : m.warnings) head << "warning=" << w << "\n";
  for (const auto& [name, t] : tensors) head << "tensor " << name << " " << t->rows() << " " << t->cols() << "\n";
  head << "end\n";
  ByteWriter payload;
  for (const auto& [name, t] : tensors)
    for (Eigen::Index i = 0; i < t->rows(); ++i)
      for (Eigen::Index j = 0; j < t->cols(); ++j) payload.f32(static_cast<float>((*t)(i, j)));
  ByteWriter w;
  w.str(head.str());
  w.bytes(payload.buffer());
  w.u64(fnv1a64(payload.buffer()));
  return w.take();
}

inline AlignmentMap deserialize_map(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto read_line = [&]() {
    std::string line;
    for (char ch; (ch = static_cast<char>(r.u8())) != '\n';) line.push_back(ch);
    return line;
  };
  require(read_line() == "crd-map 1", ErrorKind::kFormat, "not a crd alignment map");
  AlignmentMap m;
  std::size_t layers = 0;
  std::map<std::string, double> residuals;
  std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index>> shapes;
  for (std::string line = read_line(); line != "end"; line = read_line()) {
    if (line.starts_with("tensor ")) {
      std::istringstream in(line.substr(7));
      std::string name;
      Eigen::Index rows = 0, cols = 0;
      require(static_cast<bool>(in >> name >> rows >> cols), ErrorKind::kFormat, "bad tensor line '" + line + "'");
      shapes.emplace_back(name, rows, cols);
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kFormat, "malformed map header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "paradigm") m.paradigm = parse_paradigm(value);
    else if (key == "anchor") m.anchor_fingerprint = digest_from_hex(value);
    else if (key == "target") m.target_fingerprint = digest_from_hex(value);
    else if (key == "rank") m.rank = parse_u64(value, key);
    else if (key == "anchors") m.anchors = parse_u64(value, key);
    else if (key == "layers") layers = parse_u64(value, key);
    else if (key == "target_n_kv_heads") m.target_n_kv_heads = parse_u64(value, key);
    else if (key == "target_d_head") m.target_d_head = parse_u64(value, key);
    else if (key == "relative_discrepancy") m.relative_discrepancy = parse_double(value, key);
    else if (key.starts_with("residual.")) residuals[key.substr(9)] = parse_double(value, key);
    else if (key == "warning") m.warnings.push_back(value);
    else fail(ErrorKind::kFormat, "unknown map header key '" + key + "'");
  }
  std::size_t total = 0;
  for (const auto& [name, rows, cols] : shapes) total += static_cast<std::size_t>(rows * cols);
  require(total <= r.remaining() / 4, ErrorKind::kFormat, "truncated map payload");
  const auto payload = r.bytes(total * 4);
  require(r.u64() == fnv1a64(payload), ErrorKind::kCorruption, "map payload checksum mismatch");
  m.keys.resize(layers);
  m.values.resize(layers);
  auto family = [&](const std::string& base) -> AffineMap& {
    if (base == "hidden") return m.hidden;
    require(base.starts_with("layers."), ErrorKind::kFormat, "unknown map tensor '" + base + "'");
    const auto dot = base.find('.', 7);
    const std::size_t l = parse_u64(std::string_view(base).substr(7, dot - 7), "layer");
    require(l < layers, ErrorKind::kFormat, "map tensor layer out of range");
    const std::string kind = base.substr(dot + 1);
    require(kind == "keys" || kind == "values", ErrorKind::kFormat, "unknown map tensor '" + base + "'");
    return kind == "keys" ? m.keys[l] : m.values[l];
  };
  ByteReader pr(payload);
  for (const auto& [name, rows, cols] : shapes) {
    MatD t(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) t(i, j) = pr.f32();
    const auto dot = name.rfind('.');
    AffineMap& a = family(name.substr(0, dot));
    if (name.substr(dot + 1) == "w") a.w = t;
    else a.b = t.row(0);
  }
  m.hidden.residual = residuals["hidden"];
  for (std::size_t l = 0; l < layers; ++l) {
    m.keys[l].residual = residuals["layers." + std::to_string(l) + ".keys"];
    m.values[l].residual = residuals["layers." + std::to_string(l) + ".values"];
    require(m.keys[l].w.size() && m.values[l].w.size(), ErrorKind::kFormat, "map is missing a layer tensor");
  }
  require(m.hidden.w.size(), ErrorKind::kFormat, "map is missing the hidden tensor");
  return m;
}

inline void save_map(const AlignmentMap& m, const std::string& path) { write_file(path, serialize_map(m)); }
inline AlignmentMap load_map(const std::string& path) { return deserialize_map(read_file(path)); }

}  // namespace crd
