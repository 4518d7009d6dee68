// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// CRD container, little-endian:
//   "CRD1" | version u16 | fingerprint [32] | count u32 | offsets u64 x count
//   | records | file checksum u64 (FNV-1a over every preceding byte)
// Record:
//   id_len u16 | id | t u32 | L u16 | n_kv_heads u16 | d_head u16 | dtype u8
//   | per layer: n u32 | indices u32 x n | K payload | V payload
//   | h_len u32 | h payload | scales f32 x (2L+1), q8 only
//   | y_len u32 | y | checksum u64 (FNV-1a over the record's preceding bytes)
// There is deliberately no slot for prompt text or token ids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "crd/bytes.hpp"
#include "crd/inference.hpp"
#include "crd/model.hpp"

namespace crd {

inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr char kMagic[4] = {'C', 'R', 'D', '1'};

enum class DType : std::uint8_t { kF32 = 0, kF16 = 1, kQ8 = 2 };

inline std::string to_string(DType d) {
  switch (d) {
    case DType::kF32: return "f32";
    case DType::kF16: return "f16";
    case DType::kQ8: return "q8";
  }
  return "?";
}

inline DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::kF32;
  if (s == "f16") return DType::kF16;
  if (s == "q8") return DType::kQ8;
  fail(ErrorKind::kConfig, "unknown dtype '" + std::string(s) + "' (expected f32, f16 or q8)");
}

inline std::size_t dtype_bytes(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF16: return 2;
    case DType::kQ8: return 1;
  }
  fail(ErrorKind::kFormat, "bad dtype");
}

// Symmetric per-tensor int8 scale. An all-zero tensor gets scale 1.
inline float q8_scale(std::span<const float> x) {
  float m = 0.0f;
  for (float v : x) m = std::max(m, std::fabs(v));
  return m > 0.0f ? m / 127.0f : 1.0f;
}

inline std::int8_t q8_quantize(float x, float scale) {
  const float q = std::nearbyint(x / scale);
  return static_cast<std::int8_t>(std::clamp(q, -127.0f, 127.0f));
}

inline float q8_dequantize(std::int8_t q, float scale) { return static_cast<float>(q) * scale; }

// Rounds values in place to what the dtype can represent.
inline void project_values(std::span<float> x, DType d, float scale = 1.0f) {
  switch (d) {
    case DType::kF32: return;
    case DType::kF16:
      for (float& v : x) v = half_to_float(float_to_half(v));
      return;
    case DType::kQ8:
      for (float& v : x) v = q8_dequantize(q8_quantize(v, scale), scale);
      return;
  }
}

// A cache whose values already sit on the dtype grid. scales holds K then V
// per layer (q8 only).
struct QuantizedCache {
  KVCache<float> cache;
  DType dtype = DType::kF32;
  std::vector<float> scales;
};

inline QuantizedCache quantize_cache(const KVCache<float>& cache, DType dtype) {
  QuantizedCache out{cache, dtype, {}};
  for (auto& lc : out.cache.layers) {
    for (auto* t : {&lc.keys, &lc.values}) {
      const float s = dtype == DType::kQ8 ? q8_scale(*t) : 1.0f;
      if (dtype == DType::kQ8) out.scales.push_back(s);
      project_values(*t, dtype, s);
    }
  }
  return out;
}

// Keeps ceil(p * t) prompt positions per layer: the final prompt position
// always, the rest by descending score with ties going to the later position.
// scores[l][j] scores absolute prompt position j in layer l.
template <class T, class S>
KVCache<T> compress_cache(const KVCache<T>& cache, double retain_fraction,
                          const std::vector<std::vector<S>>& scores) {
  require(retain_fraction > 0.0 && retain_fraction <= 1.0, ErrorKind::kParameter,
          "retain fraction must be in (0, 1]");
  require(cache.next_position == cache.prompt_length, ErrorKind::kParameter,
          "only prompt caches can be compressed");
  require(scores.size() == cache.layers.size(), ErrorKind::kShape, "scores must cover every layer");
  cache.validate();
  const std::size_t t = cache.prompt_length;
  const auto keep_target = static_cast<std::size_t>(std::ceil(retain_fraction * static_cast<double>(t) - 1e-9));
  const std::size_t kv = cache.kv_dim();

  KVCache<T> out = cache;
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    const auto& src = cache.layers[l];
    require(scores[l].size() >= t, ErrorKind::kShape, "scores must cover every prompt position");
    const std::size_t keep = std::min(std::max<std::size_t>(keep_target, 1), src.size());
    std::vector<std::size_t> order(src.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const bool la = src.positions[a] == t - 1;
      const bool lb = src.positions[b] == t - 1;
      if (la != lb) return la;
      const auto sa = scores[l][src.positions[a]];
      const auto sb = scores[l][src.positions[b]];
      if (sa != sb) return sa > sb;
      return src.positions[a] > src.positions[b];
    });
    order.resize(keep);
    std::sort(order.begin(), order.end());
    auto& dst = out.layers[l];
    dst.positions.clear();
    dst.keys.clear();
    dst.values.clear();
    for (std::size_t i : order) {
      dst.positions.push_back(src.positions[i]);
      dst.keys.insert(dst.keys.end(), src.keys.begin() + i * kv, src.keys.begin() + (i + 1) * kv);
      dst.values.insert(dst.values.end(), src.values.begin() + i * kv, src.values.begin() + (i + 1) * kv);
    }
  }
  return out;
}

struct CRDRecord {
  std::string id;
  DType dtype = DType::kF32;
  KVCache<float> cache;
  std::vector<float> h;
  std::vector<float> scales;  // q8: K and V per layer, then h
  std::string y;

  bool operator==(const CRDRecord&) const = default;
};

// Builds a record with every value projected onto the dtype grid, so that
// decode(encode(r)) == r holds for all dtypes.
inline CRDRecord make_record(std::string id, const KVCache<float>& cache, std::span<const float> h,
                             std::string y, DType dtype) {
  QuantizedCache q = quantize_cache(cache, dtype);
  CRDRecord r{std::move(id), dtype, std::move(q.cache), std::vector<float>(h.begin(), h.end()),
              std::move(q.scales), std::move(y)};
  const float hs = dtype == DType::kQ8 ? q8_scale(r.h) : 1.0f;
  if (dtype == DType::kQ8) r.scales.push_back(hs);
  project_values(r.h, dtype, hs);
  return r;
}

// What decode(encode(r)) yields: the record with values snapped to its grid.
inline CRDRecord project_record(CRDRecord r) {
  std::size_t si = 0;
  auto next_scale = [&]() { return r.dtype == DType::kQ8 ? r.scales.at(si++) : 1.0f; };
  for (auto& lc : r.cache.layers) {
    project_values(lc.keys, r.dtype, next_scale());
    project_values(lc.values, r.dtype, next_scale());
  }
  project_values(r.h, r.dtype, next_scale());
  return r;
}

namespace detail {

inline void write_payload(ByteWriter& w, std::span<const float> x, DType d, float scale) {
  switch (d) {
    case DType::kF32:
      for (float v : x) w.f32(v);
      break;
    case DType::kF16:
      for (float v : x) w.u16(float_to_half(v));
      break;
    case DType::kQ8:
      for (float v : x) w.i8(q8_quantize(v, scale));
      break;
  }
}

inline std::vector<float> read_payload(ByteReader& r, std::size_t n, DType d) {
  require(n <= r.remaining() / dtype_bytes(d), ErrorKind::kFormat, "truncated tensor payload");
  std::vector<float> x(n);
  for (auto& v : x) {
    switch (d) {
      case DType::kF32: v = r.f32(); break;
      case DType::kF16: v = half_to_float(r.u16()); break;
      case DType::kQ8: v = static_cast<float>(r.i8()); break;
    }
  }
  return x;
}

template <class N>
N checked_narrow(std::size_t v, const char* what) {
  require(v <= std::numeric_limits<N>::max(), ErrorKind::kFormat, std::string(what) + " too large for the format");
  return static_cast<N>(v);
}

}  // namespace detail

inline Bytes encode_record(const CRDRecord& r) {
  const auto& c = r.cache;
  c.validate();
  require(c.next_position == c.prompt_length, ErrorKind::kFormat, "cache holds decoded positions");
  require(!r.h.empty(), ErrorKind::kFormat, "record has no penultimate state");
  const std::size_t n_scales = r.dtype == DType::kQ8 ? 2 * c.layers.size() + 1 : 0;
  require(r.scales.size() == n_scales, ErrorKind::kFormat,
          "scale count " + std::to_string(r.scales.size()) + " inconsistent with dtype " + to_string(r.dtype));
  for (float s : r.scales) require(std::isfinite(s) && s > 0.0f, ErrorKind::kFormat, "q8 scale must be positive");
  for (float v : r.h) require(std::isfinite(v), ErrorKind::kFormat, "non-finite penultimate state");

  ByteWriter w;
  w.u16(detail::checked_narrow<std::uint16_t>(r.id.size(), "id"));
  w.str(r.id);
  w.u32(detail::checked_narrow<std::uint32_t>(c.prompt_length, "prompt length"));
  w.u16(detail::checked_narrow<std::uint16_t>(c.layers.size(), "layer count"));
  w.u16(detail::checked_narrow<std::uint16_t>(c.n_kv_heads, "kv head count"));
  w.u16(detail::checked_narrow<std::uint16_t>(c.d_head, "head dim"));
  w.u8(static_cast<std::uint8_t>(r.dtype));
  std::size_t si = 0;
  auto scale = [&]() { return n_scales ? r.scales[si++] : 1.0f; };
  for (const auto& lc : c.layers) {
    w.u32(static_cast<std::uint32_t>(lc.size()));
    for (auto pos : lc.positions) w.u32(pos);
    detail::write_payload(w, lc.keys, r.dtype, scale());
    detail::write_payload(w, lc.values, r.dtype, scale());
  }
  w.u32(detail::checked_narrow<std::uint32_t>(r.h.size(), "hidden size"));
  detail::write_payload(w, r.h, r.dtype, scale());
  for (float s : r.scales) w.f32(s);
  w.u32(detail::checked_narrow<std::uint32_t>(r.y.size(), "answer"));
  w.str(r.y);
  w.u64(fnv1a64(w.buffer()));
  return w.take();
}

// The checksum is verified before anything is parsed, so a damaged record is
// reported as corruption rather than as a parse failure.
inline CRDRecord decode_record(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 8, ErrorKind::kFormat, "record too short");
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  require(stored == fnv1a64(body), ErrorKind::kCorruption, "record checksum mismatch");

  ByteReader rd(body);
  CRDRecord r;
  r.id = rd.str(rd.u16());
  auto& c = r.cache;
  c.prompt_length = rd.u32();
  c.next_position = c.prompt_length;
  const std::size_t n_layers = rd.u16();
  c.n_kv_heads = rd.u16();
  c.d_head = rd.u16();
  const std::uint8_t dt = rd.u8();
  require(dt <= 2, ErrorKind::kFormat, "unknown dtype tag " + std::to_string(dt));
  r.dtype = static_cast<DType>(dt);
  c.layers.resize(n_layers);
  for (auto& lc : c.layers) {
    const std::size_t n = rd.u32();
    require(n <= rd.remaining() / 4, ErrorKind::kFormat, "truncated index list");
    lc.positions.resize(n);
    for (auto& pos : lc.positions) pos = rd.u32();
    lc.keys = detail::read_payload(rd, n * c.kv_dim(), r.dtype);
    lc.values = detail::read_payload(rd, n * c.kv_dim(), r.dtype);
  }
  const std::size_t hn = rd.u32();
  r.h = detail::read_payload(rd, hn, r.dtype);
  if (r.dtype == DType::kQ8) {
    r.scales.resize(2 * n_layers + 1);
    for (auto& s : r.scales) {
      s = rd.f32();
      require(std::isfinite(s) && s > 0.0f, ErrorKind::kFormat, "bad q8 scale");
    }
    std::size_t si = 0;
    auto dequant = [&](std::vector<float>& x) {
      const float s = r.scales[si++];
      for (auto& v : x) v = q8_dequantize(static_cast<std::int8_t>(v), s);
    };
    for (auto& lc : c.layers) {
      dequant(lc.keys);
      dequant(lc.values);
    }
    dequant(r.h);
  }
  r.y = rd.str(rd.u32());
  require(rd.remaining() == 0, ErrorKind::kFormat, "trailing bytes in record");
  c.validate();
  return r;
}

struct CRDFile {
  Digest fingerprint{};
  std::vector<CRDRecord> records;

  bool operator==(const CRDFile&) const = default;
};

inline Bytes encode_file(const CRDFile& f) {
  std::vector<Bytes> blobs;
  blobs.reserve(f.records.size());
  for (const auto& r : f.records) blobs.push_back(encode_record(r));
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u16(kFormatVersion);
  w.bytes(f.fingerprint);
  w.u32(detail::checked_narrow<std::uint32_t>(blobs.size(), "record count"));
  std::uint64_t off = w.size() + 8 * blobs.size();
  for (const auto& b : blobs) {
    w.u64(off);
    off += b.size();
  }
  for (const auto& b : blobs) w.bytes(b);
  w.u64(fnv1a64(w.buffer()));
  return w.take();
}

inline CRDFile decode_file(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHeader = 4 + 2 + 32 + 4;
  require(bytes.size() >= 4 && std::equal(kMagic, kMagic + 4, bytes.begin()), ErrorKind::kFormat,
          "bad magic: not a CRD container");
  require(bytes.size() >= kHeader + 8, ErrorKind::kFormat, "truncated container header");
  ByteReader rd(bytes);
  rd.bytes(4);
  const std::uint16_t version = rd.u16();
  require(version == kFormatVersion, ErrorKind::kVersion,
          "unsupported container version " + std::to_string(version));
  const auto body = bytes.first(bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  require(stored == fnv1a64(body), ErrorKind::kCorruption, "file checksum mismatch");

  CRDFile f;
  const auto fp = rd.bytes(32);
  std::copy(fp.begin(), fp.end(), f.fingerprint.begin());
  const std::size_t count = rd.u32();
  require(count <= (body.size() - kHeader) / 8, ErrorKind::kFormat, "record count exceeds file size");
  std::vector<std::uint64_t> offsets(count);
  for (auto& o : offsets) o = rd.u64();
  const std::uint64_t records_start = kHeader + 8 * count;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t begin = offsets[i];
    const std::uint64_t end = i + 1 < count ? offsets[i + 1] : body.size();
    require(begin >= records_start && begin < end && end <= body.size(), ErrorKind::kFormat,
            "offset table not strictly increasing");
    if (i == 0) require(begin == records_start, ErrorKind::kFormat, "gap before first record");
    f.records.push_back(decode_record(body.subspan(begin, end - begin)));
  }
  if (count == 0) require(body.size() == records_start, ErrorKind::kFormat, "trailing bytes in empty container");
  return f;
}

inline void save_crd(const CRDFile& f, const std::string& path) { write_file(path, encode_file(f)); }
inline CRDFile load_crd(const std::string& path) { return decode_file(read_file(path)); }

// True when `tokens` occurs in `bytes` as u8 (byte tokens only), u16 or u32
// little-endian runs. Used by the structural scans.
inline bool contains_token_sequence(std::span<const std::uint8_t> bytes, std::span<const Token> tokens) {
  auto contains = [&](const Bytes& needle) {
    return !needle.empty() &&
           std::search(bytes.begin(), bytes.end(), needle.begin(), needle.end()) != bytes.end();
  };
  Bytes as_u8;
  for (Token t : tokens)
    if (t < 256) as_u8.push_back(static_cast<std::uint8_t>(t));
  ByteWriter w16, w32;
  for (Token t : tokens) {
    if (t <= 0xffff) w16.u16(static_cast<std::uint16_t>(t));
    w32.u32(t);
  }
  return contains(as_u8) || contains(w16.buffer()) || contains(w32.buffer());
}

struct StorageShape {
  std::size_t n_layers = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_head = 0;
};

inline StorageShape storage_shape(const ModelConfig& c) { return {c.n_layers, c.n_kv_heads, c.d_head()}; }

struct StorageEstimate {
  double payload_bytes = 0;
  double overhead_bytes = 0;
  double total_bytes() const { return payload_bytes + overhead_bytes; }
};

// Container header plus per-record fixed fields; ids and answers are not
// counted.
inline StorageEstimate estimate_storage(const StorageShape& s, double total_tokens, DType dtype,
                                        double retain_fraction, std::size_t records = 1) {
  StorageEstimate e;
  e.payload_bytes = 2.0 * static_cast<double>(s.n_layers) * total_tokens * static_cast<double>(s.n_kv_heads) *
                    static_cast<double>(s.d_head) * static_cast<double>(dtype_bytes(dtype)) * retain_fraction;
  const double header = 4 + 2 + 32 + 4 + 8;
  const double per_record = 8 + 2 + 4 + 2 + 2 + 2 + 1 + 4 + 4 + 8 + 4.0 * static_cast<double>(s.n_layers) +
                            (dtype == DType::kQ8 ? 4.0 * (2 * static_cast<double>(s.n_layers) + 1) : 0.0);
  e.overhead_bytes = header + per_record * static_cast<double>(records);
  return e;
}

}  // namespace crd
