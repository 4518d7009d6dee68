// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoint layout:
//   "crd-checkpoint 1\n"
//   key=value config lines
//   "tensor <name> <rows> <cols>\n" for every tensor, in checkpoint order
//   "end\n"
//   raw little-endian float32 tensor payload in the declared order
//   u64 FNV-1a checksum of the payload

#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crd/bytes.hpp"
#include "crd/model.hpp"

namespace crd {

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::uint64_t parse_u64(std::string_view s, std::string_view what) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  require(r.ec == std::errc() && r.ptr == s.data() + s.size(), ErrorKind::kParse,
          "bad integer for " + std::string(what) + ": '" + std::string(s) + "'");
  return v;
}

inline double parse_double(std::string_view s, std::string_view what) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  require(r.ec == std::errc() && r.ptr == s.data() + s.size(), ErrorKind::kParse,
          "bad number for " + std::string(what) + ": '" + std::string(s) + "'");
  return v;
}

// Canonical key=value text for a config. d_ff is written resolved.
inline std::string config_to_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "n_layers=" << c.n_layers << "\n"
     << "d_model=" << c.d_model << "\n"
     << "n_heads=" << c.n_heads << "\n"
     << "n_kv_heads=" << c.n_kv_heads << "\n"
     << "vocab_size=" << c.vocab_size << "\n"
     << "max_context=" << c.max_context << "\n"
     << "d_ff=" << c.ffn_dim() << "\n"
     << "pos_encoding=" << to_string(c.pos_encoding) << "\n"
     << "norm=" << to_string(c.norm) << "\n"
     << "activation=" << to_string(c.activation) << "\n"
     << "rope_base=" << format_double(c.rope_base) << "\n"
     << "norm_eps=" << format_double(c.norm_eps) << "\n"
     << "seed=" << c.seed << "\n";
  return os.str();
}

// Applies one key=value pair; unknown keys are a configuration error.
inline void apply_config_key(ModelConfig& c, std::string_view key, std::string_view value) {
  if (key == "n_layers") c.n_layers = parse_u64(value, key);
  else if (key == "d_model") c.d_model = parse_u64(value, key);
  else if (key == "n_heads") c.n_heads = parse_u64(value, key);
  else if (key == "n_kv_heads") c.n_kv_heads = parse_u64(value, key);
  else if (key == "vocab_size") c.vocab_size = parse_u64(value, key);
  else if (key == "max_context") c.max_context = parse_u64(value, key);
  else if (key == "d_ff") c.d_ff = parse_u64(value, key);
  else if (key == "pos_encoding") c.pos_encoding = parse_pos_encoding(value);
  else if (key == "norm") c.norm = parse_norm(value);
  else if (key == "activation") c.activation = parse_activation(value);
  else if (key == "rope_base") c.rope_base = parse_double(value, key);
  else if (key == "norm_eps") c.norm_eps = parse_double(value, key);
  else if (key == "seed") c.seed = parse_u64(value, key);
  else fail(ErrorKind::kConfig, "unknown model config key '" + std::string(key) + "'");
}

namespace detail {

template <class T>
Bytes tensor_payload(const ModelParams<T>& p) {
  ByteWriter w;
  p.for_each([&](std::string_view, const Mat<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
  });
  return w.take();
}

}  // namespace detail

template <class T>
Bytes serialize_checkpoint(const ModelParams<T>& p) {
  std::ostringstream head;
  head << "crd-checkpoint 1\n" << config_to_text(p.config);
  p.for_each([&](std::string_view name, const Mat<T>& m) {
    head << "tensor " << name << " " << m.rows() << " " << m.cols() << "\n";
  });
  head << "end\n";
  ByteWriter w;
  w.str(head.str());
  const Bytes payload = detail::tensor_payload(p);
  w.bytes(payload);
  w.u64(fnv1a64(payload));
  return w.take();
}

template <class T>
ModelParams<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto read_line = [&]() {
    std::string line;
    while (true) {
      const char ch = static_cast<char>(r.u8());
      if (ch == '\n') break;
      line.push_back(ch);
      require(line.size() < 4096, ErrorKind::kFormat, "checkpoint header line too long");
    }
    return line;
  };
  require(read_line() == "crd-checkpoint 1", ErrorKind::kFormat, "not a crd checkpoint (bad magic line)");
  ModelConfig c;
  std::vector<std::string> tensor_lines;
  for (std::string line = read_line(); line != "end"; line = read_line()) {
    if (line.starts_with("tensor ")) {
      tensor_lines.push_back(line.substr(7));
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kFormat, "malformed checkpoint header line '" + line + "'");
    apply_config_key(c, std::string_view(line).substr(0, eq), std::string_view(line).substr(eq + 1));
  }
  ModelParams<T> p = zeros_like<T>(c);
  std::size_t idx = 0;
  bool shapes_ok = true;
  p.for_each([&](std::string_view name, const Mat<T>& m) {
    std::ostringstream want;
    want << name << " " << m.rows() << " " << m.cols();
    shapes_ok = shapes_ok && idx < tensor_lines.size() && tensor_lines[idx] == want.str();
    ++idx;
  });
  require(shapes_ok && idx == tensor_lines.size(), ErrorKind::kFormat,
          "checkpoint tensor table does not match its config");
  const std::size_t n_floats = p.parameter_count();
  const auto payload = r.bytes(n_floats * 4);
  require(r.u64() == fnv1a64(payload), ErrorKind::kCorruption, "checkpoint payload checksum mismatch");
  require(r.remaining() == 0, ErrorKind::kFormat, "trailing bytes after checkpoint");
  ByteReader pr(payload);
  p.for_each([&](std::string_view, Mat<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(pr.f32());
  });
  require(all_finite(p), ErrorKind::kFormat, "checkpoint holds non-finite values");
  return p;
}

template <class T>
void save_checkpoint(const ModelParams<T>& p, const std::string& path) {
  write_file(path, serialize_checkpoint(p));
}

template <class T>
ModelParams<T> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<T>(read_file(path));
}

// 32-byte identity of a model: SHA-256 over the canonical config text and the
// checksum of its float32 tensor payload.
template <class T>
Digest model_fingerprint(const ModelParams<T>& p) {
  ByteWriter w;
  w.str(config_to_text(p.config));
  w.u64(fnv1a64(detail::tensor_payload(p)));
  return sha256(w.buffer());
}

}  // namespace crd
