// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace crd {

enum class ErrorKind {
  kConfig,
  kShape,
  kVocab,
  kLength,
  kContextOverflow,
  kDivergence,
  kFormat,
  kCorruption,
  kVersion,
  kParameter,
  kParse,
  kValidation,
  kCompatibility,
  kRank,
  kIo,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kVocab: return "vocabulary error";
    case ErrorKind::kLength: return "length error";
    case ErrorKind::kContextOverflow: return "context overflow";
    case ErrorKind::kDivergence: return "training divergence";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kCorruption: return "corruption error";
    case ErrorKind::kVersion: return "version error";
    case ErrorKind::kParameter: return "parameter error";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kValidation: return "validation error";
    case ErrorKind::kCompatibility: return "compatibility error";
    case ErrorKind::kRank: return "rank error";
    case ErrorKind::kIo: return "i/o error";
  }
  return "error";
}

// Every failure raised by the library carries a kind so callers (and the CLI
// exit-code mapping) can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

using Bytes = std::vector<std::uint8_t>;

}  // namespace crd
