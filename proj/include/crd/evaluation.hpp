// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <chrono>
#include <concepts>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crd/checkpoint.hpp"
#include "crd/curation.hpp"
#include "crd/format.hpp"
#include "crd/inference.hpp"
#include "crd/parallel.hpp"
#include "crd/translation.hpp"

namespace crd {

enum class ScoringRule { kExactMatch, kNormalizedExactMatch, kTokenF1 };

inline std::string to_string(ScoringRule r) {
  switch (r) {
    case ScoringRule::kExactMatch: return "exact_match";
    case ScoringRule::kNormalizedExactMatch: return "normalized_exact_match";
    case ScoringRule::kTokenF1: return "token_f1";
  }
  return "?";
}

inline ScoringRule parse_scoring(std::string_view s) {
  if (s == "exact_match") return ScoringRule::kExactMatch;
  if (s == "normalized_exact_match") return ScoringRule::kNormalizedExactMatch;
  if (s == "token_f1") return ScoringRule::kTokenF1;
  fail(ErrorKind::kConfig, "unknown scoring rule '" + std::string(s) + "'");
}

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && is_space(s[a])) ++a;
  while (b > a && is_space(s[b - 1])) --b;
  return std::string(s.substr(a, b - a));
}

// ASCII case fold, whitespace runs collapsed to one space, ends trimmed.
inline std::string normalize_answer(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream in{std::string(s)};
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

inline double score_answer(ScoringRule rule, std::string_view predicted, std::string_view reference) {
  switch (rule) {
    case ScoringRule::kExactMatch:
      return predicted == reference ? 1.0 : 0.0;
    case ScoringRule::kNormalizedExactMatch:
      return normalize_answer(predicted) == normalize_answer(reference) ? 1.0 : 0.0;
    case ScoringRule::kTokenF1: {
      auto p = split_words(normalize_answer(predicted));
      auto r = split_words(normalize_answer(reference));
      if (p.empty() || r.empty()) return p.empty() && r.empty() ? 1.0 : 0.0;
      std::map<std::string, int> counts;
      for (const auto& w : r) ++counts[w];
      double common = 0;
      for (const auto& w : p)
        if (counts[w]-- > 0) ++common;
      if (common == 0) return 0.0;
      const double prec = common / static_cast<double>(p.size());
      const double rec = common / static_cast<double>(r.size());
      return 2 * prec * rec / (prec + rec);
    }
  }
  return 0.0;
}

// Text up to EOS (or the whole generation), whitespace-trimmed.
inline std::string extract_answer(std::span<const Token> generated) {
  const auto end = std::find(generated.begin(), generated.end(), kEos);
  return trim(decode_text(std::span<const Token>(generated.begin(), end)));
}

// What CRD evaluation may ask of a model: it sees caches, hidden states and
// its own generated tokens, nothing else.
template <class M>
concept LatentModel = requires(const M& m, const KVCache<float>& cc, KVCache<float>& c, std::span<const float> h,
                               Token t) {
  { m.fingerprint() } -> std::convertible_to<Digest>;
  { m.decode_first(cc, h) } -> std::same_as<DecodeResult<float>>;
  { m.decode_step(c, t) } -> std::same_as<DecodeResult<float>>;
};

class ParamsModel {
 public:
  explicit ParamsModel(const ModelParams<float>& p) : params_(&p), fingerprint_(model_fingerprint(p)) {}

  const Digest& fingerprint() const { return fingerprint_; }
  const ModelParams<float>& params() const { return *params_; }
  DecodeResult<float> decode_first(const KVCache<float>& c, std::span<const float> h) const {
    return crd::decode_first(*params_, c, h);
  }
  DecodeResult<float> decode_step(KVCache<float>& c, Token t) const { return crd::decode_step(*params_, c, t); }

 private:
  const ModelParams<float>* params_;
  Digest fingerprint_;
};

static_assert(LatentModel<ParamsModel>);

// Same chain as generate(), over any LatentModel.
template <LatentModel M>
TokenSeq generate_latent(const M& m, KVCache<float> cache, std::span<const float> h, const GenerateOptions& opt) {
  require(opt.max_new >= 1, ErrorKind::kParameter, "max_new must be >= 1");
  detail::TokenPicker<float> picker(opt);
  TokenSeq out;
  Token tok = picker.pick(m.decode_first(cache, h));
  out.push_back(tok);
  while (out.size() < opt.max_new && tok != opt.stop_token) {
    tok = picker.pick(m.decode_step(cache, tok));
    out.push_back(tok);
  }
  return out;
}

struct EvalItem {
  std::string id;
  TokenSeq tokens;
  std::string generated;
  std::string y;
  double score = 0.0;
};

struct EvalReport {
  std::vector<EvalItem> items;
  double accuracy = 0.0;
  ScoringRule rule = ScoringRule::kNormalizedExactMatch;
  GenerateOptions gen;
  Digest model_fingerprint{};
  std::optional<Digest> map_fingerprint;
  double seconds = 0.0;
};

inline Digest map_fingerprint(const AlignmentMap& m) { return sha256(serialize_map(m)); }

// Runs a model on a CRD file. The file's records are the only benchmark
// input; no prompt text exists anywhere on this path.
template <LatentModel M>
EvalReport evaluate(const CRDFile& file, const M& model, const AlignmentMap* map, ScoringRule rule,
                    const GenerateOptions& gen, std::size_t jobs = 1) {
  require(!file.records.empty(), ErrorKind::kValidation, "CRD file has no records");
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.rule = rule;
  rep.gen = gen;
  rep.model_fingerprint = model.fingerprint();
  if (map) {
    require(map->anchor_fingerprint == file.fingerprint, ErrorKind::kCompatibility,
            "map anchor does not match the file's anchor model");
    require(map->target_fingerprint == model.fingerprint(), ErrorKind::kCompatibility,
            "map target does not match the evaluated model");
    rep.map_fingerprint = map_fingerprint(*map);
  } else {
    require(file.fingerprint == model.fingerprint(), ErrorKind::kCompatibility,
            "file was curated with a different model (fingerprint " + to_hex(file.fingerprint) +
                ", model " + to_hex(model.fingerprint()) + ") and no alignment map was given");
  }
  rep.items.resize(file.records.size());
  parallel_for(file.records.size(), jobs, [&](std::size_t i) {
    const CRDRecord& src = file.records[i];
    const CRDRecord rec = map ? translate_record(src, *map) : src;
    EvalItem& it = rep.items[i];
    it.id = rec.id;
    it.y = rec.y;
    it.tokens = generate_latent(model, rec.cache, std::span<const float>(rec.h), gen);
    it.generated = extract_answer(it.tokens);
    it.score = score_answer(rule, it.generated, it.y);
  });
  double sum = 0.0;
  for (const auto& it : rep.items) sum += it.score;
  rep.accuracy = sum / static_cast<double>(rep.items.size());
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// Plaintext baseline: the cache-free decoder over prompt text.
inline EvalReport evaluate_plaintext(const PlainBenchmark& bench, const ModelParams<float>& p, ScoringRule rule,
                                     const GenerateOptions& gen, std::size_t jobs = 1) {
  require(!bench.items.empty(), ErrorKind::kValidation, "benchmark has no items");
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.rule = rule;
  rep.gen = gen;
  rep.model_fingerprint = model_fingerprint(p);
  rep.items.resize(bench.items.size());
  parallel_for(bench.items.size(), jobs, [&](std::size_t i) {
    const auto& b = bench.items[i];
    EvalItem& it = rep.items[i];
    it.id = b.id;
    it.y = b.answer;
    it.tokens = generate_plaintext(p, encode_text(b.prompt), gen);
    it.generated = extract_answer(it.tokens);
    it.score = score_answer(rule, it.generated, it.y);
  });
  double sum = 0.0;
  for (const auto& it : rep.items) sum += it.score;
  rep.accuracy = sum / static_cast<double>(rep.items.size());
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct EquivalenceItem {
  std::string id;
  std::string plaintext_answer;
  std::string crd_answer;
  bool agree = false;
  long first_divergence = -1;  // token index, -1 when identical
  double plaintext_score = 0.0;
  double crd_score = 0.0;
};

struct EquivalenceReport {
  std::vector<EquivalenceItem> items;
  double agreement_rate = 0.0;
  double plaintext_accuracy = 0.0;
  double crd_accuracy = 0.0;
  double accuracy_delta = 0.0;  // crd - plaintext
  std::map<long, std::size_t> divergence_histogram;
  bool bit_exact_required = false;  // f32 and nothing dropped
  bool gate_passed = true;
};

inline bool record_is_lossless(const CRDRecord& r) {
  if (r.dtype != DType::kF32) return false;
  for (const auto& lc : r.cache.layers)
    if (lc.size() != r.cache.prompt_length) return false;
  return true;
}

inline EquivalenceReport verify_equivalence(const PlainBenchmark& bench, const CRDFile& file,
                                            const ModelParams<float>& anchor, ScoringRule rule,
                                            const GenerateOptions& gen, std::size_t jobs = 1) {
  require(!bench.items.empty(), ErrorKind::kValidation, "benchmark has no items");
  require(!file.records.empty(), ErrorKind::kValidation, "CRD file has no records");
  const ParamsModel model(anchor);
  require(file.fingerprint == model.fingerprint(), ErrorKind::kCompatibility,
          "file was not curated by this anchor model");
  std::vector<const BenchmarkItem*> src(file.records.size());
  for (std::size_t i = 0; i < file.records.size(); ++i) {
    src[i] = bench.find(file.records[i].id);
    require(src[i] != nullptr, ErrorKind::kValidation,
            "record '" + file.records[i].id + "' has no matching benchmark item");
  }
  EquivalenceReport rep;
  rep.items.resize(file.records.size());
  rep.bit_exact_required = true;
  for (const auto& r : file.records) rep.bit_exact_required = rep.bit_exact_required && record_is_lossless(r);
  parallel_for(file.records.size(), jobs, [&](std::size_t i) {
    const CRDRecord& r = file.records[i];
    const TokenSeq plain = generate_plaintext(anchor, encode_text(src[i]->prompt), gen);
    const TokenSeq latent = generate_latent(model, r.cache, std::span<const float>(r.h), gen);
    auto& it = rep.items[i];
    it.id = r.id;
    it.plaintext_answer = extract_answer(plain);
    it.crd_answer = extract_answer(latent);
    it.agree = plain == latent;
    if (!it.agree) {
      const auto mm = std::mismatch(plain.begin(), plain.end(), latent.begin(), latent.end());
      it.first_divergence = static_cast<long>(mm.first - plain.begin());
    }
    it.plaintext_score = score_answer(rule, it.plaintext_answer, r.y);
    it.crd_score = score_answer(rule, it.crd_answer, r.y);
  });
  double agree = 0, ps = 0, cs = 0;
  for (const auto& it : rep.items) {
    agree += it.agree;
    ps += it.plaintext_score;
    cs += it.crd_score;
    if (!it.agree) ++rep.divergence_histogram[it.first_divergence];
  }
  const double n = static_cast<double>(rep.items.size());
  rep.agreement_rate = agree / n;
  rep.plaintext_accuracy = ps / n;
  rep.crd_accuracy = cs / n;
  rep.accuracy_delta = rep.crd_accuracy - rep.plaintext_accuracy;
  rep.gate_passed = !rep.bit_exact_required || rep.agreement_rate == 1.0;
  return rep;
}

// Generated bytes need not be valid UTF-8; bad sequences become U+FFFD.
inline std::string json_line(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n"; }

// Line-delimited report. The first line is the only one carrying a timestamp.
inline std::string eval_report_to_jsonl(const EvalReport& r, const std::string& created) {
  std::string out = json_line({{"created", created}});
  json meta{{"kind", "settings"},
            {"scoring", to_string(r.rule)},
            {"max_new", r.gen.max_new},
            {"temperature", r.gen.temperature},
            {"seed", r.gen.seed},
            {"model_fingerprint", to_hex(r.model_fingerprint)},
            {"map_fingerprint", r.map_fingerprint ? json(to_hex(*r.map_fingerprint)) : json(nullptr)}};
  out += json_line(meta);
  for (const auto& it : r.items) {
    out += json_line({{"kind", "item"}, {"id", it.id}, {"generated", it.generated}, {"y", it.y}, {"score", it.score}});
  }
  out += json_line({{"kind", "summary"}, {"items", r.items.size()}, {"accuracy", r.accuracy}});
  return out;
}

inline std::string equivalence_report_to_jsonl(const EquivalenceReport& r, const std::string& created) {
  std::string out = json_line({{"created", created}});
  for (const auto& it : r.items) {
    out += json_line({{"kind", "item"},
                      {"id", it.id},
                      {"plaintext_answer", it.plaintext_answer},
                      {"crd_answer", it.crd_answer},
                      {"agree", it.agree},
                      {"first_divergence", it.first_divergence},
                      {"plaintext_score", it.plaintext_score},
                      {"crd_score", it.crd_score}});
  }
  json hist = json::object();
  for (auto [k, v] : r.divergence_histogram) hist[std::to_string(k)] = v;
  out += json_line({{"kind", "summary"},
                    {"items", r.items.size()},
                    {"agreement_rate", r.agreement_rate},
                    {"plaintext_accuracy", r.plaintext_accuracy},
                    {"crd_accuracy", r.crd_accuracy},
                    {"accuracy_delta", r.accuracy_delta},
                    {"first_divergence_histogram", hist},
                    {"bit_exact_required", r.bit_exact_required},
                    {"gate_passed", r.gate_passed}});
  return out;
}

inline std::string format_eval_summary(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "items      " << r.items.size() << "\n"
     << "scoring    " << to_string(r.rule) << "\n"
     << "accuracy   " << r.accuracy << "\n"
     << "model      " << to_hex(r.model_fingerprint).substr(0, 16) << "\n";
  if (r.map_fingerprint) os << "map        " << to_hex(*r.map_fingerprint).substr(0, 16) << "\n";
  os << "seconds    " << std::setprecision(2) << r.seconds << "\n";
  return os.str();
}

inline std::string format_equivalence_summary(const EquivalenceReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "items               " << r.items.size() << "\n"
     << "agreement           " << r.agreement_rate << "\n"
     << "plaintext accuracy  " << r.plaintext_accuracy << "\n"
     << "crd accuracy        " << r.crd_accuracy << "\n"
     << "accuracy delta      " << r.accuracy_delta << "\n"
     << "bit-exact gate      " << (r.bit_exact_required ? (r.gate_passed ? "passed" : "FAILED") : "not required")
     << "\n";
  return os.str();
}

}  // namespace crd
