// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crd/checkpoint.hpp"
#include "crd/format.hpp"
#include "crd/inference.hpp"
#include "crd/parallel.hpp"

namespace crd {

using json = nlohmann::json;

struct BenchmarkItem {
  std::string id;
  std::string prompt;
  std::string answer;
  json metadata = json::object();
};

struct PlainBenchmark {
  std::string task = "benchmark";
  std::string scoring = "normalized_exact_match";
  std::vector<BenchmarkItem> items;

  void validate() const {
    std::set<std::string> seen;
    for (const auto& it : items) {
      require(!it.id.empty(), ErrorKind::kValidation, "item with empty id");
      require(seen.insert(it.id).second, ErrorKind::kValidation, "duplicate id '" + it.id + "'");
      require(!it.prompt.empty(), ErrorKind::kValidation, "item '" + it.id + "' has an empty prompt");
    }
  }

  const BenchmarkItem* find(std::string_view id) const {
    for (const auto& it : items)
      if (it.id == id) return &it;
    return nullptr;
  }
};

// Line-delimited JSON. Each line is {"id", "prompt", "answer", "metadata"?}.
// An optional first line {"task": ..., "scoring": ...} names the benchmark.
// Blank lines are ignored; any other key is rejected.
inline PlainBenchmark parse_benchmark(std::string_view text) {
  PlainBenchmark b;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('\n', start), text.size());
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::kParse, where + ": " + e.what());
    }
    require(j.is_object(), ErrorKind::kParse, where + ": expected an object");
    auto get_string = [&](const char* key) {
      require(j.contains(key) && j[key].is_string(), ErrorKind::kParse,
              where + ": field '" + key + "' missing or not a string");
      return j[key].get<std::string>();
    };
    if (j.contains("task") && !j.contains("id")) {
      require(b.items.empty(), ErrorKind::kParse, where + ": header line must come first");
      for (auto& [k, v] : j.items())
        require(k == "task" || k == "scoring", ErrorKind::kParse, where + ": unknown header key '" + k + "'");
      b.task = get_string("task");
      if (j.contains("scoring")) b.scoring = get_string("scoring");
      continue;
    }
    for (auto& [k, v] : j.items()) {
      require(k == "id" || k == "prompt" || k == "answer" || k == "metadata", ErrorKind::kParse,
              where + ": unknown key '" + k + "'");
    }
    BenchmarkItem it{get_string("id"), get_string("prompt"), get_string("answer")};
    if (j.contains("metadata")) it.metadata = j["metadata"];
    b.items.push_back(std::move(it));
  }
  b.validate();
  return b;
}

inline PlainBenchmark load_benchmark(const std::string& path) {
  const Bytes raw = read_file(path);
  return parse_benchmark(std::string_view(reinterpret_cast<const char*>(raw.data()), raw.size()));
}

inline std::string benchmark_to_jsonl(const PlainBenchmark& b) {
  std::string out = json{{"task", b.task}, {"scoring", b.scoring}}.dump() + "\n";
  for (const auto& it : b.items) {
    json j{{"id", it.id}, {"prompt", it.prompt}, {"answer", it.answer}};
    if (!it.metadata.empty()) j["metadata"] = it.metadata;
    out += j.dump() + "\n";
  }
  return out;
}

inline void save_benchmark(const PlainBenchmark& b, const std::string& path) {
  write_file(path, benchmark_to_jsonl(b));
}

inline constexpr const char* kCompressionScoring = "final-query attention mass, summed over heads";

struct CalibrationSample {
  std::string id;
  std::string prompt;
  std::string answer;
};

struct Datacard {
  ModelConfig anchor_config;
  Digest anchor_fingerprint{};
  double retain_fraction = 1.0;
  std::string compression_scoring = kCompressionScoring;
  DType dtype = DType::kF32;
  std::string task;
  std::string scoring;
  std::size_t max_new = 16;
  std::vector<CalibrationSample> samples;
  std::string created;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline json config_to_json(const ModelConfig& c) {
  json j = json::object();
  std::istringstream in(config_to_text(c));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

inline ModelConfig config_from_json(const json& j) {
  require(j.is_object(), ErrorKind::kParse, "model config must be an object");
  ModelConfig c;
  for (auto& [k, v] : j.items()) {
    const std::string value = v.is_string() ? v.get<std::string>() : v.dump();
    apply_config_key(c, k, value);
  }
  c.validate();
  return c;
}

inline json datacard_to_json(const Datacard& d) {
  json samples = json::array();
  for (const auto& s : d.samples) samples.push_back({{"id", s.id}, {"prompt", s.prompt}, {"answer", s.answer}});
  return {
      {"datacard_version", 1},
      {"created", d.created},
      {"anchor",
       {{"config", config_to_json(d.anchor_config)},
        {"fingerprint", to_hex(d.anchor_fingerprint)},
        {"positional_encoding", to_string(d.anchor_config.pos_encoding)}}},
      {"compression", {{"retain_fraction", d.retain_fraction}, {"scoring_rule", d.compression_scoring}}},
      {"dtype", to_string(d.dtype)},
      {"task", d.task},
      {"scoring", d.scoring},
      {"max_new", d.max_new},
      {"calibration_samples", samples},
  };
}

inline Datacard datacard_from_json(const json& j) {
  try {
    Datacard d;
    require(j.at("datacard_version").get<int>() == 1, ErrorKind::kVersion, "unknown datacard version");
    d.created = j.at("created").get<std::string>();
    d.anchor_config = config_from_json(j.at("anchor").at("config"));
    d.anchor_fingerprint = digest_from_hex(j.at("anchor").at("fingerprint").get<std::string>());
    d.retain_fraction = j.at("compression").at("retain_fraction").get<double>();
    d.compression_scoring = j.at("compression").at("scoring_rule").get<std::string>();
    d.dtype = parse_dtype(j.at("dtype").get<std::string>());
    d.task = j.at("task").get<std::string>();
    d.scoring = j.at("scoring").get<std::string>();
    d.max_new = j.at("max_new").get<std::size_t>();
    for (const auto& s : j.at("calibration_samples")) {
      d.samples.push_back(
          {s.at("id").get<std::string>(), s.at("prompt").get<std::string>(), s.at("answer").get<std::string>()});
    }
    return d;
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("datacard: ") + e.what());
  }
}

inline void save_datacard(const Datacard& d, const std::string& path) {
  write_file(path, datacard_to_json(d).dump(2) + "\n");
}

inline Datacard load_datacard(const std::string& path) {
  const Bytes raw = read_file(path);
  try {
    return datacard_from_json(json::parse(raw.begin(), raw.end()));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, std::string("datacard: ") + e.what());
  }
}

struct CurationOptions {
  DType dtype = DType::kF32;
  double retain_fraction = 1.0;
  std::size_t calibration_size = 16;
  std::size_t max_new = 16;  // reserved context for generation
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string timestamp;  // empty: current UTC time
};

struct SkippedItem {
  std::string id;
  std::string reason;
};

struct CurationReport {
  std::size_t input_items = 0;
  std::size_t records = 0;
  std::size_t calibration = 0;
  std::vector<SkippedItem> skipped;
};

struct CurationResult {
  CRDFile file;
  Datacard datacard;
  CurationReport report;
};

// Seeded uniform choice of calibration items, returned in input order.
inline std::vector<std::size_t> choose_calibration(std::size_t n_items, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(n_items);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_items - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// One prompt through prefill, compression, and quantization. No plaintext
// survives into the result apart from the answer the caller supplies.
inline CRDRecord project_prompt(const ModelParams<float>& p, std::string id, std::string_view prompt,
                                std::string answer, DType dtype, double retain_fraction) {
  const TokenSeq tokens = encode_text(prompt);
  auto pre = prefill(p, tokens);
  if (retain_fraction < 1.0) pre.cache = compress_cache(pre.cache, retain_fraction, pre.attention_mass);
  return make_record(std::move(id), pre.cache, pre.penultimate.h, std::move(answer), dtype);
}

inline CurationResult curate(const PlainBenchmark& bench, const ModelParams<float>& anchor,
                             const CurationOptions& opt) {
  bench.validate();
  require(opt.calibration_size < bench.items.size(), ErrorKind::kParameter,
          "calibration size must be smaller than the item count");
  require(opt.retain_fraction > 0.0 && opt.retain_fraction <= 1.0, ErrorKind::kParameter,
          "retain fraction must be in (0, 1]");
  const auto& c = anchor.config;
  require(opt.max_new < c.max_context, ErrorKind::kParameter, "generation reserve exceeds the context");
  const std::size_t limit = c.max_context - opt.max_new;

  CurationResult out;
  out.report.input_items = bench.items.size();
  const auto calib = choose_calibration(bench.items.size(), opt.calibration_size, opt.seed);
  std::vector<bool> is_calib(bench.items.size(), false);
  for (auto i : calib) is_calib[i] = true;

  std::vector<std::size_t> scored;
  for (std::size_t i = 0; i < bench.items.size(); ++i)
    if (!is_calib[i]) scored.push_back(i);

  std::vector<std::optional<CRDRecord>> records(scored.size());
  std::vector<std::string> errors(scored.size());
  parallel_for(scored.size(), opt.jobs, [&](std::size_t k) {
    const auto& it = bench.items[scored[k]];
    const std::size_t len = it.prompt.size() + 1;
    if (len > limit) {
      errors[k] = "prompt is " + std::to_string(len) + " tokens, limit " + std::to_string(limit);
      return;
    }
    try {
      records[k] = project_prompt(anchor, it.id, it.prompt, it.answer, opt.dtype, opt.retain_fraction);
    } catch (const Error& e) {
      errors[k] = e.what();
    }
  });
  for (std::size_t k = 0; k < scored.size(); ++k) {
    if (records[k]) {
      out.file.records.push_back(std::move(*records[k]));
    } else {
      out.report.skipped.push_back({bench.items[scored[k]].id, errors[k]});
    }
  }
  out.file.fingerprint = model_fingerprint(anchor);
  out.report.records = out.file.records.size();
  out.report.calibration = calib.size();

  auto& d = out.datacard;
  d.anchor_config = c;
  d.anchor_fingerprint = out.file.fingerprint;
  d.retain_fraction = opt.retain_fraction;
  d.dtype = opt.dtype;
  d.task = bench.task;
  d.scoring = bench.scoring;
  d.max_new = opt.max_new;
  for (auto i : calib) {
    const auto& it = bench.items[i];
    d.samples.push_back({it.id, it.prompt, it.answer});
  }
  d.created = opt.timestamp.empty() ? utc_timestamp() : opt.timestamp;
  return out;
}

inline json curation_report_to_json(const CurationReport& r) {
  json skipped = json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"id", s.id}, {"reason", s.reason}});
  return {{"input_items", r.input_items},
          {"records", r.records},
          {"calibration", r.calibration},
          {"skipped_count", r.skipped.size()},
          {"skipped", skipped}};
}

}  // namespace crd
