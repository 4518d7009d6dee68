// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "crd/lab.hpp"
#include "test_util.hpp"

namespace crd {
namespace {

using testing::error_kind;
using testing::small_config;

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.model = small_config(1, 16, 2, 2);
  c.corpus_size = 16;
  c.heldout_size = 4;
  c.benchmark_items = 6;
  c.steps = 3;
  c.batch = 4;
  c.trials = 2;
  c.max_new = 6;
  return c;
}

PlainBenchmark random_prompts(std::size_t n, std::uint64_t seed) {
  PlainBenchmark b;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) b.items.push_back({"p" + std::to_string(i), testing::random_text(rng, 6, 30), "-"});
  return b;
}

std::map<std::string, TokenSeq> truth_of(const PlainBenchmark& b) {
  std::map<std::string, TokenSeq> t;
  for (const auto& it : b.items) t[it.id] = encode_text(it.prompt);
  return t;
}

TEST(Contamination, ZeroStepsGivesIdenticalArms) {
  auto cfg = tiny_experiment();
  cfg.steps = 0;
  const auto rep = run_contamination_experiment(cfg, 2);
  ASSERT_EQ(rep.runs.size(), 6u);
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    EXPECT_EQ(rep.runs[3 * t].accuracy, rep.runs[3 * t + 1].accuracy);
    EXPECT_EQ(rep.runs[3 * t].accuracy, rep.runs[3 * t + 2].accuracy);
    EXPECT_EQ(rep.runs[3 * t].heldout_loss, rep.runs[3 * t + 2].heldout_loss);
  }
  ASSERT_EQ(rep.deltas.size(), 2u);
  for (const auto& d : rep.deltas) {
    EXPECT_EQ(d.mean, 0.0);
    EXPECT_TRUE(d.within);
  }
  EXPECT_FALSE(rep.deltas_reportable);
}

TEST(Contamination, ArmsShareInitAndDiffer) {
  const auto cfg = tiny_experiment();
  const auto a = run_contamination_experiment(cfg, 1);
  const auto b = run_contamination_experiment(cfg, 3);
  ASSERT_EQ(a.runs.size(), b.runs.size());
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    EXPECT_FALSE(a.runs[i].failed) << a.runs[i].failure;
    EXPECT_EQ(a.runs[i].final_train_loss, b.runs[i].final_train_loss);
  }
  EXPECT_NE(a.runs[0].final_train_loss, a.runs[1].final_train_loss);
  EXPECT_NO_THROW(json::parse(lab_report_to_json(a).dump()));
  EXPECT_NE(format_lab_summary(a).find("crd_payload"), std::string::npos);
}

TEST(Contamination, DivergentArmIsMarkedFailed) {
  auto cfg = tiny_experiment();
  cfg.trials = 1;
  cfg.learning_rate = 1e38;
  cfg.steps = 20;
  const auto rep = run_contamination_experiment(cfg);
  bool any_failed = false;
  for (const auto& r : rep.runs) any_failed = any_failed || r.failed;
  EXPECT_TRUE(any_failed);
  EXPECT_GT(rep.notes.size(), 1u);
}

TEST(Contamination, RejectsBadConfig) {
  auto cfg = tiny_experiment();
  cfg.contamination_fraction = 1.5;
  EXPECT_EQ(error_kind([&] { run_contamination_experiment(cfg); }), ErrorKind::kConfig);
  cfg = tiny_experiment();
  cfg.arms.clear();
  EXPECT_EQ(error_kind([&] { run_contamination_experiment(cfg); }), ErrorKind::kConfig);
}

TEST(Inversion, ParameterChecks) {
  const auto p = init_model<float>(small_config(2, 16, 2, 2));
  CurationOptions o;
  o.calibration_size = 0;
  const auto bench = random_prompts(3, 1);
  const auto cur = curate(bench, p, o);
  AttackConfig a;
  a.layer = 2;
  EXPECT_EQ(error_kind([&] { inversion_probe(cur.file, p, a); }), ErrorKind::kParameter);
  a.layer = 0;
  a.budget = 0;
  EXPECT_EQ(error_kind([&] { inversion_probe(cur.file, p, a); }), ErrorKind::kParameter);
  a.budget = 10;
  const auto other = init_model<float>(small_config(2, 16, 2, 2, 99));
  EXPECT_EQ(error_kind([&] { inversion_probe(cur.file, other, a); }), ErrorKind::kCompatibility);
  const auto res = inversion_probe(cur.file, p, a);
  EXPECT_EQ(error_kind([&] { score_recovery(res, {}); }), ErrorKind::kValidation);
}

TEST(Inversion, NoiseIsChanceLevel) {
  const auto p = init_model<float>(small_config(2, 32, 4, 4));
  const auto noise = make_noise_file(p, 20000, 5);
  for (auto kind : {AttackKind::kNearestEmbedding, AttackKind::kLearnedInverter}) {
    AttackConfig a;
    a.attack = kind;
    a.budget = 64;
    const auto s = score_recovery(inversion_probe(noise.file, p, a), noise.truth);
    EXPECT_EQ(s.total, 20000u);
    EXPECT_LT(s.rate(), 3.0 / 259.0) << to_string(kind);
    EXPECT_GT(s.rate(), 1.0 / (3.0 * 259.0)) << to_string(kind);
  }
}

TEST(Inversion, MhaAtLeastAsExposedAsGqa) {
  const auto bench = random_prompts(30, 7);
  const auto truth = truth_of(bench);
  CurationOptions o;
  o.calibration_size = 0;
  for (std::size_t layer : {0, 1}) {
    double rate[2];
    bool pinv[2];
    for (std::size_t kv : {4, 1}) {
      const auto p = init_model<float>(small_config(2, 32, 4, kv, 3));
      const auto cur = curate(bench, p, o);
      AttackConfig a;
      a.layer = layer;
      const auto res = inversion_probe(cur.file, p, a);
      rate[kv == 1] = score_recovery(res, truth).rate();
      pinv[kv == 1] = res.used_pseudo_inverse;
    }
    EXPECT_GE(rate[0], rate[1]) << "layer " << layer;
    EXPECT_FALSE(pinv[0]);
    EXPECT_TRUE(pinv[1]);
    if (layer == 0) {
      EXPECT_EQ(rate[0], 1.0);
    }
  }
}

TEST(Inversion, CompressionLimitsRecovery) {
  const auto bench = random_prompts(20, 3);
  const auto p = init_model<float>(small_config(2, 32, 4, 4, 3));
  CurationOptions o;
  o.calibration_size = 0;
  o.retain_fraction = 0.2;
  const auto cur = curate(bench, p, o);
  AttackConfig a;
  const auto s = score_recovery(inversion_probe(cur.file, p, a), truth_of(bench));
  EXPECT_GT(s.rate(), 0.0);
  EXPECT_LT(s.rate(), 0.35);
}

TEST(Structural, CuratedFilesPass) {
  const auto p = init_model<float>(small_config(2, 16, 2, 2));
  const auto bench = random_prompts(100, 11);
  std::vector<std::string> prompts;
  for (const auto& it : bench.items) prompts.push_back(it.prompt);
  for (DType dt : {DType::kF32, DType::kF16, DType::kQ8}) {
    CurationOptions o;
    o.calibration_size = 0;
    o.dtype = dt;
    const auto rep = structural_unlearnability_check(curate(bench, p, o).file, prompts);
    EXPECT_TRUE(rep.passed()) << (rep.violations.empty() ? "" : rep.violations[0]);
    EXPECT_EQ(rep.prompts_scanned, 100u);
  }
}

TEST(Structural, SmuggledPromptIsCaught) {
  const auto p = init_model<float>(small_config(2, 16, 2, 2));
  const auto bench = random_prompts(5, 2);
  CurationOptions o;
  o.calibration_size = 0;
  auto file = curate(bench, p, o).file;
  file.records[2].id = "leak:" + bench.items[2].prompt;
  std::vector<std::string> prompts;
  for (const auto& it : bench.items) prompts.push_back(it.prompt);
  const auto rep = structural_unlearnability_check(file, prompts);
  EXPECT_FALSE(rep.passed());
  EXPECT_FALSE(rep.scan_ok);
  EXPECT_TRUE(rep.schema_ok);
  EXPECT_TRUE(rep.type_ok);
  ASSERT_EQ(rep.violations.size(), 1u);
  EXPECT_NE(rep.violations[0].find("byte scan"), std::string::npos);
}

TEST(Structural, NoConversionToTrainingInput) {
  static_assert(!TrainableFrom<CRDRecord>);
  static_assert(!TrainableFrom<CRDFile>);
  static_assert(TrainableFrom<std::vector<TokenSeq>>);
  EXPECT_TRUE(kNoTrainingPath);
}

}  // namespace
}  // namespace crd
