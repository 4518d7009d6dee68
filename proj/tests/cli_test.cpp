// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

// Drives the crd binary end to end in a scratch directory.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "crd/lab.hpp"

namespace crd {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out;
};

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("crd_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    // One small trained anchor and one untrained target, shared by the suite.
    ASSERT_EQ(crd("--quiet --seed 3 train --preset lab --model d_model=32 --steps 30 --emit-benchmark 24").code, 0);
    ASSERT_EQ(crd("--quiet --seed 4 train --preset lab --model d_model=32 --steps 0 --output other.ckpt").code, 0);
    ASSERT_EQ(crd("--quiet curate --benchmark lookup.jsonl --checkpoint model.ckpt --calibration 4 --timestamp x").code,
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static CliRun crd(const std::string& args) {
    const std::string cmd = "cd '" + dir_.string() + "' && '" CRD_CLI_PATH "' --out . " + args + " 2>&1";
    CliRun r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) return r;
    std::array<char, 4096> buf;
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  static void write(const std::string& name, const std::string& text) { std::ofstream(dir_ / name) << text; }

  static fs::path dir_;
};

fs::path Cli::dir_;

TEST_F(Cli, CurateWritesArtifacts) {
  EXPECT_TRUE(fs::exists(dir_ / "dataset.crd"));
  EXPECT_TRUE(fs::exists(dir_ / "dataset.datacard"));
  const auto rep = json::parse(std::ifstream(dir_ / "dataset.curation.json"));
  EXPECT_EQ(rep["records"], 20);
  EXPECT_TRUE(rep["structural_check"]["passed"].get<bool>());
  EXPECT_EQ(load_datacard((dir_ / "dataset.datacard").string()).created, "x");
}

TEST_F(Cli, VerifyPassesOnLosslessFile) {
  const auto r = crd("verify --benchmark lookup.jsonl --crd dataset.crd --checkpoint model.ckpt");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("passed"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "verify_report.jsonl"));
}

TEST_F(Cli, EvaluateNeedsMatchingModelOrMap) {
  auto r = crd("evaluate --crd dataset.crd --checkpoint other.ckpt");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("compatibility"), std::string::npos);
  ASSERT_EQ(crd("--quiet translate --crd dataset.crd --anchor model.ckpt --target other.ckpt").code, 0);
  r = crd("evaluate --crd translated.crd --checkpoint other.ckpt");
  EXPECT_EQ(r.code, 0) << r.out;
  r = crd("evaluate --crd dataset.crd --checkpoint other.ckpt --map translated.map");
  EXPECT_EQ(r.code, 0) << r.out;
}

TEST_F(Cli, StorageTable) {
  const auto r = crd("storage --dtype f16 --retain 1.0 --retain 0.007");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("52.4 GB"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("367.0 MB"), std::string::npos) << r.out;
}

TEST_F(Cli, ConfigFile) {
  write("ok.json", R"({"tokens": 1000, "dtype": ["f16"], "retain": [1.0]})");
  auto r = crd("--config ok.json storage");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("1000 tokens"), std::string::npos);
  write("bad.json", R"({"tokenz": 1000})");
  r = crd("--config bad.json storage");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("tokenz"), std::string::npos);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(crd("curate --benchmark missing.jsonl --checkpoint model.ckpt").code, 3);
  EXPECT_EQ(crd("train --model seed=1 --steps 0").code, 1);
  EXPECT_EQ(crd("attack --crd dataset.crd --checkpoint model.ckpt --layer 9").code, 1);
  EXPECT_EQ(crd("nonsense").code, 1);
  EXPECT_EQ(crd("--help").code, 0);
}

TEST_F(Cli, AttackReport) {
  const auto r = crd("--quiet attack --crd dataset.crd --checkpoint model.ckpt --noise 500");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rep = json::parse(std::ifstream(dir_ / "attack_report.json"));
  EXPECT_EQ(rep["guesses"].size(), 20u);
  EXPECT_EQ(rep["noise_baseline"]["positions"], 500);
}

}  // namespace
}  // namespace crd
