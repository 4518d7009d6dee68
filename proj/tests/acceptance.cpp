// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run: one PASS/FAIL line per criterion, with the measured value.
// Usage: acceptance [criterion numbers...]   (default: all)
//
// Exit status is nonzero when a criterion fails that is not in kKnownFailures.
// Known failures still print FAIL; they are listed here so that ctest stays
// usable while the measurement keeps being reported.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include "crd/lab.hpp"
#include "test_util.hpp"

namespace {

using namespace crd;

const std::set<int> kKnownFailures = {5};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

std::size_t jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

// Shared trained lookup model for criteria 5 and 8.
struct LookupFixture {
  ModelParams<float> p;
  LookupTask task{1};
  PlainBenchmark bench;
  CurationResult full;
  double train_cpu = 0;
};

LookupFixture& lookup_fixture() {
  static LookupFixture f = [] {
    LookupFixture x;
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 64;
    c.n_heads = 4;
    c.n_kv_heads = 4;
    c.max_context = 256;
    c.seed = 1;
    x.p = init_model<float>(c);
    const double t0 = cpu_seconds();
    train_lookup_model(x.p, x.task, 600, 16, 3e-3, 5);
    x.train_cpu = cpu_seconds() - t0;
    x.bench = x.task.benchmark(220, 99);
    CurationOptions o;
    o.calibration_size = 16;
    o.max_new = 8;
    o.timestamp = "-";
    o.jobs = jobs();
    x.full = curate(x.bench, x.p, o);
    return x;
  }();
  return f;
}

GenerateOptions greedy(std::size_t max_new) {
  GenerateOptions g;
  g.max_new = max_new;
  return g;
}

// 1. Cache path equals plaintext path.
Outcome asymmetry_equivalence() {
  const auto p = init_model<float>(default_config());
  std::mt19937_64 rng(101);
  const auto g = greedy(16);
  std::size_t same = 0;
  const double t0 = cpu_seconds();
  for (int i = 0; i < 100; ++i) {
    const auto prompt = testing::random_text(rng, 4, 120, "abcdefghijklmnopqrstuvwxyz ABCDEFG.,?0123456789");
    const auto rec = project_prompt(p, "r", prompt, "", DType::kF32, 1.0);
    const auto a = generate(p, rec.cache, std::span<const float>(rec.h), g);
    const auto b = generate_plaintext(p, encode_text(prompt), g);
    same += a == b;
  }
  const double cpu = cpu_seconds() - t0;
  return {same == 100 && cpu < 60, std::to_string(same) + "/100 identical, " + fmt(cpu, 3) + " s cpu"};
}

// 2. Analytic vs central-difference gradients.
Outcome gradient_check() {
  const double t0 = cpu_seconds();
  double worst = 0;
  for (std::size_t kv : {2, 1}) {
    auto p = init_model<double>(testing::small_config(1, 4, 2, kv, 13));
    const std::vector<TokenSeq> batch{{kBos, 'a', 'b', 'c', kEos}, {kBos, 'x', 'x'}};
    auto lg = loss_and_gradients(p, batch);
    std::vector<Mat<double>*> grads;
    lg.grads.for_each([&](std::string_view, Mat<double>& g) { grads.push_back(&g); });
    std::size_t ti = 0;
    p.for_each([&](std::string_view, Mat<double>& w) {
      Mat<double> fd(w.rows(), w.cols());
      for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double orig = w.data()[i];
        const double eps = 1e-5;
        w.data()[i] = orig + eps;
        const double up = loss_and_gradients(p, batch).loss;
        w.data()[i] = orig - eps;
        const double down = loss_and_gradients(p, batch).loss;
        w.data()[i] = orig;
        fd.data()[i] = (up - down) / (2 * eps);
      }
      const Mat<double>& g = *grads[ti++];
      worst = std::max(worst, (g - fd).norm() / std::max({g.norm(), fd.norm(), 1e-12}));
    });
  }
  const double cpu = cpu_seconds() - t0;
  return {worst < 1e-3 && cpu < 60, "max relative error " + fmt(worst, 3) + ", " + fmt(cpu, 3) + " s cpu"};
}

CRDRecord random_record(std::mt19937_64& rng, DType dtype) {
  std::uniform_int_distribution<int> small(1, 4);
  std::normal_distribution<float> val(0.0f, 1.0f);
  KVCache<float> c;
  c.prompt_length = std::uniform_int_distribution<std::size_t>(1, 32)(rng);
  c.next_position = c.prompt_length;
  c.n_kv_heads = small(rng);
  c.d_head = 2 * small(rng);
  c.layers.resize(small(rng));
  for (auto& lc : c.layers) {
    for (std::uint32_t q = 0; q + 1 < c.prompt_length; ++q)
      if (rng() % 3) lc.positions.push_back(q);
    lc.positions.push_back(static_cast<std::uint32_t>(c.prompt_length - 1));
    const float mag = std::exp(std::uniform_real_distribution<float>(-5.0f, 5.0f)(rng));
    for (std::size_t i = 0; i < lc.size() * c.kv_dim(); ++i) {
      lc.keys.push_back(mag * val(rng));
      lc.values.push_back(mag * val(rng));
    }
  }
  std::vector<float> h(std::uniform_int_distribution<std::size_t>(1, 64)(rng));
  for (auto& v : h) v = val(rng);
  return make_record("rec-" + std::to_string(rng() % 1000000), c, h, testing::random_text(rng, 0, 16), dtype);
}

// 3. Record encode/decode round trip.
Outcome format_round_trip() {
  std::mt19937_64 rng(303);
  std::size_t failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto r = random_record(rng, static_cast<DType>(i % 3));
    const Bytes b = encode_record(r);
    const auto back = decode_record(b);
    if (!(back == r) || encode_record(back) != b) ++failures;
  }
  return {failures == 0, "1000 records, " + std::to_string(failures) + " failures"};
}

// 4. Storage arithmetic for a 32 x 32 x 128 shape.
Outcome storage_arithmetic() {
  const StorageShape s{32, 32, 128};
  const double full = estimate_storage(s, 100000, DType::kF16, 1.0).total_bytes();
  const double small = estimate_storage(s, 100000, DType::kF16, 0.007).total_bytes();
  const bool ok = std::fabs(full - 50e9) <= 5e9 && std::fabs(small - 350e6) <= 35e6;
  return {ok, fmt(full / 1e9, 6) + " GB full, " + fmt(small / 1e6, 5) + " MB at retain 0.007"};
}

// 5. Compressed vs uncompressed answers.
Outcome compression_behavior() {
  const double t0 = cpu_seconds();
  auto& f = lookup_fixture();
  CurationOptions o;
  o.calibration_size = 16;
  o.max_new = 8;
  o.timestamp = "-";
  o.retain_fraction = 0.2;
  o.jobs = jobs();
  const auto comp = curate(f.bench, f.p, o);
  const ParamsModel m(f.p);
  const auto g = greedy(8);
  const auto a = evaluate(f.full.file, m, nullptr, ScoringRule::kNormalizedExactMatch, g, jobs());
  const auto b = evaluate(comp.file, m, nullptr, ScoringRule::kNormalizedExactMatch, g, jobs());
  std::size_t agree = 0;
  for (std::size_t i = 0; i < a.items.size(); ++i) agree += a.items[i].generated == b.items[i].generated;
  const double rate = static_cast<double>(agree) / static_cast<double>(a.items.size());
  const double cpu = cpu_seconds() - t0;
  return {rate >= 0.8 && a.items.size() >= 200 && cpu < 300,
          "answer agreement " + std::to_string(agree) + "/" + std::to_string(a.items.size()) + " = " + fmt(rate, 3) +
              " (uncompressed accuracy " + fmt(a.accuracy, 3) + ", compressed " + fmt(b.accuracy, 3) + "), " +
              fmt(cpu, 3) + " s cpu incl. training"};
}

// 6. Planted rotation recovery.
Outcome procrustes_recovery() {
  std::mt19937_64 rng(606);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0;
  for (std::size_t d : {16, 64, 128}) {
    const MatD r = random_orthogonal(d, rng);
    MatD x(2 * d, d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
    worst = std::max(worst, (fit_procrustes(x, x * r).r - r).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-6, "max elementwise error " + fmt(worst, 3)};
}

// 7. Relative projection under orthogonal transforms.
Outcome relative_invariance() {
  std::mt19937_64 rng(707);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> dim(2, 48), count(1, 64);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto d = static_cast<Eigen::Index>(dim(rng));
    MatD anchors(count(rng), d);
    VecD x(d);
    for (Eigen::Index i = 0; i < anchors.size(); ++i) anchors.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < d; ++i) x[i] = n(rng);
    const MatD r = random_orthogonal(static_cast<std::size_t>(d), rng);
    const VecD a = relative_projection(x, anchors);
    const VecD b = relative_projection(r.transpose() * x, anchors * r);
    worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
  }
  return {worst < 1e-6, "1000 triples, max deviation " + fmt(worst, 3)};
}

// 8. Rotated clone, both paradigms at full rank.
Outcome rotated_clone() {
  const double t0 = cpu_seconds();
  auto& f = lookup_fixture();
  const auto clone = make_rotated_clone(f.p, 808);
  const ParamsModel native(f.p), target(clone.params);
  const auto g = greedy(8);
  const auto base = evaluate(f.full.file, native, nullptr, ScoringRule::kNormalizedExactMatch, g, jobs());

  // Anchors: datacard samples plus fresh unscored items.
  std::set<std::string> scored;
  for (const auto& r : f.full.file.records) scored.insert(f.bench.find(r.id)->prompt);
  std::vector<std::string> anchors;
  for (const auto& s : f.full.datacard.samples) anchors.push_back(s.prompt);
  for (const auto& it : f.task.benchmark(400, 4242).items) {
    if (anchors.size() >= 160) break;
    if (!scored.count(it.prompt)) anchors.push_back(it.prompt);
  }
  const auto sub = fit_subspace_alignment(f.p, clone.params, f.p.config.d_model);
  const auto rel = fit_relative_map(anchors, f.p, clone.params);
  const auto es = evaluate(f.full.file, target, &sub, ScoringRule::kNormalizedExactMatch, g, jobs());
  const auto er = evaluate(f.full.file, target, &rel, ScoringRule::kNormalizedExactMatch, g, jobs());
  const double ds = std::fabs(es.accuracy - base.accuracy), dr = std::fabs(er.accuracy - base.accuracy);
  const double cpu = cpu_seconds() - t0;
  return {ds <= 0.02 && dr <= 0.02 && cpu < 600,
          "native " + fmt(base.accuracy, 4) + ", subspace " + fmt(es.accuracy, 4) + ", relative " +
              fmt(er.accuracy, 4) + " (" + std::to_string(anchors.size()) + " anchors, " +
              std::to_string(rel.warnings.size()) + " warnings), " + fmt(cpu, 3) + " s cpu" +
              (rel.warnings.empty() ? "" : "; first warning: " + rel.warnings[0])};
}

// 9. Contamination lab, 3 paired trials.
Outcome unlearnability_contrast() {
  const double t0 = cpu_seconds();
  ExperimentConfig cfg;
  cfg.trials = 3;
  const auto rep = run_contamination_experiment(cfg, jobs());
  const double cpu = cpu_seconds() - t0;
  bool ok = rep.deltas_reportable && cpu < 1800;
  std::string d;
  for (const auto& s : rep.arms) d += to_string(s.mode) + " " + fmt(s.mean_accuracy, 3) + "; ";
  for (const auto& x : rep.deltas) {
    d += to_string(x.mode) + " delta " + fmt(x.mean, 3) + " sd " + fmt(x.sd, 3) + "; ";
    if (x.mode == ContaminationMode::kPlaintext) ok = ok && x.exceeds;
    if (x.mode == ContaminationMode::kCrdPayload) ok = ok && x.within;
  }
  for (const auto& r : rep.runs) ok = ok && !r.failed;
  return {ok && rep.deltas.size() == 2, d + fmt(cpu, 4) + " s cpu"};
}

// 10. Nearest-embedding inversion on matched MHA and GQA models.
Outcome inversion_asymmetry() {
  const double t0 = cpu_seconds();
  PlainBenchmark bench;
  std::mt19937_64 rng(1010);
  for (int i = 0; i < 100; ++i)
    bench.items.push_back({"p" + std::to_string(i), testing::random_text(rng, 8, 60), "-"});
  std::map<std::string, TokenSeq> truth;
  for (const auto& it : bench.items) truth[it.id] = encode_text(it.prompt);

  double rate[2][4];
  double noise_worst = 0;
  bool noise_ok = true;
  for (int gqa = 0; gqa < 2; ++gqa) {
    const auto p = init_model<float>(default_config(gqa == 1));
    CurationOptions o;
    o.calibration_size = 0;
    o.timestamp = "-";
    o.jobs = jobs();
    const auto file = curate(bench, p, o).file;
    for (std::size_t layer = 0; layer < p.config.n_layers; ++layer) {
      AttackConfig a;
      a.layer = layer;
      rate[gqa][layer] = score_recovery(inversion_probe(file, p, a), truth).rate();
    }
    AttackConfig a;
    const auto nf = make_noise_file(p, 20000, 77 + gqa);
    const double nr = score_recovery(inversion_probe(nf.file, p, a), nf.truth).rate();
    noise_worst = std::max(noise_worst, nr);
    noise_ok = noise_ok && nr <= 3.0 / 259.0 && nr >= 1.0 / (3.0 * 259.0);
  }
  const double cpu = cpu_seconds() - t0;
  std::string d = "layer 0 MHA " + fmt(rate[0][0], 3) + " vs GQA " + fmt(rate[1][0], 3) + "; deeper";
  for (int l = 1; l < 4; ++l) d += " " + fmt(rate[0][l], 2) + "/" + fmt(rate[1][l], 2);
  d += "; noise max " + fmt(noise_worst, 3) + " (chance " + fmt(1.0 / 259.0, 3) + "), " + fmt(cpu, 3) + " s cpu";
  return {rate[0][0] >= rate[1][0] && noise_ok && cpu < 600, d};
}

// Counts every token fed to the model during evaluation.
class RecordingModel {
 public:
  explicit RecordingModel(const ModelParams<float>& p) : inner_(p) {}
  const Digest& fingerprint() const { return inner_.fingerprint(); }
  DecodeResult<float> decode_first(const KVCache<float>& c, std::span<const float> h) const {
    return inner_.decode_first(c, h);
  }
  DecodeResult<float> decode_step(KVCache<float>& c, Token t) const {
    std::lock_guard lock(mu_);
    fed_.push_back(t);
    return inner_.decode_step(c, t);
  }
  const TokenSeq& fed() const { return fed_; }

 private:
  ParamsModel inner_;
  mutable std::mutex mu_;
  mutable TokenSeq fed_;
};

// 11. No scored prompt reaches the model; structural check on curated files.
Outcome plaintext_freedom() {
  const auto p = init_model<float>(testing::small_config(2, 32, 4, 2, 11));
  const LookupTask task(3);
  const auto bench = task.benchmark(120, 5);
  std::size_t hits = 0, files = 0, passed = 0, fed = 0;
  for (DType dt : {DType::kF32, DType::kF16, DType::kQ8}) {
    for (double retain : {1.0, 0.2}) {
      CurationOptions o;
      o.dtype = dt;
      o.retain_fraction = retain;
      o.calibration_size = 8;
      o.max_new = 8;
      o.timestamp = "-";
      const auto cur = curate(bench, p, o);
      std::vector<std::string> prompts;
      for (const auto& r : cur.file.records) prompts.push_back(bench.find(r.id)->prompt);
      ++files;
      passed += structural_unlearnability_check(cur.file, prompts).passed();
      RecordingModel spy(p);
      evaluate(cur.file, spy, nullptr, ScoringRule::kNormalizedExactMatch, greedy(8), 2);
      fed += spy.fed().size();
      for (const auto& s : prompts) {
        const TokenSeq t = encode_text(s, false);
        hits += std::search(spy.fed().begin(), spy.fed().end(), t.begin(), t.end()) != spy.fed().end();
      }
    }
  }
  return {hits == 0 && passed == files && fed > 0,
          std::to_string(fed) + " tokens fed, " + std::to_string(hits) + " prompt matches; structural check " +
              std::to_string(passed) + "/" + std::to_string(files) + " files"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "cache-vs-plaintext equivalence", asymmetry_equivalence},
      {2, "gradient check", gradient_check},
      {3, "format round trip", format_round_trip},
      {4, "storage arithmetic", storage_arithmetic},
      {5, "compression at retain 0.2", compression_behavior},
      {6, "procrustes recovery", procrustes_recovery},
      {7, "relative invariance", relative_invariance},
      {8, "rotated-clone translation", rotated_clone},
      {9, "contamination contrast", unlearnability_contrast},
      {10, "inversion asymmetry", inversion_asymmetry},
      {11, "plaintext-freedom audit", plaintext_freedom},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int passed = 0, run = 0, unexpected = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    ++run;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    passed += o.pass;
    const bool known = kKnownFailures.count(c.id) > 0;
    if (!o.pass && !known) ++unexpected;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " " << c.name << ": " << o.detail
              << (!o.pass && known ? " [known failure]" : "") << std::endl;
  }
  std::cout << passed << "/" << run << " criteria passed";
  if (unexpected) std::cout << ", " << unexpected << " unexpected failure(s)";
  std::cout << std::endl;
  return unexpected ? 1 : 0;
}
