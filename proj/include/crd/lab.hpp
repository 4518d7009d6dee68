// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Desk-scale experiments: contamination arms trained from a shared init,
// cache inversion probes, and the structural no-training-path check.

#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "crd/curation.hpp"
#include "crd/evaluation.hpp"
#include "crd/format.hpp"
#include "crd/parallel.hpp"
#include "crd/tasks.hpp"
#include "crd/train.hpp"
#include "crd/translation.hpp"

namespace crd {

// ---------------------------------------------------------------------------
// Contamination experiment

enum class ContaminationMode { kNone, kPlaintext, kCrdPayload };

inline std::string to_string(ContaminationMode m) {
  switch (m) {
    case ContaminationMode::kNone: return "none";
    case ContaminationMode::kPlaintext: return "plaintext";
    case ContaminationMode::kCrdPayload: return "crd_payload";
  }
  return "?";
}

inline ContaminationMode parse_contamination_mode(std::string_view s) {
  if (s == "none" || s == "clean") return ContaminationMode::kNone;
  if (s == "plaintext") return ContaminationMode::kPlaintext;
  if (s == "crd_payload" || s == "crd") return ContaminationMode::kCrdPayload;
  fail(ErrorKind::kConfig, "unknown contamination mode '" + std::string(s) + "'");
}

inline ModelConfig lab_model_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 64;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.max_context = 64;
  return c;
}

struct ExperimentConfig {
  ModelConfig model = lab_model_config();  // model.seed is replaced per trial
  std::size_t corpus_size = 512;
  std::uint64_t corpus_seed = 1;
  std::size_t heldout_size = 64;
  std::size_t benchmark_items = 32;
  std::uint64_t benchmark_seed = 2;
  // Share of training sequences drawn from the injected set in the
  // contaminated arms. The clean arm draws filler in those slots.
  double contamination_fraction = 0.5;
  std::size_t payload_chunk = 32;  // bytes per training sequence for crd_payload
  std::size_t steps = 600;
  std::size_t batch = 16;
  double learning_rate = 3e-3;
  std::size_t trials = 3;
  std::uint64_t seed = 0;
  std::size_t max_new = 8;
  std::vector<ContaminationMode> arms = {ContaminationMode::kNone, ContaminationMode::kPlaintext,
                                         ContaminationMode::kCrdPayload};

  void validate() const {
    model.validate();
    require(corpus_size >= 1 && heldout_size >= 1, ErrorKind::kConfig, "corpus sizes must be >= 1");
    require(benchmark_items >= 1, ErrorKind::kConfig, "benchmark_items must be >= 1");
    require(contamination_fraction >= 0.0 && contamination_fraction <= 1.0, ErrorKind::kConfig,
            "contamination_fraction must be in [0, 1]");
    require(payload_chunk >= 2 && payload_chunk <= model.max_context, ErrorKind::kConfig,
            "payload_chunk must be in [2, max_context]");
    require(batch >= 1, ErrorKind::kConfig, "batch must be >= 1");
    require(learning_rate >= 0.0, ErrorKind::kConfig, "learning_rate must be >= 0");
    require(trials >= 1, ErrorKind::kConfig, "trials must be >= 1");
    require(max_new >= 1, ErrorKind::kConfig, "max_new must be >= 1");
    require(!arms.empty(), ErrorKind::kConfig, "no arms selected");
  }
};

struct ArmResult {
  ContaminationMode mode = ContaminationMode::kNone;
  std::size_t trial = 0;
  bool failed = false;
  std::string failure;
  double accuracy = 0.0;
  double heldout_loss = 0.0;
  double final_train_loss = 0.0;
};

struct ArmSummary {
  ContaminationMode mode = ContaminationMode::kNone;
  std::size_t trials_ok = 0;
  double mean_accuracy = 0.0;
  double sd_accuracy = 0.0;
  double mean_heldout_loss = 0.0;
};

// Paired difference arm - clean over trials where both arms finished.
struct ArmDelta {
  ContaminationMode mode = ContaminationMode::kNone;
  std::size_t pairs = 0;
  double mean = 0.0;
  double sd = 0.0;
  bool exceeds = false;  // mean > 2 sd
  bool within = false;   // |mean| <= 2 sd
};

struct LabReport {
  ExperimentConfig config;
  std::vector<ArmResult> runs;  // trial-major
  std::vector<ArmSummary> arms;
  std::vector<ArmDelta> deltas;
  bool deltas_reportable = false;  // at least 3 paired trials
  std::vector<std::string> notes;
};

namespace detail {

inline std::uint64_t trial_seed(std::uint64_t base, std::size_t trial) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (trial + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
}

// CRD accuracy of a model on a benchmark: it curates its own file, then
// evaluates from records only.
inline double crd_accuracy(const PlainBenchmark& bench, const ModelParams<float>& p, std::size_t max_new) {
  CurationOptions co;
  co.calibration_size = 0;
  co.max_new = max_new;
  co.timestamp = "-";
  const auto cur = curate(bench, p, co);
  GenerateOptions g;
  g.max_new = max_new;
  return evaluate(cur.file, ParamsModel(p), nullptr, parse_scoring(bench.scoring), g).accuracy;
}

}  // namespace detail

inline LabReport run_contamination_experiment(const ExperimentConfig& cfg, std::size_t jobs = 1) {
  cfg.validate();
  LabReport rep;
  rep.config = cfg;
  rep.notes.push_back(
      "covers next-token training with the optimizer and budget below; no finite run can speak for every "
      "training procedure or loss");

  const PlainBenchmark bench = memorization_benchmark(cfg.benchmark_items, cfg.benchmark_seed);
  const auto corpus = filler_corpus(cfg.corpus_size, cfg.corpus_seed);
  const auto heldout = filler_corpus(cfg.heldout_size, cfg.corpus_seed ^ 0x5bd1e995ULL);
  std::vector<TokenSeq> plaintext;
  for (const auto& it : bench.items) plaintext.push_back(qa_sequence(it.prompt, it.answer));

  const std::size_t n_arms = cfg.arms.size();
  rep.runs.resize(cfg.trials * n_arms);
  // The payload is curated by each trial's initial model, so it exists
  // before any arm trains and is shared by every arm of that trial.
  std::vector<std::vector<TokenSeq>> payload(cfg.trials);
  parallel_for(cfg.trials, jobs, [&](std::size_t t) {
    ModelConfig mc = cfg.model;
    mc.seed = detail::trial_seed(cfg.seed, t);
    const auto init = init_model<float>(mc);
    CurationOptions co;
    co.calibration_size = 0;
    co.max_new = cfg.max_new;
    co.timestamp = "-";
    payload[t] = bytes_as_sequences(encode_file(curate(bench, init, co).file), cfg.payload_chunk);
  });

  parallel_for(cfg.trials * n_arms, jobs, [&](std::size_t job) {
    const std::size_t t = job / n_arms;
    ArmResult& r = rep.runs[job];
    r.trial = t;
    r.mode = cfg.arms[job % n_arms];
    ModelConfig mc = cfg.model;
    mc.seed = detail::trial_seed(cfg.seed, t);
    auto p = init_model<float>(mc);
    const std::vector<TokenSeq>* injected = nullptr;
    if (r.mode == ContaminationMode::kPlaintext) injected = &plaintext;
    if (r.mode == ContaminationMode::kCrdPayload) injected = &payload[t];
    // Same draws in every arm of a trial; only what fills the injected
    // slots differs.
    std::mt19937_64 rng(mc.seed ^ 0xa0761d6478bd642fULL);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    OptimizerOptions opt;
    opt.learning_rate = cfg.learning_rate;
    try {
      const auto log = train_loop(p, cfg.steps, opt, [&](std::size_t) {
        std::vector<TokenSeq> b;
        for (std::size_t i = 0; i < cfg.batch; ++i) {
          const bool inject = u(rng) < cfg.contamination_fraction;
          const std::uint64_t a = rng(), c = rng();
          if (inject && injected && !injected->empty()) {
            b.push_back((*injected)[a % injected->size()]);
          } else {
            b.push_back(corpus[c % corpus.size()]);
          }
        }
        return b;
      });
      r.final_train_loss = log.final_loss();
      r.heldout_loss = mean_sequence_loss(p, heldout);
      require(std::isfinite(r.heldout_loss), ErrorKind::kDivergence, "non-finite held-out loss");
      r.accuracy = detail::crd_accuracy(bench, p, cfg.max_new);
    } catch (const Error& e) {
      r.failed = true;
      r.failure = e.what();
    }
  });

  for (std::size_t a = 0; a < n_arms; ++a) {
    ArmSummary s;
    s.mode = cfg.arms[a];
    std::vector<double> acc, loss;
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      const auto& r = rep.runs[t * n_arms + a];
      if (r.failed) continue;
      acc.push_back(r.accuracy);
      loss.push_back(r.heldout_loss);
    }
    s.trials_ok = acc.size();
    double unused = 0.0;
    detail::mean_sd(acc, s.mean_accuracy, s.sd_accuracy);
    detail::mean_sd(loss, s.mean_heldout_loss, unused);
    rep.arms.push_back(s);
  }

  const auto clean_it = std::find(cfg.arms.begin(), cfg.arms.end(), ContaminationMode::kNone);
  if (clean_it == cfg.arms.end()) {
    rep.notes.push_back("no clean arm, deltas not computed");
    return rep;
  }
  const std::size_t clean = static_cast<std::size_t>(clean_it - cfg.arms.begin());
  std::size_t min_pairs = cfg.trials;
  for (std::size_t a = 0; a < n_arms; ++a) {
    if (a == clean) continue;
    ArmDelta d;
    d.mode = cfg.arms[a];
    std::vector<double> diff;
    for (std::size_t t = 0; t < cfg.trials; ++t) {
      const auto& x = rep.runs[t * n_arms + a];
      const auto& c = rep.runs[t * n_arms + clean];
      if (!x.failed && !c.failed) diff.push_back(x.accuracy - c.accuracy);
    }
    d.pairs = diff.size();
    min_pairs = std::min(min_pairs, d.pairs);
    detail::mean_sd(diff, d.mean, d.sd);
    d.exceeds = d.pairs > 0 && d.mean > 2.0 * d.sd;
    d.within = d.pairs > 0 && std::fabs(d.mean) <= 2.0 * d.sd;
    rep.deltas.push_back(d);
  }
  rep.deltas_reportable = min_pairs >= 3;
  if (!rep.deltas_reportable) rep.notes.push_back("fewer than 3 paired trials; deltas are indicative only");
  for (const auto& r : rep.runs)
    if (r.failed) rep.notes.push_back("trial " + std::to_string(r.trial) + " arm " + to_string(r.mode) + " failed: " + r.failure);
  return rep;
}

inline json lab_report_to_json(const LabReport& r) {
  json runs = json::array();
  for (const auto& x : r.runs) {
    runs.push_back({{"trial", x.trial},
                    {"arm", to_string(x.mode)},
                    {"failed", x.failed},
                    {"failure", x.failure},
                    {"accuracy", x.accuracy},
                    {"heldout_loss", x.heldout_loss},
                    {"final_train_loss", x.final_train_loss}});
  }
  json arms = json::array();
  for (const auto& a : r.arms) {
    arms.push_back({{"arm", to_string(a.mode)},
                    {"trials_ok", a.trials_ok},
                    {"mean_accuracy", a.mean_accuracy},
                    {"sd_accuracy", a.sd_accuracy},
                    {"mean_heldout_loss", a.mean_heldout_loss}});
  }
  json deltas = json::array();
  for (const auto& d : r.deltas) {
    deltas.push_back({{"arm", to_string(d.mode)},
                      {"vs", "none"},
                      {"pairs", d.pairs},
                      {"mean", d.mean},
                      {"sd", d.sd},
                      {"exceeds_2sd", d.exceeds},
                      {"within_2sd", d.within}});
  }
  return {{"runs", runs}, {"arms", arms}, {"deltas", deltas}, {"deltas_reportable", r.deltas_reportable},
          {"notes", r.notes}};
}

inline std::string format_lab_summary(const LabReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  for (const auto& n : r.notes) os << "# " << n << "\n";
  os << "arm           trials  accuracy (mean +- sd)   held-out loss\n";
  for (const auto& a : r.arms) {
    os << std::left << std::setw(14) << to_string(a.mode) << std::right << std::setw(6) << a.trials_ok << "  "
       << a.mean_accuracy << " +- " << a.sd_accuracy << "       " << a.mean_heldout_loss << "\n";
  }
  for (const auto& d : r.deltas) {
    os << "delta " << to_string(d.mode) << " - none: " << d.mean << " (sd " << d.sd << ", " << d.pairs
       << " pairs) " << (d.exceeds ? "exceeds 2sd" : (d.within ? "within 2sd" : "inconclusive")) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Inversion probes

enum class AttackKind { kNearestEmbedding, kLearnedInverter };
enum class TensorFamily { kKeys, kValues };

inline std::string to_string(AttackKind a) {
  return a == AttackKind::kNearestEmbedding ? "nearest_embedding" : "learned_inverter";
}
inline std::string to_string(TensorFamily f) { return f == TensorFamily::kKeys ? "keys" : "values"; }

inline AttackKind parse_attack(std::string_view s) {
  if (s == "nearest_embedding") return AttackKind::kNearestEmbedding;
  if (s == "learned_inverter") return AttackKind::kLearnedInverter;
  fail(ErrorKind::kConfig, "unknown attack '" + std::string(s) + "'");
}

inline TensorFamily parse_family(std::string_view s) {
  if (s == "keys" || s == "K" || s == "k") return TensorFamily::kKeys;
  if (s == "values" || s == "V" || s == "v") return TensorFamily::kValues;
  fail(ErrorKind::kConfig, "unknown tensor family '" + std::string(s) + "'");
}

inline constexpr std::size_t kMaxAttackBudget = 100000;

struct AttackConfig {
  AttackKind attack = AttackKind::kNearestEmbedding;
  TensorFamily family = TensorFamily::kKeys;
  std::size_t layer = 0;
  std::size_t budget = 256;  // learned inverter: attacker prompts generated
  double ridge = 1e-3;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& c) const {
    require(layer < c.n_layers, ErrorKind::kParameter,
            "layer " + std::to_string(layer) + " out of range for a " + std::to_string(c.n_layers) + "-layer model");
    require(budget >= 1 && budget <= kMaxAttackBudget, ErrorKind::kParameter,
            "budget must be in [1, " + std::to_string(kMaxAttackBudget) + "]");
    require(ridge >= 0.0, ErrorKind::kParameter, "ridge must be >= 0");
  }
};

struct InversionGuess {
  std::string id;
  std::vector<std::uint32_t> positions;
  TokenSeq tokens;  // one guess per retained position
};

struct InversionResult {
  AttackConfig config;
  std::vector<InversionGuess> guesses;
  bool used_pseudo_inverse = false;
  std::size_t projection_rank = 0;
  std::vector<std::string> notes;
};

namespace detail {

// Cached rows of one layer with the positional rotation taken back out.
inline MatD attack_rows(const ModelConfig& c, const LayerCache<float>& lc, TensorFamily fam) {
  const std::size_t kv = c.kv_dim();
  MatD out(static_cast<Eigen::Index>(lc.size()), static_cast<Eigen::Index>(kv));
  std::vector<float> row(kv);
  for (std::size_t i = 0; i < lc.size(); ++i) {
    const auto& src = fam == TensorFamily::kKeys ? lc.keys : lc.values;
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(i * kv), src.begin() + static_cast<std::ptrdiff_t>((i + 1) * kv),
              row.begin());
    if (fam == TensorFamily::kKeys && c.pos_encoding == PosEncoding::kRotary)
      kernels::rope_row(row.data(), c.n_kv_heads, c.d_head(), lc.positions[i], c.rope_base, -1.0);
    for (std::size_t j = 0; j < kv; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  return out;
}

// Normed activation every token would present to the first block at `pos`.
inline MatD candidate_activations(const ModelParams<float>& p, std::size_t layer, std::size_t pos) {
  const auto& c = p.config;
  const auto& lp = p.layers[layer];
  MatD out(static_cast<Eigen::Index>(c.vocab_size), static_cast<Eigen::Index>(c.d_model));
  std::vector<float> x(c.d_model), a(c.d_model);
  for (std::size_t v = 0; v < c.vocab_size; ++v) {
    embed_row(p, static_cast<Token>(v), pos, x.data());
    kernels::norm_row(x.data(), c.d_model, c.norm, static_cast<float>(c.norm_eps), lp.attn_norm_w.data(),
                      bias_ptr(lp.attn_norm_b), a.data());
    for (std::size_t j = 0; j < c.d_model; ++j) out(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(j)) = a[j];
  }
  return out;
}

inline Token nearest_row(const MatD& candidates, const RowD& x) {
  Eigen::Index best = 0;
  (candidates.rowwise() - x).rowwise().squaredNorm().minCoeff(&best);
  return static_cast<Token>(best);
}

inline InversionResult nearest_embedding_attack(const CRDFile& f, const ModelParams<float>& p,
                                                const AttackConfig& cfg) {
  const auto& c = p.config;
  InversionResult res;
  res.config = cfg;
  const auto& lp = p.layers[cfg.layer];
  const MatD w = to_double(cfg.family == TensorFamily::kKeys ? lp.wk : lp.wv);  // d x kv
  Eigen::CompleteOrthogonalDecomposition<MatD> cod(w);
  res.projection_rank = static_cast<std::size_t>(cod.rank());
  const MatD pinv = cod.pseudoInverse();  // kv x d
  if (res.projection_rank < c.d_model) {
    res.used_pseudo_inverse = true;
    res.notes.push_back("W_" + std::string(cfg.family == TensorFamily::kKeys ? "K" : "V") + " of layer " +
                        std::to_string(cfg.layer) + " has rank " + std::to_string(res.projection_rank) + " < d_model " +
                        std::to_string(c.d_model) + "; least-squares inverse restricted to its row space");
  }
  if (cfg.layer > 0) res.notes.push_back("layer > 0: candidates ignore earlier blocks' contribution");
  const MatD proj = w * pinv;  // d x d projector onto the row space of W
  const bool per_position = c.pos_encoding == PosEncoding::kLearnedAbsolute;
  std::map<std::size_t, MatD> cand_cache;
  auto candidates = [&](std::size_t pos) -> const MatD& {
    const std::size_t key = per_position ? pos : 0;
    auto it = cand_cache.find(key);
    if (it == cand_cache.end()) it = cand_cache.emplace(key, candidate_activations(p, cfg.layer, key) * proj).first;
    return it->second;
  };
  for (const auto& r : f.records) {
    const auto& lc = r.cache.layers.at(cfg.layer);
    const MatD rows = attack_rows(c, lc, cfg.family);
    const MatD est = rows * pinv;  // n x d
    InversionGuess g;
    g.id = r.id;
    g.positions = lc.positions;
    for (Eigen::Index i = 0; i < est.rows(); ++i)
      g.tokens.push_back(nearest_row(candidates(lc.positions[static_cast<std::size_t>(i)]), est.row(i)));
    res.guesses.push_back(std::move(g));
  }
  return res;
}

// Ridge-regularized linear map from rows to one-hot tokens, fitted on
// prompts the attacker makes up (printable ASCII, random lengths).
inline InversionResult learned_inverter_attack(const CRDFile& f, const ModelParams<float>& p,
                                               const AttackConfig& cfg) {
  const auto& c = p.config;
  InversionResult res;
  res.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> byte(32, 126);
  const std::size_t max_len = std::min<std::size_t>(c.max_context, 48);
  std::uniform_int_distribution<std::size_t> len(4, max_len - 1);
  std::vector<MatD> xs;
  std::vector<Token> ys;
  Eigen::Index rows = 0;
  for (std::size_t i = 0; i < cfg.budget; ++i) {
    std::string s(len(rng), ' ');
    for (auto& ch : s) ch = static_cast<char>(byte(rng));
    const TokenSeq t = encode_text(s);
    const auto pre = prefill(p, t);
    xs.push_back(attack_rows(c, pre.cache.layers[cfg.layer], cfg.family));
    rows += xs.back().rows();
    ys.insert(ys.end(), t.begin(), t.end());
  }
  const auto kv = static_cast<Eigen::Index>(c.kv_dim());
  MatD x(rows, kv + 1);
  MatD y = MatD::Zero(rows, static_cast<Eigen::Index>(c.vocab_size));
  Eigen::Index at = 0;
  for (const auto& m : xs) {
    x.block(at, 0, m.rows(), kv) = m;
    at += m.rows();
  }
  x.col(kv).setOnes();
  for (Eigen::Index i = 0; i < rows; ++i) y(i, ys[static_cast<std::size_t>(i)]) = 1.0;
  MatD gram = x.transpose() * x;
  gram.diagonal().array() += cfg.ridge * std::max(1.0, gram.diagonal().mean());
  const MatD coef = gram.ldlt().solve(x.transpose() * y);
  res.projection_rank = static_cast<std::size_t>(kv);
  res.notes.push_back("inverter fitted on " + std::to_string(rows) + " rows from " + std::to_string(cfg.budget) +
                      " attacker prompts");
  for (const auto& r : f.records) {
    const auto& lc = r.cache.layers.at(cfg.layer);
    MatD q(static_cast<Eigen::Index>(lc.size()), kv + 1);
    q.leftCols(kv) = attack_rows(c, lc, cfg.family);
    q.col(kv).setOnes();
    const MatD scores = q * coef;
    InversionGuess g;
    g.id = r.id;
    g.positions = lc.positions;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      Eigen::Index best = 0;
      scores.row(i).maxCoeff(&best);
      g.tokens.push_back(static_cast<Token>(best));
    }
    res.guesses.push_back(std::move(g));
  }
  return res;
}

}  // namespace detail

// The attacker's view: the released file and the model weights. Ground truth
// is not an input here; it only meets the guesses in score_recovery().
inline InversionResult inversion_probe(const CRDFile& f, const ModelParams<float>& p, const AttackConfig& cfg) {
  cfg.validate(p.config);
  require(f.fingerprint == model_fingerprint(p), ErrorKind::kCompatibility,
          "attack model does not match the file's anchor fingerprint");
  for (const auto& r : f.records) {
    require(r.cache.layers.size() == p.config.n_layers && r.cache.kv_dim() == p.config.kv_dim(), ErrorKind::kShape,
            "record '" + r.id + "' does not match the model shape");
  }
  return cfg.attack == AttackKind::kNearestEmbedding ? detail::nearest_embedding_attack(f, p, cfg)
                                                     : detail::learned_inverter_attack(f, p, cfg);
}

struct RecoveryScore {
  std::size_t recovered = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(recovered) / static_cast<double>(total) : 0.0; }
};

// Fraction of prompt tokens recovered at their own position. Position 0
// (BOS) is excluded; positions dropped by compression count as misses.
inline RecoveryScore score_recovery(const InversionResult& res, const std::map<std::string, TokenSeq>& truth) {
  RecoveryScore s;
  for (const auto& g : res.guesses) {
    const auto it = truth.find(g.id);
    require(it != truth.end(), ErrorKind::kValidation, "no ground truth for record '" + g.id + "'");
    const TokenSeq& t = it->second;
    if (t.size() > 1) s.total += t.size() - 1;
    for (std::size_t i = 0; i < g.positions.size(); ++i) {
      const auto pos = g.positions[i];
      if (pos >= 1 && pos < t.size() && g.tokens[i] == t[pos]) ++s.recovered;
    }
  }
  return s;
}

struct NoiseFile {
  CRDFile file;
  std::map<std::string, TokenSeq> truth;
};

// Gaussian caches no prompt produced, labelled with uniformly drawn tokens.
// Any attack scores chance (1/V) against them in expectation.
inline NoiseFile make_noise_file(const ModelParams<float>& p, std::size_t positions, std::uint64_t seed) {
  const auto& c = p.config;
  require(positions >= 1, ErrorKind::kParameter, "noise baseline needs at least one position");
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::uniform_int_distribution<std::size_t> tok(0, c.vocab_size - 1);
  const std::size_t per_record = std::min<std::size_t>(c.max_context, 64);
  NoiseFile out;
  out.file.fingerprint = model_fingerprint(p);
  for (std::size_t done = 0, r = 0; done < positions; ++r) {
    const std::size_t t = std::min(per_record, positions - done + 1);
    KVCache<float> cache;
    cache.prompt_length = cache.next_position = t;
    cache.n_kv_heads = c.n_kv_heads;
    cache.d_head = c.d_head();
    cache.layers.resize(c.n_layers);
    for (auto& lc : cache.layers) {
      for (std::size_t i = 0; i < t; ++i) lc.positions.push_back(static_cast<std::uint32_t>(i));
      lc.keys.resize(t * c.kv_dim());
      lc.values.resize(t * c.kv_dim());
      for (auto& v : lc.keys) v = n(rng);
      for (auto& v : lc.values) v = n(rng);
    }
    std::vector<float> h(c.d_model);
    for (auto& v : h) v = n(rng);
    const std::string id = "noise-" + std::to_string(r);
    TokenSeq truth(t);
    for (auto& v : truth) v = static_cast<Token>(tok(rng));
    out.truth[id] = std::move(truth);
    out.file.records.push_back(make_record(id, cache, h, "", DType::kF32));
    done += t - 1;
  }
  return out;
}

inline json inversion_report_to_json(const InversionResult& r, const std::optional<RecoveryScore>& s) {
  json j{{"attack", to_string(r.config.attack)},
         {"family", to_string(r.config.family)},
         {"layer", r.config.layer},
         {"budget", r.config.budget},
         {"records", r.guesses.size()},
         {"used_pseudo_inverse", r.used_pseudo_inverse},
         {"projection_rank", r.projection_rank},
         {"notes", r.notes}};
  if (s) {
    j["recovered"] = s->recovered;
    j["total"] = s->total;
    j["recovery_rate"] = s->rate();
  }
  return j;
}

// ---------------------------------------------------------------------------
// Structural check

struct SchemaField {
  const char* name;
  const char* kind;
};

// On-disk record layout, in order (see encode_record).
inline constexpr std::array<SchemaField, 14> kRecordSchema = {{
    {"id", "utf8"},
    {"prompt_length", "u32"},
    {"n_layers", "u16"},
    {"n_kv_heads", "u16"},
    {"d_head", "u16"},
    {"dtype", "u8"},
    {"layer.retained_count", "u32"},
    {"layer.retained_positions", "u32[]"},
    {"layer.keys", "tensor"},
    {"layer.values", "tensor"},
    {"h", "tensor"},
    {"q8_scales", "f32[]"},
    {"y", "utf8"},
    {"checksum", "u64"},
}};

template <class X>
concept TrainableFrom = requires(const ModelParams<float>& p, const X& x) { train_step(p, x, 0.1f); };

// Nothing in the public interface turns released records into training input.
inline constexpr bool kNoTrainingPath =
    !std::is_convertible_v<CRDRecord, TokenSeq> && !std::is_constructible_v<TokenSeq, CRDRecord> &&
    !std::is_convertible_v<CRDFile, std::span<const TokenSeq>> && !TrainableFrom<CRDRecord> &&
    !TrainableFrom<CRDFile> && !TrainableFrom<std::vector<CRDRecord>> && TrainableFrom<std::vector<TokenSeq>>;
static_assert(kNoTrainingPath);

struct StructuralReport {
  bool schema_ok = true;
  bool scan_ok = true;
  bool type_ok = true;
  std::size_t prompts_scanned = 0;
  std::vector<std::string> violations;
  bool passed() const { return schema_ok && scan_ok && type_ok; }
};

// Prompts shorter than this many tokens are not scanned; 1-3 byte runs turn
// up in float payloads by chance.
inline constexpr std::size_t kMinScanTokens = 4;

inline StructuralReport structural_unlearnability_check(const CRDFile& f, std::span<const std::string> prompts) {
  StructuralReport rep;
  for (const auto& field : kRecordSchema) {
    const std::string_view kind = field.kind, name = field.name;
    if (kind == "token_ids" || name.find("token") != std::string_view::npos ||
        name.find("prompt_text") != std::string_view::npos) {
      rep.schema_ok = false;
      rep.violations.push_back(std::string("schema: field '") + field.name + "' carries token ids");
    }
  }
  const Bytes bytes = encode_file(f);
  for (const auto& prompt : prompts) {
    const TokenSeq t = encode_text(prompt, false);
    if (t.size() < kMinScanTokens) continue;
    ++rep.prompts_scanned;
    if (contains_token_sequence(bytes, t)) {
      rep.scan_ok = false;
      rep.violations.push_back("byte scan: prompt token sequence found in file (\"" +
                               prompt.substr(0, std::min<std::size_t>(prompt.size(), 24)) + "\")");
    }
  }
  rep.type_ok = kNoTrainingPath;
  if (!rep.type_ok) rep.violations.push_back("types: a conversion from CRD records to training input exists");
  return rep;
}

inline json structural_report_to_json(const StructuralReport& r) {
  return {{"schema_ok", r.schema_ok},
          {"scan_ok", r.scan_ok},
          {"type_ok", r.type_ok},
          {"prompts_scanned", r.prompts_scanned},
          {"passed", r.passed()},
          {"violations", r.violations}};
}

}  // namespace crd
