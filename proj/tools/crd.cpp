// Copyright 2026 The crdkit Authors
// SPDX-License-Identifier: Apache-2.0

// crd: train toy models, curate CRD files, translate, evaluate, verify,
// attack, run lab experiments, and size releases.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "crd/lab.hpp"

namespace {

using namespace crd;
namespace fs = std::filesystem;

constexpr std::array<std::string_view, 8> kSubcommands = {"train",    "curate", "translate", "evaluate",
                                                           "verify",   "attack", "lab",       "storage"};
constexpr std::array<std::string_view, 4> kGlobalKeys = {"seed", "jobs", "out", "quiet"};

// JSON config files. Top-level keys belong to the subcommand being run,
// except the global flags; a top-level object named after a subcommand is
// that subcommand's section. Other object values become key=value lists
// (used for --model). Underscores in keys read as dashes.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(std::string section) : section_(std::move(section)) {}

  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}\n"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config must be a JSON object");
    std::vector<CLI::ConfigItem> out;
    for (const auto& [key, value] : j.items()) {
      const bool is_sub = std::find(kSubcommands.begin(), kSubcommands.end(), key) != kSubcommands.end();
      if (is_sub && value.is_object()) {
        for (const auto& [k, v] : value.items()) out.push_back(item({key}, k, v));
        continue;
      }
      const bool global = std::find(kGlobalKeys.begin(), kGlobalKeys.end(), key) != kGlobalKeys.end();
      std::vector<std::string> parents;
      if (!global && !section_.empty()) parents.push_back(section_);
      out.push_back(item(parents, key, value));
    }
    return out;
  }

 private:
  static std::string scalar(const json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw CLI::ConversionError("config key '" + key + "' has an unsupported value");
  }

  static CLI::ConfigItem item(std::vector<std::string> parents, std::string key, const json& v) {
    CLI::ConfigItem it;
    it.parents = std::move(parents);
    std::replace(key.begin(), key.end(), '_', '-');
    it.name = key;
    if (v.is_array()) {
      for (const auto& e : v) it.inputs.push_back(scalar(e, key));
    } else if (v.is_object()) {
      for (const auto& [k, e] : v.items()) it.inputs.push_back(k + "=" + scalar(e, key));
    } else {
      it.inputs.push_back(scalar(v, key));
    }
    return it;
  }

  std::string section_;
};

enum ExitCode { kOk = 0, kValidationFailure = 1, kGateFailure = 2, kRuntimeFailure = 3 };

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kIo:
    case ErrorKind::kDivergence:
    case ErrorKind::kContextOverflow:
      return kRuntimeFailure;
    default:
      return kValidationFailure;
  }
}

struct Globals {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string out = ".";
  bool quiet = false;
};

std::string out_file(const Globals& g, const std::string& name) {
  std::error_code ec;
  fs::create_directories(g.out, ec);
  require(!ec, ErrorKind::kIo, "cannot create output directory '" + g.out + "': " + ec.message());
  return (fs::path(g.out) / name).string();
}

void say(const Globals& g, const std::string& s) {
  if (!g.quiet) std::cout << s << std::flush;
}

ModelConfig model_from(const std::string& preset, const std::vector<std::string>& overrides) {
  ModelConfig c;
  if (preset == "default") c = default_config(false);
  else if (preset == "gqa") c = default_config(true);
  else if (preset == "lab") c = lab_model_config();
  else fail(ErrorKind::kConfig, "unknown model preset '" + preset + "'");
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorKind::kConfig, "model override '" + kv + "' is not key=value");
    require(kv.substr(0, eq) != "seed", ErrorKind::kConfig, "model seed comes from --seed");
    apply_config_key(c, std::string_view(kv).substr(0, eq), std::string_view(kv).substr(eq + 1));
  }
  return c;
}

std::string now_or(const std::string& ts) { return ts.empty() ? utc_timestamp() : ts; }

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string preset = "default";
  std::vector<std::string> model;
  std::string task = "lookup";
  std::size_t steps = 600;
  std::size_t batch = 16;
  double lr = 3e-3;
  std::size_t items = 64;
  std::uint64_t task_seed = 1;
  std::size_t emit_benchmark = 0;
  std::string output = "model.ckpt";
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  ModelConfig c = model_from(a.preset, a.model);
  c.seed = g.seed;
  auto p = init_model<float>(c);
  TrainLog log;
  PlainBenchmark bench;
  if (a.task == "lookup") {
    const LookupTask task(a.task_seed);
    log = train_lookup_model(p, task, a.steps, a.batch, a.lr, g.seed + 1);
    if (a.emit_benchmark) bench = task.benchmark(a.emit_benchmark, g.seed + 2);
  } else if (a.task == "memorization") {
    bench = memorization_benchmark(a.items, a.task_seed);
    std::vector<TokenSeq> seqs;
    for (const auto& it : bench.items) seqs.push_back(qa_sequence(it.prompt, it.answer));
    std::mt19937_64 rng(g.seed + 1);
    OptimizerOptions opt;
    opt.learning_rate = a.lr;
    log = train_loop(p, a.steps, opt, [&](std::size_t) {
      std::vector<TokenSeq> b;
      for (std::size_t i = 0; i < a.batch; ++i) b.push_back(seqs[rng() % seqs.size()]);
      return b;
    });
    if (!a.emit_benchmark) bench.items.clear();
  } else if (a.task == "filler") {
    const auto corpus = filler_corpus(4096, a.task_seed);
    std::mt19937_64 rng(g.seed + 1);
    OptimizerOptions opt;
    opt.learning_rate = a.lr;
    log = train_loop(p, a.steps, opt, [&](std::size_t) {
      std::vector<TokenSeq> b;
      for (std::size_t i = 0; i < a.batch; ++i) b.push_back(corpus[rng() % corpus.size()]);
      return b;
    });
  } else {
    fail(ErrorKind::kConfig, "unknown task '" + a.task + "' (lookup, memorization, filler)");
  }
  const std::string path = out_file(g, a.output);
  save_checkpoint(p, path);
  std::ostringstream os;
  os << "checkpoint   " << path << "\n"
     << "fingerprint  " << to_hex(model_fingerprint(p)) << "\n"
     << "parameters   " << p.parameter_count() << "\n"
     << "final loss   " << format_double(log.final_loss()) << "\n";
  if (!bench.items.empty()) {
    const std::string bpath = out_file(g, a.task + ".jsonl");
    save_benchmark(bench, bpath);
    os << "benchmark    " << bpath << " (" << bench.items.size() << " items)\n";
  }
  say(g, os.str());
  return kOk;
}

struct CurateArgs {
  std::string benchmark, checkpoint;
  std::string dtype = "f32";
  double retain = 1.0;
  std::size_t calibration = 16;
  std::size_t max_new = 16;
  std::string name = "dataset";
  std::string timestamp;
};

int cmd_curate(const Globals& g, const CurateArgs& a) {
  const auto bench = load_benchmark(a.benchmark);
  const auto p = load_checkpoint<float>(a.checkpoint);
  CurationOptions opt;
  opt.dtype = parse_dtype(a.dtype);
  opt.retain_fraction = a.retain;
  opt.calibration_size = a.calibration;
  opt.max_new = a.max_new;
  opt.seed = g.seed;
  opt.jobs = g.jobs;
  opt.timestamp = now_or(a.timestamp);
  const auto res = curate(bench, p, opt);

  std::vector<std::string> scored;
  for (const auto& r : res.file.records) scored.push_back(bench.find(r.id)->prompt);
  const auto check = structural_unlearnability_check(res.file, scored);
  require(check.passed(), ErrorKind::kValidation,
          "structural check failed: " + (check.violations.empty() ? std::string("?") : check.violations[0]));

  const std::string crd_path = out_file(g, a.name + ".crd");
  const std::string card_path = out_file(g, a.name + ".datacard");
  save_crd(res.file, crd_path);
  save_datacard(res.datacard, card_path);
  json rep = curation_report_to_json(res.report);
  rep["structural_check"] = structural_report_to_json(check);
  write_file(out_file(g, a.name + ".curation.json"), rep.dump(2) + "\n");
  std::ostringstream os;
  os << "records      " << res.report.records << "\n"
     << "calibration  " << res.report.calibration << "\n"
     << "skipped      " << res.report.skipped.size() << "\n"
     << "file         " << crd_path << " (" << fs::file_size(crd_path) << " bytes)\n"
     << "datacard     " << card_path << "\n";
  say(g, os.str());
  return kOk;
}

struct TranslateArgs {
  std::string crd, anchor, target;
  std::string paradigm = "subspace";
  std::size_t rank = 0;
  std::string datacard, anchors;
  std::size_t min_anchors = 8;
  std::string name = "translated";
};

int cmd_translate(const Globals& g, const TranslateArgs& a) {
  const auto file = load_crd(a.crd);
  const auto pa = load_checkpoint<float>(a.anchor);
  const auto pt = load_checkpoint<float>(a.target);
  AlignmentMap m;
  if (parse_paradigm(a.paradigm) == Paradigm::kSubspace) {
    m = fit_subspace_alignment(pa, pt, a.rank ? a.rank : default_rank(pa.config, pt.config));
  } else {
    std::vector<std::string> prompts;
    if (!a.datacard.empty()) {
      for (const auto& s : load_datacard(a.datacard).samples) prompts.push_back(s.prompt);
    }
    if (!a.anchors.empty()) {
      std::ifstream in(a.anchors);
      require(in.good(), ErrorKind::kIo, "cannot open '" + a.anchors + "'");
      for (std::string line; std::getline(in, line);)
        if (!line.empty()) prompts.push_back(line);
    }
    require(!prompts.empty(), ErrorKind::kValidation, "relative maps need anchor prompts (--datacard or --anchors)");
    RelativeMapOptions ro;
    ro.min_anchors = a.min_anchors;
    m = fit_relative_map(prompts, pa, pt, ro);
  }
  const auto out = translate_file(file, m);
  const std::string crd_path = out_file(g, a.name + ".crd");
  const std::string map_path = out_file(g, a.name + ".map");
  save_crd(out, crd_path);
  save_map(m, map_path);
  std::ostringstream os;
  os << std::setprecision(6);
  os << "paradigm     " << to_string(m.paradigm) << "\n";
  if (m.paradigm == Paradigm::kSubspace) os << "rank         " << m.rank << "\n";
  else os << "anchors      " << m.anchors << "\nrel. discrepancy " << m.relative_discrepancy << "\n";
  os << "max residual " << m.max_residual() << "\n"
     << "records      " << out.records.size() << "\n"
     << "file         " << crd_path << "\n"
     << "map          " << map_path << " (" << to_hex(map_fingerprint(m)).substr(0, 16) << ")\n";
  for (const auto& w : m.warnings) os << "warning: " << w << "\n";
  say(g, os.str());
  for (const auto& w : m.warnings)
    if (g.quiet) std::cerr << "warning: " << w << "\n";
  return kOk;
}

struct EvaluateArgs {
  std::string crd, checkpoint, map;
  std::string scoring = "normalized_exact_match";
  std::size_t max_new = 16;
  double temperature = 0.0;
  std::string report = "eval_report.jsonl";
};

int cmd_evaluate(const Globals& g, const EvaluateArgs& a) {
  const auto file = load_crd(a.crd);
  const auto p = load_checkpoint<float>(a.checkpoint);
  std::optional<AlignmentMap> m;
  if (!a.map.empty()) m = load_map(a.map);
  GenerateOptions gen;
  gen.max_new = a.max_new;
  gen.temperature = a.temperature;
  gen.seed = g.seed;
  const auto rep = evaluate(file, ParamsModel(p), m ? &*m : nullptr, parse_scoring(a.scoring), gen, g.jobs);
  write_file(out_file(g, a.report), eval_report_to_jsonl(rep, utc_timestamp()));
  say(g, format_eval_summary(rep));
  return kOk;
}

struct VerifyArgs {
  std::string benchmark, crd, checkpoint;
  std::string scoring = "normalized_exact_match";
  std::size_t max_new = 16;
  std::string report = "verify_report.jsonl";
};

int cmd_verify(const Globals& g, const VerifyArgs& a) {
  const auto bench = load_benchmark(a.benchmark);
  const auto file = load_crd(a.crd);
  const auto p = load_checkpoint<float>(a.checkpoint);
  GenerateOptions gen;
  gen.max_new = a.max_new;
  const auto rep = verify_equivalence(bench, file, p, parse_scoring(a.scoring), gen, g.jobs);
  write_file(out_file(g, a.report), equivalence_report_to_jsonl(rep, utc_timestamp()));
  say(g, format_equivalence_summary(rep));
  if (!rep.gate_passed) {
    std::cerr << "equivalence gate failed: lossless file but agreement " << rep.agreement_rate << "\n";
    return kGateFailure;
  }
  return kOk;
}

struct AttackArgs {
  std::string crd, checkpoint;
  std::string attack = "nearest_embedding";
  std::string family = "keys";
  std::size_t layer = 0;
  std::size_t budget = 256;
  std::size_t noise = 0;
  std::string report = "attack_report.json";
};

int cmd_attack(const Globals& g, const AttackArgs& a) {
  const auto file = load_crd(a.crd);
  const auto p = load_checkpoint<float>(a.checkpoint);
  AttackConfig ac;
  ac.attack = parse_attack(a.attack);
  ac.family = parse_family(a.family);
  ac.layer = a.layer;
  ac.budget = a.budget;
  ac.seed = g.seed;
  const auto res = inversion_probe(file, p, ac);
  json rep = inversion_report_to_json(res, std::nullopt);
  json guesses = json::array();
  for (const auto& gs : res.guesses) guesses.push_back({{"id", gs.id}, {"positions", gs.positions}, {"tokens", gs.tokens}});
  rep["guesses"] = guesses;
  std::ostringstream os;
  os << "attack       " << to_string(ac.attack) << " on layer " << ac.layer << " " << to_string(ac.family) << "\n"
     << "records      " << res.guesses.size() << "\n";
  for (const auto& n : res.notes) os << "note: " << n << "\n";
  if (a.noise) {
    const auto nf = make_noise_file(p, a.noise, g.seed + 1);
    const auto s = score_recovery(inversion_probe(nf.file, p, ac), nf.truth);
    rep["noise_baseline"] = {{"positions", s.total}, {"recovery_rate", s.rate()}, {"chance", 1.0 / p.config.vocab_size}};
    os << "noise rate   " << s.rate() << " (chance " << 1.0 / static_cast<double>(p.config.vocab_size) << ")\n";
  }
  write_file(out_file(g, a.report), rep.dump(2) + "\n");
  say(g, os.str());
  return kOk;
}

struct LabArgs {
  std::string experiment = "contamination";
  std::vector<std::string> model;
  std::string preset = "lab";
  std::size_t trials = 3, steps = 600, batch = 16, corpus_size = 512, benchmark_items = 32, payload_chunk = 32,
              max_new = 8;
  double lr = 3e-3, fraction = 0.5;
  std::vector<std::string> arms = {"none", "plaintext", "crd_payload"};
  std::size_t prompts = 100, layer = 0, budget = 256, noise = 20000;
  std::string attack = "nearest_embedding", family = "keys";
  std::string report = "lab_report.json";
};

int cmd_lab(const Globals& g, const LabArgs& a) {
  json out;
  std::ostringstream os;
  if (a.experiment == "contamination") {
    ExperimentConfig cfg;
    cfg.model = model_from(a.preset, a.model);
    cfg.trials = a.trials;
    cfg.steps = a.steps;
    cfg.batch = a.batch;
    cfg.learning_rate = a.lr;
    cfg.corpus_size = a.corpus_size;
    cfg.benchmark_items = a.benchmark_items;
    cfg.contamination_fraction = a.fraction;
    cfg.payload_chunk = a.payload_chunk;
    cfg.max_new = a.max_new;
    cfg.seed = g.seed;
    cfg.arms.clear();
    for (const auto& s : a.arms) cfg.arms.push_back(parse_contamination_mode(s));
    const auto rep = run_contamination_experiment(cfg, g.jobs);
    out = lab_report_to_json(rep);
    os << format_lab_summary(rep);
  } else if (a.experiment == "inversion") {
    AttackConfig ac;
    ac.attack = parse_attack(a.attack);
    ac.family = parse_family(a.family);
    ac.layer = a.layer;
    ac.budget = a.budget;
    ac.seed = g.seed;
    std::mt19937_64 rng(g.seed);
    PlainBenchmark bench;
    for (std::size_t i = 0; i < a.prompts; ++i) {
      const auto it = LookupTask(g.seed + 1).item(rng, "p" + std::to_string(i));
      bench.items.push_back(it);
    }
    std::map<std::string, TokenSeq> truth;
    for (const auto& it : bench.items) truth[it.id] = encode_text(it.prompt);
    json arch = json::array();
    os << "architecture  kv heads  recovery  noise     pseudo-inverse\n";
    for (const char* preset : {"default", "gqa"}) {
      ModelConfig c = model_from(preset, a.model);
      c.seed = g.seed;
      const auto p = init_model<float>(c);
      CurationOptions co;
      co.calibration_size = 0;
      co.timestamp = "-";
      const auto file = curate(bench, p, co).file;
      const auto res = inversion_probe(file, p, ac);
      const auto s = score_recovery(res, truth);
      const auto nf = make_noise_file(p, a.noise, g.seed + 1);
      const auto ns = score_recovery(inversion_probe(nf.file, p, ac), nf.truth);
      json j = inversion_report_to_json(res, s);
      j["architecture"] = std::string(preset) == "gqa" ? "GQA" : "MHA";
      j["n_kv_heads"] = c.n_kv_heads;
      j["noise_recovery_rate"] = ns.rate();
      arch.push_back(j);
      os << std::left << std::setw(14) << j["architecture"].get<std::string>() << std::setw(10) << c.n_kv_heads
         << std::setw(10) << s.rate() << std::setw(10) << ns.rate() << (res.used_pseudo_inverse ? "yes" : "no")
         << "\n";
    }
    out = {{"experiment", "inversion"}, {"chance", 1.0 / 259.0}, {"architectures", arch}};
  } else {
    fail(ErrorKind::kConfig, "unknown experiment '" + a.experiment + "' (contamination, inversion)");
  }
  write_file(out_file(g, a.report), out.dump(2) + "\n");
  say(g, os.str());
  return kOk;
}

struct StorageArgs {
  std::string preset = "llama2-7b";
  std::string checkpoint;
  std::size_t layers = 0, kv_heads = 0, d_head = 0;
  double tokens = 100000;
  std::vector<std::string> dtypes = {"f32", "f16", "q8"};
  std::vector<double> retain = {1.0, 0.2, 0.007};
  std::size_t records = 1;
};

std::string human_bytes(double b) {
  const char* units[] = {"B", "KB", "MB", "GB", "TB"};
  int u = 0;
  while (b >= 1000.0 && u < 4) {
    b /= 1000.0;
    ++u;
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(u ? 1 : 0) << b << " " << units[u];
  return os.str();
}

int cmd_storage(const Globals& g, const StorageArgs& a, bool write_json) {
  StorageShape s;
  if (!a.checkpoint.empty()) {
    s = storage_shape(load_checkpoint<float>(a.checkpoint).config);
  } else if (a.preset == "llama2-7b") {
    s = {32, 32, 128};
  } else if (a.preset == "default" || a.preset == "gqa") {
    s = storage_shape(default_config(a.preset == "gqa"));
  } else {
    fail(ErrorKind::kConfig, "unknown storage preset '" + a.preset + "'");
  }
  if (a.layers) s.n_layers = a.layers;
  if (a.kv_heads) s.n_kv_heads = a.kv_heads;
  if (a.d_head) s.d_head = a.d_head;
  require(a.tokens >= 0, ErrorKind::kParameter, "tokens must be >= 0");
  std::ostringstream os;
  os << "shape: " << s.n_layers << " layers x " << s.n_kv_heads << " kv heads x " << s.d_head << " d_head, "
     << a.tokens << " tokens\n";
  os << "dtype  retain   payload bytes        total\n";
  json rows = json::array();
  for (const auto& dt : a.dtypes) {
    for (double r : a.retain) {
      require(r > 0.0 && r <= 1.0, ErrorKind::kParameter, "retain fraction must be in (0, 1]");
      const auto e = estimate_storage(s, a.tokens, parse_dtype(dt), r, a.records);
      os << std::left << std::setw(7) << dt << std::setw(9) << r << std::setw(21) << std::fixed
         << std::setprecision(0) << e.payload_bytes << human_bytes(e.total_bytes()) << "\n"
         << std::defaultfloat;
      rows.push_back({{"dtype", dt}, {"retain", r}, {"payload_bytes", e.payload_bytes}, {"total_bytes", e.total_bytes()}});
    }
  }
  say(g, os.str());
  if (write_json) {
    write_file(out_file(g, "storage.json"),
               json{{"n_layers", s.n_layers}, {"n_kv_heads", s.n_kv_heads}, {"d_head", s.d_head}, {"tokens", a.tokens},
                    {"rows", rows}}
                       .dump(2) +
                   "\n");
  }
  return kOk;
}

// The subcommand named on the command line, for routing top-level config keys.
std::string find_subcommand(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string_view s = argv[i];
    if (std::find(kSubcommands.begin(), kSubcommands.end(), s) != kSubcommands.end()) return std::string(s);
  }
  return "";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crd: contamination-resistant benchmark datasets from KV caches"};
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.config_formatter(std::make_shared<JsonConfig>(find_subcommand(argc, argv)));
  app.set_config("--config", "", "JSON config; keys mirror the long options of the subcommand");
  app.option_defaults()->always_capture_default();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice in this run");
  app.add_option("--jobs", g.jobs, "Worker threads (0 = all cores)");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("--quiet", g.quiet, "Suppress the summary on stdout");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a toy model and write a checkpoint");
  train->add_option("--preset", ta.preset, "Model preset: default, gqa, lab");
  train->add_option("--model", ta.model, "Model config override key=value (repeatable)");
  train->add_option("--task", ta.task, "Training data: lookup, memorization, filler");
  train->add_option("--steps", ta.steps);
  train->add_option("--batch", ta.batch);
  train->add_option("--lr", ta.lr, "Adam learning rate");
  train->add_option("--items", ta.items, "Memorization task size");
  train->add_option("--task-seed", ta.task_seed, "Seed defining the task itself (code table, key/value pairs)");
  train->add_option("--emit-benchmark", ta.emit_benchmark, "Also write a JSONL benchmark with this many items");
  train->add_option("--output", ta.output, "Checkpoint file name inside --out");

  CurateArgs ca;
  auto* cur = app.add_subcommand("curate", "Project a plaintext benchmark into a CRD file and datacard");
  cur->add_option("--benchmark", ca.benchmark, "JSONL benchmark")->required();
  cur->add_option("--checkpoint", ca.checkpoint, "Anchor model")->required();
  cur->add_option("--dtype", ca.dtype, "f32, f16 or q8");
  cur->add_option("--retain", ca.retain, "Fraction of cache positions kept per layer");
  cur->add_option("--calibration", ca.calibration, "Items set aside as datacard samples");
  cur->add_option("--max-new", ca.max_new, "Context reserved for generation");
  cur->add_option("--name", ca.name, "Output base name");
  cur->add_option("--timestamp", ca.timestamp, "Fixed datacard timestamp (default: now)");

  TranslateArgs tr;
  auto* trans = app.add_subcommand("translate", "Map a CRD file into another model's latent space");
  trans->add_option("--crd", tr.crd)->required();
  trans->add_option("--anchor", tr.anchor, "Checkpoint that curated the file")->required();
  trans->add_option("--target", tr.target, "Checkpoint to translate into")->required();
  trans->add_option("--paradigm", tr.paradigm, "subspace or relative");
  trans->add_option("--rank", tr.rank, "Subspace rank (0 = min(d_model)/4)");
  trans->add_option("--datacard", tr.datacard, "Datacard whose samples serve as relative anchors");
  trans->add_option("--anchors", tr.anchors, "Text file of anchor prompts, one per line");
  trans->add_option("--min-anchors", tr.min_anchors);
  trans->add_option("--name", tr.name, "Output base name");

  EvaluateArgs ea;
  auto* eval = app.add_subcommand("evaluate", "Run a model on a CRD file and score against the answers");
  eval->add_option("--crd", ea.crd)->required();
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--map", ea.map, "Alignment map from translate");
  eval->add_option("--scoring", ea.scoring, "exact_match, normalized_exact_match, token_f1");
  eval->add_option("--max-new", ea.max_new);
  eval->add_option("--temperature", ea.temperature, "0 = greedy");
  eval->add_option("--report", ea.report);

  VerifyArgs va;
  auto* ver = app.add_subcommand("verify", "Paired plaintext vs CRD run on the anchor model");
  ver->add_option("--benchmark", va.benchmark)->required();
  ver->add_option("--crd", va.crd)->required();
  ver->add_option("--checkpoint", va.checkpoint)->required();
  ver->add_option("--scoring", va.scoring);
  ver->add_option("--max-new", va.max_new);
  ver->add_option("--report", va.report);

  AttackArgs aa;
  auto* att = app.add_subcommand("attack", "Try to recover prompt tokens from a CRD file");
  att->add_option("--crd", aa.crd)->required();
  att->add_option("--checkpoint", aa.checkpoint)->required();
  att->add_option("--attack", aa.attack, "nearest_embedding or learned_inverter");
  att->add_option("--family", aa.family, "keys or values");
  att->add_option("--layer", aa.layer);
  att->add_option("--budget", aa.budget, "Attacker prompts for the learned inverter");
  att->add_option("--noise", aa.noise, "Also score a noise cache with this many positions");
  att->add_option("--report", aa.report);

  LabArgs la;
  auto* lab = app.add_subcommand("lab", "Contamination or inversion experiment");
  lab->add_option("--experiment", la.experiment, "contamination or inversion");
  lab->add_option("--preset", la.preset, "Model preset for contamination arms");
  lab->add_option("--model", la.model, "Model config override key=value (repeatable)");
  lab->add_option("--trials", la.trials);
  lab->add_option("--steps", la.steps);
  lab->add_option("--batch", la.batch);
  lab->add_option("--lr", la.lr);
  lab->add_option("--corpus-size", la.corpus_size);
  lab->add_option("--benchmark-items", la.benchmark_items);
  lab->add_option("--fraction", la.fraction, "Share of injected sequences in contaminated arms");
  lab->add_option("--payload-chunk", la.payload_chunk);
  lab->add_option("--max-new", la.max_new);
  lab->add_option("--arms", la.arms, "none, plaintext, crd_payload");
  lab->add_option("--prompts", la.prompts, "Inversion: prompts per model");
  lab->add_option("--attack", la.attack);
  lab->add_option("--family", la.family);
  lab->add_option("--layer", la.layer);
  lab->add_option("--budget", la.budget);
  lab->add_option("--noise", la.noise, "Inversion: noise-cache positions");
  lab->add_option("--report", la.report);

  StorageArgs sa;
  auto* sto = app.add_subcommand("storage", "Estimate release sizes");
  sto->add_option("--preset", sa.preset, "llama2-7b, default, gqa");
  sto->add_option("--checkpoint", sa.checkpoint, "Take the shape from a checkpoint");
  sto->add_option("--layers", sa.layers);
  sto->add_option("--kv-heads", sa.kv_heads);
  sto->add_option("--d-head", sa.d_head);
  sto->add_option("--tokens", sa.tokens);
  sto->add_option("--dtype", sa.dtypes);
  sto->add_option("--retain", sa.retain);
  sto->add_option("--records", sa.records);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ConfigError& e) {
    std::string msg = e.what();
    const std::string prefix = "INI was not able to parse ";
    if (msg.starts_with(prefix)) msg = "unknown config key '" + msg.substr(prefix.size()) + "'";
    std::cerr << "crd: " << msg << "\n";
    return kValidationFailure;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidationFailure;
  }

  try {
    if (*train) return cmd_train(g, ta);
    if (*cur) return cmd_curate(g, ca);
    if (*trans) return cmd_translate(g, tr);
    if (*eval) return cmd_evaluate(g, ea);
    if (*ver) return cmd_verify(g, va);
    if (*att) return cmd_attack(g, aa);
    if (*lab) return cmd_lab(g, la);
    if (*sto) return cmd_storage(g, sa, app.get_option("--out")->count() > 0);
  } catch (const Error& e) {
    std::cerr << "crd: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "crd: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kValidationFailure;
}
