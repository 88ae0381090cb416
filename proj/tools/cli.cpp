#include "cli.hpp"

#include "msadgn/error.hpp"
#include "msadgn/eval.hpp"
#include "msadgn/gradcheck.hpp"
#include "msadgn/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace msadgn::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kBenchmarkManifest = "benchmark.json";
constexpr const char* kBenchmarkFormat = "msadgn-benchmark-v1";

struct Options {
  bool quiet = false;

  // gen-data
  std::uint64_t base_seed = 2024;
  int K = 3;
  int target = 4;
  Index n_per_class = 1000;
  Index len = kDefaultSignalLength;
  bool csv = false;

  // shared
  std::string config;
  std::string data_dir;
  std::string out;
  std::optional<std::uint64_t> seed;

  // eval
  std::string checkpoint;
  std::string target_path;
  std::string report;
  std::string predictions;
  std::string embeddings;

  // ablate
  std::vector<std::string> variants{"M1", "M2", "M3", "M4", "M5", "M6", "M7"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<int> targets{2, 3, 4};

  // grad-check
  double eps = 1e-5;
};

void say(const Options& o, const std::string& line) {
  if (!o.quiet) std::cout << line << '\n';
}

TrainConfig base_config(const Options& o) {
  TrainConfig cfg = o.config.empty() ? TrainConfig{} : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  return cfg;
}

// ---- gen-data --------------------------------------------------------------

int gen_data(const Options& o) {
  const Benchmark bench = make_benchmark(o.base_seed, o.K, o.target, o.n_per_class, o.len);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = kBenchmarkFormat;
  manifest["base_seed"] = o.base_seed;
  manifest["K"] = o.K;
  manifest["target_domain"] = o.target;
  manifest["n_per_class"] = o.n_per_class;
  manifest["signal_len"] = o.len;
  manifest["sources"] = json::array();
  for (const auto& ds : bench.sources) {
    const std::string stem = "source_domain" + std::to_string(ds.domain_id());
    save_dataset(ds, dir / stem);
    if (o.csv) export_csv(ds, dir / (stem + ".csv"));
    manifest["sources"].push_back(stem);
    say(o, "wrote " + (dir / stem).string() + " (" + std::to_string(ds.size()) + " signals)");
  }
  const std::string target_stem = "target_domain" + std::to_string(bench.target.domain_id());
  save_dataset(bench.target, dir / target_stem);
  if (o.csv) export_csv(bench.target, dir / (target_stem + ".csv"));
  manifest["target"] = target_stem;
  std::ofstream(dir / kBenchmarkManifest) << manifest.dump(2) << '\n';
  say(o, "wrote " + (dir / target_stem).string() + " (" + std::to_string(bench.target.size()) + " signals)");
  return kOk;
}

// ---- train / baseline-erm --------------------------------------------------

json read_manifest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("data directory " + dir.string() + " does not exist");
  const fs::path path = dir / kBenchmarkManifest;
  std::ifstream in(path);
  if (!in) throw DataError("missing " + path.string() + " (run gen-data first)");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (j.value("format", std::string()) != kBenchmarkFormat) {
    throw FormatError(path.string() + ": field 'format' is not " + kBenchmarkFormat);
  }
  return j;
}

int train_command(const Options& o, std::optional<Ablation> force) {
  const fs::path data_dir(o.data_dir);
  const json manifest = read_manifest(data_dir);
  std::vector<DomainDataset> sources;
  for (const auto& stem : manifest.at("sources")) sources.push_back(load_dataset(data_dir / stem.get<std::string>()));

  TrainConfig cfg = base_config(o);
  if (force) cfg.ablation = *force;
  if (o.config.empty()) cfg.K = static_cast<int>(sources.size());
  if (cfg.K != static_cast<int>(sources.size())) {
    throw ConfigError("config has K=" + std::to_string(cfg.K) + " but " + data_dir.string() + " holds " +
                      std::to_string(sources.size()) + " source domains");
  }
  cfg.network.signal_len = sources.front().length();
  cfg.validate();

  const fs::path out(o.out);
  fs::create_directories(out);
  save_config(cfg, out / "config.json");
  const int total_epochs = cfg.epochs;
  const TrainResult result = train(cfg, sources, [&](const StepLog& s) {
    if (o.quiet || s.step % 200 != 0) return;
    std::ostringstream line;
    line << "epoch " << s.epoch << '/' << total_epochs << " step " << s.step << " L=" << s.loss
         << " L_inv=" << s.loss_inv << " L_cls=" << s.loss_cls << " L_w=" << s.loss_w << " tau=" << s.tau;
    std::cout << line.str() << '\n';
  });
  save_checkpoint(result.model, cfg, out / "model.ckpt");
  write_step_log_csv(result.log, out / "train_log.csv");
  write_audit_csv(result.log, out / "pseudolabel_audit.csv");
  say(o, "wrote " + (out / "model.ckpt").string());

  // Evaluate on the held-out domain when the data directory has one.
  if (manifest.contains("target")) {
    const DomainDataset target = load_dataset(data_dir / manifest.at("target").get<std::string>());
    const EvalReport report = evaluate(result.model, cfg, target, out / "predictions.jsonl");
    write_report(report, out / "report.json");
    say(o, "target accuracy " + json(report.overall_accuracy).dump());
  }
  return kOk;
}

// ---- eval ------------------------------------------------------------------

int eval_command(const Options& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const DomainDataset target = load_dataset(o.target_path);
  fs::path predictions = o.predictions;
  if (predictions.empty()) predictions = fs::path(o.report).replace_extension(".predictions.jsonl");
  const EvalReport report = evaluate(ck.model, ck.config, target, predictions);
  write_report(report, o.report);
  if (!o.embeddings.empty()) write_embeddings_csv(ck.model, target, o.embeddings);
  // Same text as the JSON field.
  std::cout << "accuracy " << json(report.overall_accuracy).dump() << '\n';
  if (!o.quiet) {
    std::ostringstream line;
    line << "per-class";
    for (double a : report.per_class_accuracy) line << ' ' << a;
    std::cout << line.str() << '\n';
  }
  return kOk;
}

// ---- ablate ----------------------------------------------------------------

int ablate_command(const Options& o) {
  const TrainConfig cfg = base_config(o);
  std::vector<Ablation> variants;
  for (const auto& v : o.variants) {
    try {
      variants.push_back(parse_ablation(v));
    } catch (const ConfigError& e) {
      throw ParameterError(std::string("--variants: ") + e.what());  // a bad flag value is a usage error
    }
  }
  BenchmarkSpec spec;
  spec.base_seed = o.base_seed;
  spec.n_per_class = o.n_per_class;
  spec.signal_len = o.len;
  const fs::path out(o.out);
  const AblationResult result =
      run_ablation(cfg, spec, o.targets, variants, o.seeds, out / "runs", [&](const RunProgress& p) {
        std::ostringstream line;
        line << p.variant << ' ' << p.scenario << " seed " << p.seed << " accuracy " << p.accuracy << " ("
             << p.seconds << " s)";
        say(o, line.str());
      });
  write_ablation_csv(result, out / "ablation.csv");
  json summary = json::object();
  for (Ablation v : variants) {
    const ScenarioSummary s = result.overall(v);
    summary[to_string(v)] = {{"mean", s.mean}, {"std", s.stddev}, {"runs", s.runs}};
    std::ostringstream line;
    line << to_string(v) << " mean " << s.mean << " std " << s.stddev << " over " << s.runs << " runs";
    say(o, line.str());
  }
  std::ofstream(out / "summary.json") << summary.dump(2) << '\n';
  return kOk;
}

// ---- grad-check ------------------------------------------------------------

int grad_check_command(const Options& o) {
  constexpr double kTolerance = 1e-4;
  const auto results = run_gradient_suite(o.eps);
  double worst = 0.0;
  json j = json::array();
  for (const auto& r : results) {
    worst = std::max(worst, r.max_rel_error);
    j.push_back({{"name", r.name}, {"max_rel_error", r.max_rel_error}, {"entries", r.checked}});
    char line[128];
    std::snprintf(line, sizeof line, "%-20s %.3e (%ld entries)", r.name.c_str(), r.max_rel_error, r.checked);
    say(o, line);
  }
  if (!o.report.empty()) {
    const fs::path path(o.report);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream(path) << json{{"eps", o.eps}, {"tolerance", kTolerance}, {"max_rel_error", worst}, {"checks", j}}
                               .dump(2)
                        << '\n';
  }
  std::cout << "max rel err " << worst << (worst < kTolerance ? " ok" : " FAILED") << '\n';
  return worst < kTolerance ? kOk : kNumericError;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  Options o;
  CLI::App app{"Semisupervised multi-source domain generalization on synthetic clutter spectra", "msadgn"};
  app.require_subcommand(1);
  app.add_flag("-q,--quiet", o.quiet, "Suppress progress lines");

  auto* gen = app.add_subcommand("gen-data", "Generate a leave-one-domain-out benchmark");
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--base-seed", o.base_seed, "Benchmark seed");
  gen->add_option("--K", o.K, "Number of source domains");
  gen->add_option("--target", o.target, "Held-out target domain id");
  gen->add_option("--n-per-class", o.n_per_class, "Signals per class and domain");
  gen->add_option("--len", o.len, "Signal length");
  gen->add_flag("--csv", o.csv, "Also export CSV copies");

  auto add_train_options = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "Config JSON");
    cmd->add_option("--data-dir", o.data_dir, "Directory written by gen-data")->required();
    cmd->add_option("--seed", o.seed, "Training seed (overrides the config)");
    cmd->add_option("--out", o.out, "Output directory")->required();
  };
  auto* train_cmd = app.add_subcommand("train", "Train on a generated benchmark");
  add_train_options(train_cmd);
  auto* erm = app.add_subcommand("baseline-erm", "Train the labeled-domain-only baseline (M1)");
  add_train_options(erm);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a labeled dataset");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--target", o.target_path, "Dataset stem (.bin/.json)")->required();
  eval_cmd->add_option("--report", o.report, "Report JSON path")->required();
  eval_cmd->add_option("--predictions", o.predictions, "Predictions JSONL path");
  eval_cmd->add_option("--embeddings", o.embeddings, "Write F_shared embeddings CSV");

  auto* ablate = app.add_subcommand("ablate", "Run the M1..M7 ablation sweep");
  ablate->add_option("--config", o.config, "Config JSON");
  ablate->add_option("--variants", o.variants, "Variants, e.g. M1,M7")->delimiter(',');
  ablate->add_option("--seeds", o.seeds, "Training seeds")->delimiter(',');
  ablate->add_option("--targets", o.targets, "Held-out domains")->delimiter(',');
  ablate->add_option("--base-seed", o.base_seed, "Benchmark seed");
  ablate->add_option("--n-per-class", o.n_per_class, "Signals per class and domain");
  ablate->add_option("--len", o.len, "Signal length");
  ablate->add_option("--out", o.out, "Output directory")->required();

  auto* grad = app.add_subcommand("grad-check", "Run the finite-difference gradient suite");
  grad->add_option("--eps", o.eps, "Central-difference step");
  grad->add_option("--report", o.report, "Report JSON path");

  std::vector<std::string> storage{"msadgn"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return gen_data(o);
    if (*train_cmd) return train_command(o, std::nullopt);
    if (*erm) return train_command(o, Ablation::M1);
    if (*eval_cmd) return eval_command(o);
    if (*ablate) return ablate_command(o);
    if (*grad) return grad_check_command(o);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const ParameterError& e) {
    std::cerr << "invalid parameter: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}

}  // namespace msadgn::cli
