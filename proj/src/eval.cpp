#include "msadgn/eval.hpp"

#include "msadgn/error.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace msadgn {

namespace fs = std::filesystem;
using json = nlohmann::json;

EvalReport score_predictions(std::span<const int> truth, std::span<const int> predicted, int num_classes) {
  if (truth.size() != predicted.size()) {
    throw DimensionError("score_predictions: " + std::to_string(truth.size()) + " labels vs " +
                         std::to_string(predicted.size()) + " predictions");
  }
  if (truth.empty()) throw DataError("score_predictions: no samples");
  EvalReport r;
  r.confusion = CountMatrix::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int y = truth[i];
    const int p = predicted[i];
    if (y < 0 || y >= num_classes || p < 0 || p >= num_classes) {
      throw LabelError("score_predictions: label pair (" + std::to_string(y) + ", " + std::to_string(p) +
                       ") at sample " + std::to_string(i));
    }
    ++r.confusion(y, p);
  }
  r.n_samples = static_cast<long>(truth.size());
  r.overall_accuracy = static_cast<double>(r.confusion.trace()) / static_cast<double>(r.n_samples);
  for (int c = 0; c < num_classes; ++c) {
    const long row = r.confusion.row(c).sum();
    r.per_class_accuracy.push_back(row > 0 ? static_cast<double>(r.confusion(c, c)) / static_cast<double>(row)
                                           : std::numeric_limits<double>::quiet_NaN());
  }
  return r;
}

void check_report(const EvalReport& r) {
  if (r.confusion.rows() != r.confusion.cols()) throw ContractError("report: confusion matrix is not square");
  if (r.confusion.sum() != r.n_samples) {
    throw ContractError("report: confusion sums to " + std::to_string(r.confusion.sum()) + ", n_samples is " +
                        std::to_string(r.n_samples));
  }
  if (r.n_samples > 0) {
    const double acc = static_cast<double>(r.confusion.trace()) / static_cast<double>(r.n_samples);
    if (acc != r.overall_accuracy) throw ContractError("report: overall accuracy differs from trace / n_samples");
  }
  if (static_cast<Index>(r.per_class_accuracy.size()) != r.confusion.rows()) {
    throw ContractError("report: per-class accuracy length mismatch");
  }
}

// ---- report files ----------------------------------------------------------

void write_report(const EvalReport& r, const fs::path& path) {
  check_report(r);
  json j;
  j["format"] = kReportFormat;
  j["overall_accuracy"] = r.overall_accuracy;
  json confusion = json::array();
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    json row = json::array();
    for (Index c = 0; c < r.confusion.cols(); ++c) row.push_back(r.confusion(i, c));
    confusion.push_back(row);
  }
  j["confusion"] = confusion;
  json per_class = json::array();
  for (double a : r.per_class_accuracy) {
    if (std::isnan(a)) {
      per_class.push_back(nullptr);
    } else {
      per_class.push_back(a);
    }
  }
  j["per_class_accuracy"] = per_class;
  j["n_samples"] = r.n_samples;
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write report " + path.string());
  out << j.dump(2) << '\n';
}

EvalReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read report " + path.string());
  EvalReport r;
  try {
    const json j = json::parse(in);
    if (j.value("format", std::string()) != kReportFormat) {
      throw FormatError("report " + path.string() + ": field 'format' is not " + kReportFormat);
    }
    r.overall_accuracy = j.at("overall_accuracy").get<double>();
    const json& confusion = j.at("confusion");
    const auto n = static_cast<Index>(confusion.size());
    r.confusion = CountMatrix::Zero(n, n);
    for (Index i = 0; i < n; ++i) {
      const json& row = confusion.at(static_cast<std::size_t>(i));
      if (static_cast<Index>(row.size()) != n) throw FormatError("report: field 'confusion' is not square");
      for (Index c = 0; c < n; ++c) r.confusion(i, c) = row.at(static_cast<std::size_t>(c)).get<long>();
    }
    for (const auto& a : j.at("per_class_accuracy")) {
      r.per_class_accuracy.push_back(a.is_null() ? std::numeric_limits<double>::quiet_NaN() : a.get<double>());
    }
    r.n_samples = j.at("n_samples").get<long>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError("report " + path.string() + ": " + e.what());
  }
  try {
    check_report(r);
  } catch (const ContractError& e) {
    throw FormatError(std::string(e.what()));
  }
  return r;
}

// ---- predictions -----------------------------------------------------------

void write_predictions(const Prediction& p, const fs::path& path) {
  const auto m = static_cast<Index>(p.labels.size());
  if (p.logits.rows() != m || p.weights.w.rows() != m) {
    throw DimensionError("write_predictions: labels, weights, and logits disagree on the sample count");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write predictions " + path.string());
  for (Index i = 0; i < m; ++i) {
    json row;
    row["index"] = i;
    row["label"] = p.labels[static_cast<std::size_t>(i)];
    row["weights"] = std::vector<double>(p.weights.w.row(i).begin(), p.weights.w.row(i).end());
    row["logits"] = std::vector<double>(p.logits.row(i).begin(), p.logits.row(i).end());
    out << row.dump() << '\n';
  }
}

std::vector<PredictionRecord> read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read predictions " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      PredictionRecord r;
      r.index = j.at("index").get<Index>();
      r.label = j.at("label").get<int>();
      r.weights = j.at("weights").get<std::vector<double>>();
      r.logits = j.at("logits").get<std::vector<double>>();
      if (r.index != static_cast<Index>(out.size())) {
        throw FormatError("predictions line " + std::to_string(lineno) + ": field 'index' out of sequence");
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError("predictions line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

EvalReport evaluate(const Model& model, const TrainConfig& cfg, const DomainDataset& target,
                    const fs::path& predictions_path) {
  const auto truth = target.labels();
  if (!truth) throw DataError("evaluate: target domain " + std::to_string(target.domain_id()) + " is unlabeled");
  write_predictions(predict(model, target, cfg.predict_mode()), predictions_path);
  const auto records = read_predictions(predictions_path);
  std::vector<int> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(r.label);
  EvalReport report = score_predictions(*truth, labels, cfg.num_classes);
  report.seed = cfg.seed;
  report.config_hash = config_hash(cfg);
  return report;
}

void write_embeddings_csv(const Model& model, const DomainDataset& data, const fs::path& path, Index chunk) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write embeddings " + path.string());
  out.precision(9);
  const auto labels = data.labels() ? data.labels() : data.audit_labels();
  const Index dim = model.shared.output_dim();
  for (Index c = 0; c < dim; ++c) out << (c ? "," : "") << 'e' << c;
  out << ",domain";
  if (labels) out << ",label";
  out << '\n';
  NoGradGuard no_grad;
  std::vector<Index> rows;
  for (Index start = 0; start < data.size(); start += chunk) {
    const Index count = std::min(chunk, data.size() - start);
    rows.resize(static_cast<std::size_t>(count));
    std::iota(rows.begin(), rows.end(), start);
    const Tensor emb = model.shared.forward(data.batch(rows));
    const auto mat = emb.mat();
    for (Index i = 0; i < count; ++i) {
      for (Index c = 0; c < dim; ++c) out << (c ? "," : "") << mat(i, c);
      out << ',' << data.domain_id();
      if (labels) out << ',' << (*labels)[static_cast<std::size_t>(start + i)];
      out << '\n';
    }
  }
}

// ---- multi-seed runs -------------------------------------------------------

std::string scenario_id(const BenchmarkSpec& spec) {
  return "target" + std::to_string(spec.target_domain) + "_len" + std::to_string(spec.signal_len);
}

ScenarioSummary summarize(std::span<const double> acc) {
  ScenarioSummary s;
  s.runs = static_cast<int>(acc.size());
  if (acc.empty()) return s;
  s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
  if (acc.size() > 1) {
    double ss = 0.0;
    for (double a : acc) ss += (a - s.mean) * (a - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(acc.size() - 1));
  }
  return s;
}

std::map<std::string, ScenarioSummary> RunMatrix::summaries() const {
  std::map<std::string, std::vector<double>> grouped;
  for (const auto& e : entries) grouped[e.scenario].push_back(e.report.overall_accuracy);
  std::map<std::string, ScenarioSummary> out;
  for (const auto& [id, acc] : grouped) out[id] = summarize(acc);
  return out;
}

ScenarioSummary RunMatrix::overall() const {
  std::vector<double> acc;
  for (const auto& e : entries) acc.push_back(e.report.overall_accuracy);
  return summarize(acc);
}

RunMatrix run_scenario(const TrainConfig& cfg, const BenchmarkSpec& spec, std::span<const std::uint64_t> seeds,
                       const std::optional<fs::path>& out_dir, const ProgressCallback& progress) {
  if (seeds.empty()) throw ParameterError("run_scenario: at least one seed is required");
  const Benchmark bench = make_benchmark(spec.base_seed, cfg.K, spec.target_domain, spec.n_per_class, spec.signal_len);
  TrainConfig run_cfg = cfg;
  run_cfg.network.signal_len = spec.signal_len;
  const std::string id = scenario_id(spec);
  const fs::path scratch = out_dir ? *out_dir : fs::temp_directory_path() / ("msadgn-run-" + config_hash(cfg));

  RunMatrix matrix;
  for (std::uint64_t seed : seeds) {
    run_cfg.seed = seed;
    const auto start = std::chrono::steady_clock::now();
    const TrainResult trained = train(run_cfg, bench.sources);
    const fs::path stem = scratch / (id + "_" + to_string(run_cfg.ablation) + "_seed" + std::to_string(seed));
    const EvalReport report = evaluate(trained.model, run_cfg, bench.target, fs::path(stem) += ".predictions.jsonl");
    if (out_dir) {
      write_report(report, fs::path(stem) += ".report.json");
      write_step_log_csv(trained.log, fs::path(stem) += ".log.csv");
      write_audit_csv(trained.log, fs::path(stem) += ".audit.csv");
    } else {
      fs::remove(fs::path(stem) += ".predictions.jsonl");
    }
    matrix.entries.push_back({id, seed, report});
    if (progress) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      progress({id, to_string(run_cfg.ablation), seed, report.overall_accuracy, secs});
    }
  }
  if (!out_dir) {
    std::error_code ec;
    fs::remove(scratch, ec);
  }
  return matrix;
}

ScenarioSummary AblationResult::overall(Ablation a) const {
  const auto it = runs.find(a);
  if (it == runs.end()) throw ContractError("ablation result has no runs for " + to_string(a));
  return it->second.overall();
}

double AblationResult::pooled_stddev(Ablation a, Ablation b) const {
  double var = 0.0;
  int groups = 0;
  for (Ablation v : {a, b}) {
    const auto it = runs.find(v);
    if (it == runs.end()) throw ContractError("ablation result has no runs for " + to_string(v));
    for (const auto& [id, s] : it->second.summaries()) {
      var += s.stddev * s.stddev;
      ++groups;
    }
  }
  return groups ? std::sqrt(var / groups) : 0.0;
}

AblationResult run_ablation(const TrainConfig& cfg, const BenchmarkSpec& spec, std::span<const int> targets,
                            std::span<const Ablation> variants, std::span<const std::uint64_t> seeds,
                            const std::optional<fs::path>& out_dir, const ProgressCallback& progress) {
  AblationResult result;
  for (Ablation v : variants) {
    TrainConfig vcfg = cfg;
    vcfg.ablation = v;
    RunMatrix& matrix = result.runs[v];
    for (int target : targets) {
      BenchmarkSpec s = spec;
      s.target_domain = target;
      RunMatrix m = run_scenario(vcfg, s, seeds, out_dir, progress);
      matrix.entries.insert(matrix.entries.end(), m.entries.begin(), m.entries.end());
    }
  }
  return result;
}

void write_ablation_csv(const AblationResult& result, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(10);
  out << "variant,scenario,seed,accuracy\n";
  for (const auto& [variant, matrix] : result.runs) {
    for (const auto& e : matrix.entries) {
      out << to_string(variant) << ',' << e.scenario << ',' << e.seed << ',' << e.report.overall_accuracy << '\n';
    }
  }
}

}  // namespace msadgn
