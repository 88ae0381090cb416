#pragma once

#include "msadgn/data.hpp"
#include "msadgn/specific.hpp"
#include "msadgn/trainer.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace msadgn {

using CountMatrix = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>;

struct EvalReport {
  double overall_accuracy = 0.0;
  CountMatrix confusion;  // rows: true class, columns: predicted
  std::vector<double> per_class_accuracy;
  long n_samples = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

// Metrics from paired label lists. Per-class accuracy of an absent class is NaN.
EvalReport score_predictions(std::span<const int> truth, std::span<const int> predicted, int num_classes);
// Throws ContractError when the confusion sums or the trace identity fail.
void check_report(const EvalReport& report);

inline constexpr const char* kReportFormat = "msadgn-report-v1";

void write_report(const EvalReport& report, const std::filesystem::path& path);
EvalReport read_report(const std::filesystem::path& path);

struct PredictionRecord {
  Index index = 0;
  int label = 0;
  std::vector<double> weights;
  std::vector<double> logits;
};

// One JSON object per line: index, label, weights, logits.
void write_predictions(const Prediction& prediction, const std::filesystem::path& path);
std::vector<PredictionRecord> read_predictions(const std::filesystem::path& path);

// Predicts the labeled target, persists the predictions, and scores the
// persisted file.
EvalReport evaluate(const Model& model, const TrainConfig& cfg, const DomainDataset& target,
                    const std::filesystem::path& predictions_path);

// F_shared embeddings, one row per signal, label column last when known.
void write_embeddings_csv(const Model& model, const DomainDataset& data, const std::filesystem::path& path,
                          Index chunk = 256);

// ---- multi-seed runs -------------------------------------------------------

struct BenchmarkSpec {
  std::uint64_t base_seed = 2024;
  int target_domain = 4;
  Index n_per_class = 1000;
  Index signal_len = 512;
};

std::string scenario_id(const BenchmarkSpec& spec);

struct RunEntry {
  std::string scenario;
  std::uint64_t seed = 0;
  EvalReport report;
};

struct ScenarioSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for one run
  int runs = 0;
};

struct RunMatrix {
  std::vector<RunEntry> entries;

  std::map<std::string, ScenarioSummary> summaries() const;
  // Over every entry regardless of scenario.
  ScenarioSummary overall() const;
};

ScenarioSummary summarize(std::span<const double> accuracies);

struct RunProgress {
  std::string scenario;
  std::string variant;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double seconds = 0.0;
};

using ProgressCallback = std::function<void(const RunProgress&)>;

// Trains once per seed and evaluates on the held-out domain. When out_dir is
// set, predictions, reports, and training logs land under it.
RunMatrix run_scenario(const TrainConfig& cfg, const BenchmarkSpec& spec, std::span<const std::uint64_t> seeds,
                       const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                       const ProgressCallback& progress = {});

struct AblationResult {
  std::map<Ablation, RunMatrix> runs;

  ScenarioSummary overall(Ablation a) const;
  // Seed-to-seed spread: sqrt of the mean per-scenario sample variance over
  // both variants.
  double pooled_stddev(Ablation a, Ablation b) const;
};

// Every variant over every target scenario and seed. Targets share the
// benchmark seed, size, and length of `spec`.
AblationResult run_ablation(const TrainConfig& cfg, const BenchmarkSpec& spec, std::span<const int> targets,
                            std::span<const Ablation> variants, std::span<const std::uint64_t> seeds,
                            const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                            const ProgressCallback& progress = {});

void write_ablation_csv(const AblationResult& result, const std::filesystem::path& path);

}  // namespace msadgn
