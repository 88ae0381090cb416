#pragma once

#include "msadgn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace msadgn {

inline constexpr int kNumCategories = 3;
enum class Category : int { Sea = 0, Land = 1, Boundary = 2 };

// Knobs of one synthetic clutter domain. smoothing_width plays the role of
// the coherent integration number: wider kernels mean coarser spectra.
struct ClutterDomainSpec {
  int domain_id = 1;
  double smoothing_width = 1.0;  // Gaussian kernel sigma, bins
  double noise_sigma = 0.0;
  double amplitude_scale = 1.0;
  double doppler_shift = 0.0;  // bins, positive moves toward higher bins
  std::uint64_t seed = 0;
};

// Per-signal geometry of a clutter template, drawn once per sample.
struct TemplateParams {
  Category category = Category::Land;
  double center_jitter = 0.0;  // bins
  double peak_width = 4.0;     // bins
  double bragg_offset = 128.0; // sea peaks at +-offset bins
  double bragg_ratio = 1.0;    // second sea peak height relative to the first
  double land_weight = 0.5;    // mixing weight of the land component in boundary clutter
};

// Zero Doppler sits at bin len/2.
Eigen::RowVectorXd render_template(const TemplateParams& params, Index len);
// Discrete Gaussian smoothing with zero padding; sigma below 1/3 bin is a no-op.
Eigen::RowVectorXd gaussian_smooth(const Eigen::RowVectorXd& signal, double sigma);
// Linear-interpolated shift with zero fill.
Eigen::RowVectorXd shift_bins(const Eigen::RowVectorXd& signal, double shift);
// Maps to [0, 1] by min-max scaling.
Eigen::RowVectorXd minmax_normalize(const Eigen::RowVectorXd& signal);

class DomainDataset {
 public:
  DomainDataset() = default;
  // signals: n x len. labels, when given, must have n entries in [0, 3).
  DomainDataset(int domain_id, RowMatrix signals, std::optional<std::vector<int>> labels,
                std::optional<ClutterDomainSpec> generator = std::nullopt);

  int domain_id() const { return domain_id_; }
  Index size() const { return signals_.rows(); }
  Index length() const { return signals_.cols(); }
  bool labeled() const { return labels_.has_value(); }
  const RowMatrix& signals() const { return signals_; }
  const std::optional<ClutterDomainSpec>& generator() const { return generator_; }

  // Empty for unlabeled domains.
  std::optional<std::span<const int>> labels() const;
  // Ground truth kept for unlabeled domains so pseudolabel quality can be
  // audited. Never used for training.
  std::optional<std::span<const int>> audit_labels() const;

  // Moves labels into the audit slot.
  DomainDataset without_labels() const;

  // Rows gathered as a [rows x 1 x len] tensor.
  Tensor batch(std::span<const Index> rows) const;
  Tensor all() const;

 private:
  int domain_id_ = 0;
  RowMatrix signals_;
  std::optional<std::vector<int>> labels_;
  std::optional<std::vector<int>> audit_labels_;
  std::optional<ClutterDomainSpec> generator_;

  friend DomainDataset load_dataset(const std::filesystem::path& path);
};

// Samples are interleaved by class: sample i has category i % 3.
DomainDataset generate_domain(const ClutterDomainSpec& spec, Index n_per_class, Index len);

// Length of the default benchmark signals.
inline constexpr Index kDefaultSignalLength = 512;

// Graded defaults for domain ids 1..4 (extrapolated beyond). Widths and
// shifts are in bins at any signal length, so shorter signals see a
// relatively stronger shift.
ClutterDomainSpec default_domain_spec(int domain_id, std::uint64_t base_seed);

struct Benchmark {
  std::vector<DomainDataset> sources;  // sources[0] is the labeled domain 1
  DomainDataset target;
};

// K sources drawn from domains 1..K+1 minus the target; domain 1 is the
// labeled source and the others are stripped of labels.
Benchmark make_benchmark(std::uint64_t base_seed, int K, int target_domain, Index n_per_class = 1000,
                         Index len = 512);

// Writes <stem>.bin (little-endian float64, row-major) and <stem>.json.
void save_dataset(const DomainDataset& ds, const std::filesystem::path& path);
DomainDataset load_dataset(const std::filesystem::path& path);
// One row per signal; label column last when the dataset is labeled.
void export_csv(const DomainDataset& ds, const std::filesystem::path& path);

inline constexpr const char* kDatasetFormat = "msadgn-ds-v1";

}  // namespace msadgn
