#include "msadgn/data.hpp"

#include "msadgn/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace msadgn {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- template rendering ----------------------------------------------------

namespace {

double bump(double x, double center, double width) {
  const double z = (x - center) / width;
  return std::exp(-0.5 * z * z);
}

}  // namespace

Eigen::RowVectorXd render_template(const TemplateParams& p, Index len) {
  const double center = static_cast<double>(len / 2) + p.center_jitter;
  Eigen::RowVectorXd land(len), sea(len);
  for (Index i = 0; i < len; ++i) {
    const double x = static_cast<double>(i);
    land[i] = bump(x, center, p.peak_width);
    sea[i] = bump(x, center - p.bragg_offset, p.peak_width) +
             p.bragg_ratio * bump(x, center + p.bragg_offset, p.peak_width);
  }
  switch (p.category) {
    case Category::Land:
      return land;
    case Category::Sea:
      return sea;
    case Category::Boundary:
      return p.land_weight * land + (1.0 - p.land_weight) * sea;
  }
  throw ParameterError("render_template: unknown category");
}

Eigen::RowVectorXd gaussian_smooth(const Eigen::RowVectorXd& signal, double sigma) {
  if (sigma < 1.0 / 3.0) return signal;
  const auto radius = static_cast<Index>(std::ceil(4.0 * sigma));
  Eigen::VectorXd kernel(2 * radius + 1);
  for (Index k = -radius; k <= radius; ++k) kernel[k + radius] = bump(static_cast<double>(k), 0.0, sigma);
  kernel /= kernel.sum();
  const Index len = signal.size();
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(len);
  for (Index i = 0; i < len; ++i) {
    double acc = 0.0;
    for (Index k = -radius; k <= radius; ++k) {
      const Index j = i + k;
      if (j >= 0 && j < len) acc += kernel[k + radius] * signal[j];
    }
    out[i] = acc;
  }
  return out;
}

Eigen::RowVectorXd shift_bins(const Eigen::RowVectorXd& signal, double shift) {
  if (shift == 0.0) return signal;
  const Index len = signal.size();
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(len);
  for (Index i = 0; i < len; ++i) {
    const double src = static_cast<double>(i) - shift;
    const double lo = std::floor(src);
    const double frac = src - lo;
    const auto j = static_cast<Index>(lo);
    double v = 0.0;
    if (j >= 0 && j < len) v += (1.0 - frac) * signal[j];
    if (frac > 0.0 && j + 1 >= 0 && j + 1 < len) v += frac * signal[j + 1];
    out[i] = v;
  }
  return out;
}

Eigen::RowVectorXd minmax_normalize(const Eigen::RowVectorXd& signal) {
  const double lo = signal.minCoeff(), hi = signal.maxCoeff();
  if (!(hi > lo)) throw NumericError("minmax_normalize: constant or non-finite signal");
  return (signal.array() - lo) / (hi - lo);
}

// ---- DomainDataset ---------------------------------------------------------

namespace {

void check_labels(const std::vector<int>& labels, Index n, const char* what) {
  if (static_cast<Index>(labels.size()) != n) {
    throw DataError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(n) + " signals");
  }
  for (int y : labels) {
    if (y < 0 || y >= kNumCategories) throw LabelError(std::string(what) + ": label " + std::to_string(y));
  }
}

}  // namespace

DomainDataset::DomainDataset(int domain_id, RowMatrix signals, std::optional<std::vector<int>> labels,
                             std::optional<ClutterDomainSpec> generator)
    : domain_id_(domain_id),
      signals_(std::move(signals)),
      labels_(std::move(labels)),
      generator_(generator) {
  if (domain_id_ < 1) throw ParameterError("domain ids start at 1");
  if (labels_) check_labels(*labels_, signals_.rows(), "DomainDataset");
}

std::optional<std::span<const int>> DomainDataset::labels() const {
  if (!labels_) return std::nullopt;
  return std::span<const int>(*labels_);
}

std::optional<std::span<const int>> DomainDataset::audit_labels() const {
  if (labels_) return std::span<const int>(*labels_);
  if (audit_labels_) return std::span<const int>(*audit_labels_);
  return std::nullopt;
}

DomainDataset DomainDataset::without_labels() const {
  DomainDataset out = *this;
  if (out.labels_) out.audit_labels_ = std::move(out.labels_);
  out.labels_.reset();
  return out;
}

Tensor DomainDataset::batch(std::span<const Index> rows) const {
  const Index len = length();
  Vector data(static_cast<Index>(rows.size()) * len);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= size()) throw DimensionError("batch: row out of range");
    data.segment(static_cast<Index>(i) * len, len) = signals_.row(rows[i]).transpose();
  }
  return Tensor::from({static_cast<Index>(rows.size()), 1, len}, std::move(data));
}

Tensor DomainDataset::all() const {
  return Tensor::from({size(), 1, length()}, Eigen::Map<const Vector>(signals_.data(), signals_.size()));
}

// ---- generation ------------------------------------------------------------

DomainDataset generate_domain(const ClutterDomainSpec& spec, Index n_per_class, Index len) {
  if (n_per_class < 1) throw ParameterError("generate_domain: n_per_class must be >= 1");
  if (len < 32) throw ParameterError("generate_domain: len must be >= 32");
  if (!(spec.smoothing_width > 0.0) || !(spec.amplitude_scale > 0.0) || spec.noise_sigma < 0.0) {
    throw ParameterError("generate_domain: invalid domain spec");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  // Template geometry is relative to the length so that every profile
  // renders the same shapes; 512 bins is the reference resolution.
  const double unit_bins = static_cast<double>(len) / 128.0;
  const double base_offset = static_cast<double>(len) / 4.0;

  const Index n = n_per_class * kNumCategories;
  RowMatrix signals(n, len);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    TemplateParams p;
    p.category = static_cast<Category>(i % kNumCategories);
    p.center_jitter = unit_bins * (-1.0 + 2.0 * unit(rng));
    p.peak_width = unit_bins * (1.0 + unit(rng));
    p.bragg_offset = base_offset * (0.85 + 0.3 * unit(rng));
    p.bragg_ratio = 0.5 + 1.5 * unit(rng);
    p.land_weight = 0.35 + 0.3 * unit(rng);

    Eigen::RowVectorXd s = render_template(p, len);
    s = gaussian_smooth(s, spec.smoothing_width);
    s *= spec.amplitude_scale;
    s = shift_bins(s, spec.doppler_shift);
    if (spec.noise_sigma > 0.0) {
      for (Index j = 0; j < len; ++j) s[j] += spec.noise_sigma * noise(rng);
    }
    signals.row(i) = minmax_normalize(s);
    labels[static_cast<std::size_t>(i)] = static_cast<int>(p.category);
  }
  return DomainDataset(spec.domain_id, std::move(signals), std::move(labels), spec);
}

ClutterDomainSpec default_domain_spec(int domain_id, std::uint64_t base_seed) {
  if (domain_id < 1) throw ParameterError("domain ids start at 1");
  static constexpr std::array<double, 4> widths{1.0, 2.0, 4.0, 8.0};
  static constexpr std::array<double, 4> sigmas{0.02, 0.03, 0.04, 0.05};
  static constexpr std::array<double, 4> shifts{0.0, 2.0, -2.0, 4.0};
  ClutterDomainSpec spec;
  spec.domain_id = domain_id;
  const auto i = static_cast<std::size_t>(domain_id - 1);
  if (i < widths.size()) {
    spec.smoothing_width = widths[i];
    spec.noise_sigma = sigmas[i];
    spec.doppler_shift = shifts[i];
  } else {
    spec.smoothing_width = std::ldexp(1.0, domain_id - 1);
    spec.noise_sigma = 0.01 * (domain_id + 1);
    spec.doppler_shift = (domain_id % 2 == 0 ? 1.0 : -1.0) * 2.0 * (domain_id - 2);
  }
  spec.amplitude_scale = 1.0;
  spec.seed = base_seed ^ static_cast<std::uint64_t>(domain_id);
  return spec;
}

Benchmark make_benchmark(std::uint64_t base_seed, int K, int target_domain, Index n_per_class, Index len) {
  if (K < 2) throw ParameterError("make_benchmark: K must be >= 2");
  if (target_domain == 1) throw ParameterError("make_benchmark: domain 1 is the labeled source");
  if (target_domain < 1 || target_domain > K + 1) {
    throw ParameterError("make_benchmark: target domain " + std::to_string(target_domain) +
                         " outside 1.." + std::to_string(K + 1));
  }
  Benchmark bench;
  for (int id = 1; id <= K + 1; ++id) {
    DomainDataset ds = generate_domain(default_domain_spec(id, base_seed), n_per_class, len);
    if (id == target_domain) {
      bench.target = std::move(ds);
    } else {
      bench.sources.push_back(id == 1 ? std::move(ds) : ds.without_labels());
    }
  }
  return bench;
}

// ---- persistence -----------------------------------------------------------

namespace {

fs::path with_ext(fs::path p, const char* ext) {
  if (p.extension() == ".bin" || p.extension() == ".json") p.replace_extension();
  p += ext;
  return p;
}

json spec_to_json(const ClutterDomainSpec& s) {
  return {{"domain_id", s.domain_id},         {"smoothing_width", s.smoothing_width},
          {"noise_sigma", s.noise_sigma},     {"amplitude_scale", s.amplitude_scale},
          {"doppler_shift", s.doppler_shift}, {"seed", s.seed}};
}

ClutterDomainSpec spec_from_json(const json& j) {
  ClutterDomainSpec s;
  s.domain_id = j.at("domain_id").get<int>();
  s.smoothing_width = j.at("smoothing_width").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.amplitude_scale = j.at("amplitude_scale").get<double>();
  s.doppler_shift = j.at("doppler_shift").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

void byteswap_doubles(double* values, Index n) {
  for (Index i = 0; i < n; ++i) {
    std::array<unsigned char, sizeof(double)> bytes;
    std::memcpy(bytes.data(), values + i, sizeof(double));
    std::reverse(bytes.begin(), bytes.end());
    std::memcpy(values + i, bytes.data(), sizeof(double));
  }
}

template <typename T>
T field(const json& meta, const char* name) {
  if (!meta.contains(name)) throw FormatError(std::string("dataset metadata: missing field '") + name + "'");
  try {
    return meta.at(name).get<T>();
  } catch (const json::exception&) {
    throw FormatError(std::string("dataset metadata: bad field '") + name + "'");
  }
}

}  // namespace

void save_dataset(const DomainDataset& ds, const fs::path& path) {
  const fs::path bin = with_ext(path, ".bin"), meta_path = with_ext(path, ".json");
  if (bin.has_parent_path()) fs::create_directories(bin.parent_path());

  json meta;
  meta["format"] = kDatasetFormat;
  meta["dtype"] = "float64-le";
  meta["shape"] = {ds.size(), 1, ds.length()};
  meta["domain_id"] = ds.domain_id();
  meta["labeled"] = ds.labeled();
  if (auto labels = ds.labels()) {
    meta["labels"] = std::vector<int>(labels->begin(), labels->end());
  } else {
    meta["labels"] = nullptr;
    if (auto hidden = ds.audit_labels()) meta["audit_labels"] = std::vector<int>(hidden->begin(), hidden->end());
  }
  meta["generator"] = ds.generator() ? spec_to_json(*ds.generator()) : json(nullptr);

  RowMatrix values = ds.signals();
  if constexpr (std::endian::native == std::endian::big) byteswap_doubles(values.data(), values.size());
  std::ofstream out(bin, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("save_dataset: cannot write " + bin.string());
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * static_cast<Index>(sizeof(double))));
  if (!out) throw DataError("save_dataset: write failed for " + bin.string());

  std::ofstream mout(meta_path, std::ios::trunc);
  if (!mout) throw DataError("save_dataset: cannot write " + meta_path.string());
  mout << meta.dump(2) << '\n';
}

DomainDataset load_dataset(const fs::path& path) {
  const fs::path bin = with_ext(path, ".bin"), meta_path = with_ext(path, ".json");
  std::ifstream min(meta_path);
  if (!min) throw DataError("load_dataset: cannot read " + meta_path.string());
  json meta;
  try {
    meta = json::parse(min);
  } catch (const json::exception& e) {
    throw FormatError(std::string("dataset metadata: not valid JSON: ") + e.what());
  }
  const auto format = field<std::string>(meta, "format");
  if (format != kDatasetFormat) {
    throw FormatError("dataset metadata: field 'format' is '" + format + "', expected " + kDatasetFormat);
  }
  const auto shape = field<std::vector<Index>>(meta, "shape");
  if (shape.size() != 3 || shape[0] < 1 || shape[1] != 1 || shape[2] < 1) {
    throw FormatError("dataset metadata: field 'shape' must be [n, 1, len]");
  }
  const Index n = shape[0], len = shape[2];

  std::ifstream in(bin, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("load_dataset: cannot read " + bin.string());
  const auto bytes = static_cast<Index>(in.tellg());
  const Index expected = n * len * static_cast<Index>(sizeof(double));
  if (bytes != expected) {
    throw FormatError("dataset binary: field 'shape' implies " + std::to_string(expected) +
                      " bytes but " + bin.filename().string() + " holds " + std::to_string(bytes));
  }
  RowMatrix signals(n, len);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(signals.data()), expected);
  if (!in) throw FormatError("dataset binary: truncated read");
  if constexpr (std::endian::native == std::endian::big) byteswap_doubles(signals.data(), signals.size());

  const bool labeled = field<bool>(meta, "labeled");
  std::optional<std::vector<int>> labels;
  if (labeled) {
    labels = field<std::vector<int>>(meta, "labels");
    if (static_cast<Index>(labels->size()) != n) {
      throw FormatError("dataset metadata: field 'labels' has " + std::to_string(labels->size()) +
                        " entries, shape says " + std::to_string(n));
    }
  } else if (meta.contains("labels") && !meta["labels"].is_null()) {
    throw FormatError("dataset metadata: field 'labels' present on an unlabeled dataset");
  }
  std::optional<ClutterDomainSpec> generator;
  if (meta.contains("generator") && !meta["generator"].is_null()) {
    try {
      generator = spec_from_json(meta["generator"]);
    } catch (const json::exception&) {
      throw FormatError("dataset metadata: bad field 'generator'");
    }
  }
  DomainDataset ds(field<int>(meta, "domain_id"), std::move(signals), std::move(labels), generator);
  if (meta.contains("audit_labels")) {
    auto hidden = field<std::vector<int>>(meta, "audit_labels");
    if (static_cast<Index>(hidden.size()) != n) {
      throw FormatError("dataset metadata: field 'audit_labels' length disagrees with shape");
    }
    ds.audit_labels_ = std::move(hidden);
  }
  return ds;
}

void export_csv(const DomainDataset& ds, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("export_csv: cannot write " + path.string());
  out.precision(17);
  const auto labels = ds.labels();
  for (Index j = 0; j < ds.length(); ++j) out << (j ? "," : "") << "x" << j;
  if (labels) out << ",label";
  out << '\n';
  for (Index i = 0; i < ds.size(); ++i) {
    for (Index j = 0; j < ds.length(); ++j) out << (j ? "," : "") << ds.signals()(i, j);
    if (labels) out << ',' << (*labels)[static_cast<std::size_t>(i)];
    out << '\n';
  }
}

}  // namespace msadgn
