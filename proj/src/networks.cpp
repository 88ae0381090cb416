#include "msadgn/networks.hpp"

#include "msadgn/error.hpp"

#include <cmath>

namespace msadgn {

namespace {

Tensor gaussian(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Vector v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

double weight_std(double fixed, Index fan_in) {
  return fixed > 0.0 ? fixed : std::sqrt(2.0 / static_cast<double>(fan_in));
}

}  // namespace

Index NetworkShape::conv_output_len() const {
  if (channels.empty()) throw ConfigError("network needs at least one conv layer");
  if (kernel < 1 || stride < 1 || pad < 0) throw ConfigError("invalid conv geometry");
  Index len = signal_len;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (len + 2 * pad < kernel) {
      throw ConfigError("conv layer " + std::to_string(i) + " receives length " + std::to_string(len) +
                        ", shorter than kernel " + std::to_string(kernel));
    }
    len = (len + 2 * pad - kernel) / stride + 1;
  }
  return len;
}

FeatureExtractor::FeatureExtractor(const NetworkShape& shape, std::mt19937_64& rng) {
  output_dim_ = shape.embedding_dim();
  Index cin = 1;
  for (Index cout : shape.channels) {
    if (cout < 1) throw ConfigError("conv channel counts must be positive");
    Conv1dLayer layer;
    layer.weight = gaussian({cout, cin, shape.kernel}, weight_std(shape.init_std, cin * shape.kernel), rng);
    layer.bias = Tensor::zeros({cout}, true);
    layer.stride = shape.stride;
    layer.pad = shape.pad;
    layers.push_back(std::move(layer));
    cin = cout;
  }
}

Tensor FeatureExtractor::forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& layer : layers) h = relu(layer.forward(h));
  return flatten_rows(h);
}

void FeatureExtractor::append_parameters(const std::string& prefix, NamedTensors& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string name = prefix + ".conv" + std::to_string(i);
    out.emplace_back(name + ".weight", layers[i].weight);
    out.emplace_back(name + ".bias", layers[i].bias);
  }
}

MlpHead::MlpHead(Index in, const std::vector<Index>& hidden, Index out, double init_std,
                 std::mt19937_64& rng) {
  std::vector<Index> widths{in};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(out);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    if (widths[i + 1] < 1) throw ConfigError("fully connected widths must be positive");
    layers.push_back({gaussian({widths[i], widths[i + 1]}, weight_std(init_std, widths[i]), rng),
                      Tensor::zeros({widths[i + 1]}, true)});
  }
}

Tensor MlpHead::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

void MlpHead::append_parameters(const std::string& prefix, NamedTensors& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string name = prefix + ".fc" + std::to_string(i);
    out.emplace_back(name + ".weight", layers[i].weight);
    out.emplace_back(name + ".bias", layers[i].bias);
  }
}

NamedTensors Model::named_parameters() const {
  NamedTensors out;
  shared.append_parameters("shared", out);
  weighted.append_parameters("weighted", out);
  for (std::size_t k = 0; k < classifiers.size(); ++k) {
    classifiers[k].append_parameters("classifier" + std::to_string(k + 1), out);
  }
  weighted_classifier.append_parameters("weighted_classifier", out);
  for (std::size_t d = 0; d < discriminators.size(); ++d) {
    discriminators[d].append_parameters("discriminator" + std::to_string(d + 1), out);
  }
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

Model make_model(const NetworkShape& shape, int K, int num_classes, std::uint64_t seed) {
  if (K < 1) throw ConfigError("need at least one source domain");
  if (num_classes < 1) throw ConfigError("need at least one class");
  if (shape.hidden.size() != 2) throw ConfigError("heads have exactly two hidden layers");
  std::mt19937_64 rng(seed);
  Model m;
  m.shared = FeatureExtractor(shape, rng);
  m.weighted = FeatureExtractor(shape, rng);
  const Index L = m.shared.output_dim();
  for (int k = 0; k < K; ++k) m.classifiers.emplace_back(L, shape.hidden, num_classes, shape.init_std, rng);
  m.weighted_classifier = MlpHead(L, shape.hidden, K, shape.init_std, rng);
  for (int d = 0; d < K * (K - 1) / 2; ++d) m.discriminators.emplace_back(L, shape.hidden, 2, shape.init_std, rng);
  return m;
}

}  // namespace msadgn
