#pragma once

#include "msadgn/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace msadgn {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  Tensor forward(const Tensor& x) const { return add_row_bias(matmul(x, weight), bias); }
};

struct Conv1dLayer {
  Tensor weight;  // cout x cin x kernel
  Tensor bias;    // cout
  Index stride = 1;
  Index pad = 0;

  Tensor forward(const Tensor& x) const {
    return add_channel_bias(conv1d(x, weight, stride, pad), bias);
  }
};

// Architecture sizes. Defaults give a 2048-wide embedding at len 512.
struct NetworkShape {
  Index signal_len = 512;
  std::vector<Index> channels{8, 16, 32, 64};
  Index kernel = 3;
  Index stride = 2;
  Index pad = 1;
  std::vector<Index> hidden{64, 32};
  double init_std = 0.0;  // Gaussian weight std; 0 selects sqrt(2 / fan_in)

  // Spatial length after the conv stack; throws ConfigError if it collapses.
  Index conv_output_len() const;
  Index embedding_dim() const { return channels.back() * conv_output_len(); }
};

// Conv1d + ReLU stack, flattened to [m x L].
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const NetworkShape& shape, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  Index output_dim() const { return output_dim_; }
  void append_parameters(const std::string& prefix, NamedTensors& out) const;

  std::vector<Conv1dLayer> layers;

 private:
  Index output_dim_ = 0;
};

// Three fully connected layers with ReLU between; returns logits.
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(Index in, const std::vector<Index>& hidden, Index out, double init_std, std::mt19937_64& rng);

  Tensor forward(const Tensor& x) const;
  Index output_dim() const { return layers.back().weight.dim(1); }
  void append_parameters(const std::string& prefix, NamedTensors& out) const;

  std::vector<Linear> layers;
};

// Every trainable network of the method, grouped by role.
struct Model {
  FeatureExtractor shared;                // F_shared
  FeatureExtractor weighted;              // F_weighted
  std::vector<MlpHead> classifiers;       // C_1..C_K
  MlpHead weighted_classifier;            // C_weighted, K outputs
  std::vector<MlpHead> discriminators;    // one per unordered domain pair, 2 outputs

  int num_domains() const { return static_cast<int>(classifiers.size()); }
  NamedTensors named_parameters() const;
  std::vector<Tensor> parameters() const;
};

Model make_model(const NetworkShape& shape, int K, int num_classes, std::uint64_t seed);

}  // namespace msadgn
