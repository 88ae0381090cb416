#pragma once

#include "msadgn/data.hpp"
#include "msadgn/networks.hpp"
#include "msadgn/tensor.hpp"

#include <span>
#include <vector>

namespace msadgn {

// Per-sample domain-similarity weights, m x K, rows on the simplex.
struct SimilarityWeights {
  Matrix w;
};

// Throws ContractError when a row leaves the simplex by more than tol.
void check_simplex(const Eigen::Ref<const Matrix>& w, double tol);

// Row i is the indicator of domain domain_labels[i] (1-based).
SimilarityWeights one_hot_weights(std::span<const int> domain_labels, int K);

// K tensors of shape m x C stacked to m x K x C.
Tensor stack_logits(std::span<const Tensor> per_domain);

// z_i = sum_k w_ik z_ik on pre-softmax logits. Differentiable in z_stack.
Tensor combine_specific(const Tensor& z_stack, const SimilarityWeights& weights);

// Shared embeddings of one source domain's labeled or pseudolabeled rows.
// An undefined tensor (or no labels) means the domain contributes nothing.
struct LabeledEmbeddings {
  int domain = 1;
  Tensor embeddings;
  std::vector<int> labels;
};

struct ClassificationLoss {
  Tensor value;
  int contributing_domains = 0;
  std::vector<double> per_domain;  // NaN for skipped domains
};

// Mean over contributing domains of each domain's mean cross-entropy under
// its own classifier C_k (one-hot similarity weights).
ClassificationLoss classification_loss(std::span<const LabeledEmbeddings> domains,
                                       std::span<const MlpHead> classifiers);

// Mean cross-entropy of C_weighted(F_weighted(x)) against the domain index,
// pooled over every source minibatch. source_batches[k - 1] is domain k.
Tensor weight_branch_loss(std::span<const Tensor> source_batches, const FeatureExtractor& weighted,
                          const MlpHead& weighted_classifier);

Tensor domain_specific_loss(const Tensor& classification, const Tensor& weight_branch);

enum class PredictMode {
  Weighted,         // similarity-weighted combination of C_1..C_K
  FirstClassifier,  // C_1 alone
};

struct Prediction {
  std::vector<int> labels;
  SimilarityWeights weights;
  Matrix logits;  // combined, m x C
};

Prediction predict(const Model& model, const Tensor& x, PredictMode mode = PredictMode::Weighted);
Prediction predict(const Model& model, const DomainDataset& data, PredictMode mode = PredictMode::Weighted,
                   Index chunk = 256);

}  // namespace msadgn
