#include "msadgn/specific.hpp"

#include "msadgn/error.hpp"
#include "msadgn/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace msadgn {

void check_simplex(const Eigen::Ref<const Matrix>& w, double tol) {
  for (Index i = 0; i < w.rows(); ++i) {
    const double lo = w.row(i).minCoeff(), hi = w.row(i).maxCoeff(), total = w.row(i).sum();
    if (lo < -tol || hi > 1.0 + tol || std::abs(total - 1.0) > tol) {
      throw ContractError("similarity weights row " + std::to_string(i) + " is off the simplex (sum " +
                          std::to_string(total) + ")");
    }
  }
}

SimilarityWeights one_hot_weights(std::span<const int> domain_labels, int K) {
  if (K < 1) throw ParameterError("one_hot_weights: K must be >= 1");
  SimilarityWeights out{Matrix::Zero(static_cast<Index>(domain_labels.size()), K)};
  for (std::size_t i = 0; i < domain_labels.size(); ++i) {
    const int d = domain_labels[i];
    if (d < 1 || d > K) {
      throw LabelError("one_hot_weights: domain label " + std::to_string(d) + " outside 1.." + std::to_string(K));
    }
    out.w(static_cast<Index>(i), d - 1) = 1.0;
  }
  return out;
}

Tensor stack_logits(std::span<const Tensor> per_domain) {
  if (per_domain.empty()) throw DimensionError("stack_logits: no inputs");
  const Index m = per_domain.front().dim(0), c = per_domain.front().dim(1);
  const auto K = static_cast<Index>(per_domain.size());
  Vector out(m * K * c);
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (Index k = 0; k < K; ++k) {
    const Tensor& z = per_domain[static_cast<std::size_t>(k)];
    if (z.rank() != 2 || z.dim(0) != m || z.dim(1) != c) {
      throw DimensionError("stack_logits: " + to_string(z.shape()) + " vs " + to_string({m, c}));
    }
    for (Index i = 0; i < m; ++i) out.segment((i * K + k) * c, c) = z.data().segment(i * c, c);
    nodes.push_back(z.node());
  }
  return Tensor::make_result({m, K, c}, std::move(out), "stack_logits",
                             std::vector<Tensor>(per_domain.begin(), per_domain.end()),
                             [nodes, m, K, c](const Vector& g) {
                               for (Index k = 0; k < K; ++k) {
                                 const auto& node = nodes[static_cast<std::size_t>(k)];
                                 if (!node->requires_grad) continue;
                                 Vector& gz = node->ensure_grad();
                                 for (Index i = 0; i < m; ++i) gz.segment(i * c, c) += g.segment((i * K + k) * c, c);
                               }
                             });
}

Tensor combine_specific(const Tensor& z_stack, const SimilarityWeights& weights) {
  if (z_stack.rank() != 3) throw DimensionError("combine_specific: expected m x K x C, got " + to_string(z_stack.shape()));
  const Index m = z_stack.dim(0), K = z_stack.dim(1), c = z_stack.dim(2);
  if (weights.w.rows() != m || weights.w.cols() != K) {
    throw DimensionError("combine_specific: weights " + to_string({weights.w.rows(), weights.w.cols()}) +
                         " vs logits " + to_string(z_stack.shape()));
  }
  check_simplex(weights.w, 1e-6);
  Vector out = Vector::Zero(m * c);
  const Vector& z = z_stack.data();
  for (Index i = 0; i < m; ++i) {
    for (Index k = 0; k < K; ++k) out.segment(i * c, c) += weights.w(i, k) * z.segment((i * K + k) * c, c);
  }
  auto node = z_stack.node();
  Matrix w = weights.w;
  return Tensor::make_result({m, c}, std::move(out), "combine_specific", {z_stack},
                             [node, w, m, K, c](const Vector& g) {
                               if (!node->requires_grad) return;
                               Vector& gz = node->ensure_grad();
                               for (Index i = 0; i < m; ++i) {
                                 for (Index k = 0; k < K; ++k) gz.segment((i * K + k) * c, c) += w(i, k) * g.segment(i * c, c);
                               }
                             });
}

ClassificationLoss classification_loss(std::span<const LabeledEmbeddings> domains,
                                       std::span<const MlpHead> classifiers) {
  ClassificationLoss out;
  bool have_first = false;
  Tensor total;
  for (const auto& d : domains) {
    if (d.domain < 1 || d.domain > static_cast<int>(classifiers.size())) {
      throw LabelError("classification_loss: no classifier for domain " + std::to_string(d.domain));
    }
    if (!d.embeddings.defined() || d.labels.empty()) {
      out.per_domain.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    if (d.domain == 1) have_first = true;
    const Tensor logits = classifiers[static_cast<std::size_t>(d.domain - 1)].forward(d.embeddings);
    const Tensor loss = cross_entropy(logits, d.labels);
    out.per_domain.push_back(loss.item());
    total = total.defined() ? add(total, loss) : loss;
    ++out.contributing_domains;
  }
  if (!have_first) throw DataError("classification_loss: no labeled samples from domain 1");
  out.value = scale(total, 1.0 / static_cast<double>(out.contributing_domains));
  return out;
}

Tensor weight_branch_loss(std::span<const Tensor> source_batches, const FeatureExtractor& weighted,
                          const MlpHead& weighted_classifier) {
  if (source_batches.empty()) throw DataError("weight_branch_loss: no source batches");
  std::vector<int> domains;
  for (std::size_t k = 0; k < source_batches.size(); ++k) {
    if (!source_batches[k].defined() || source_batches[k].dim(0) < 1) {
      throw DataError("weight_branch_loss: empty batch for domain " + std::to_string(k + 1));
    }
    domains.insert(domains.end(), static_cast<std::size_t>(source_batches[k].dim(0)), static_cast<int>(k));
  }
  const Tensor x = concat_rows(source_batches);
  return cross_entropy(weighted_classifier.forward(weighted.forward(x)), domains);
}

Tensor domain_specific_loss(const Tensor& classification, const Tensor& weight_branch) {
  return add(classification, weight_branch);
}

Prediction predict(const Model& model, const Tensor& x, PredictMode mode) {
  if (x.rank() != 3 || x.dim(1) != 1) throw DimensionError("predict: expected m x 1 x len, got " + to_string(x.shape()));
  NoGradGuard no_grad;
  const Tensor features = model.shared.forward(x);
  if (features.dim(1) != model.shared.output_dim()) {
    throw DimensionError("predict: signal length " + std::to_string(x.dim(2)) +
                         " does not match the trained architecture");
  }
  const Index m = x.dim(0);
  const int K = model.num_domains();
  Prediction out;
  if (mode == PredictMode::FirstClassifier) {
    out.weights = one_hot_weights(std::vector<int>(static_cast<std::size_t>(m), 1), K);
    out.logits = model.classifiers.front().forward(features).mat();
  } else {
    out.weights.w = softmax(model.weighted_classifier.forward(model.weighted.forward(x))).mat();
    std::vector<Tensor> per_domain;
    for (const auto& c : model.classifiers) per_domain.push_back(c.forward(features));
    out.logits = combine_specific(stack_logits(per_domain), out.weights).mat();
  }
  const Matrix probs = row_softmax(out.logits);
  out.labels.resize(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    Index best = 0;
    probs.row(i).maxCoeff(&best);
    out.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

Prediction predict(const Model& model, const DomainDataset& data, PredictMode mode, Index chunk) {
  Prediction out;
  const int K = model.num_domains();
  out.weights.w.resize(data.size(), K);
  std::vector<Index> rows;
  for (Index start = 0; start < data.size(); start += chunk) {
    const Index count = std::min(chunk, data.size() - start);
    rows.resize(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) rows[static_cast<std::size_t>(i)] = start + i;
    Prediction part = predict(model, data.batch(rows), mode);
    if (out.logits.size() == 0) out.logits.resize(data.size(), part.logits.cols());
    out.logits.middleRows(start, count) = part.logits;
    out.weights.w.middleRows(start, count) = part.weights.w;
    out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
  }
  return out;
}

}  // namespace msadgn
