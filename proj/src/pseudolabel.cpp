#include "msadgn/pseudolabel.hpp"

#include <algorithm>

namespace msadgn {

Matrix class_means(const Eigen::Ref<const Matrix>& embeddings, std::span<const int> labels, int num_classes,
                   const Matrix* fallback) {
  if (static_cast<Index>(labels.size()) != embeddings.rows()) {
    throw DimensionError("class_means: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(embeddings.rows()) + " embeddings");
  }
  Matrix sums = Matrix::Zero(num_classes, embeddings.cols());
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(num_classes);
  for (Index i = 0; i < embeddings.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= num_classes) throw LabelError("class_means: label " + std::to_string(y));
    sums.row(y) += embeddings.row(i);
    counts[y] += 1.0;
  }
  for (int c = 0; c < num_classes; ++c) {
    if (counts[c] > 0.0) {
      sums.row(c) /= counts[c];
    } else if (fallback != nullptr) {
      sums.row(c) = fallback->row(c);
    } else {
      throw DataError("class " + std::to_string(c) + " has no labeled samples");
    }
  }
  return sums;
}

PrototypeState init_prototypes(const Eigen::Ref<const Matrix>& embeddings, std::span<const int> labels,
                               int num_classes) {
  PrototypeState state;
  state.M1 = class_means(embeddings, labels, num_classes);
  if ((state.M1.rowwise().norm().array() <= 0.0).any()) {
    throw NumericError("init_prototypes: a class prototype has zero norm");
  }
  state.M1_prev = state.M1;
  state.initialized = true;
  return state;
}

PrototypeState init_prototypes(const DomainDataset& labeled, const FeatureExtractor& shared, int num_classes,
                               Index chunk) {
  const auto labels = labeled.labels();
  if (!labels) throw DataError("init_prototypes: domain " + std::to_string(labeled.domain_id()) + " is unlabeled");
  NoGradGuard no_grad;
  Matrix embeddings(labeled.size(), shared.output_dim());
  std::vector<Index> rows;
  for (Index start = 0; start < labeled.size(); start += chunk) {
    const Index count = std::min(chunk, labeled.size() - start);
    rows.resize(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) rows[static_cast<std::size_t>(i)] = start + i;
    embeddings.middleRows(start, count) = shared.forward(labeled.batch(rows)).mat();
  }
  return init_prototypes(embeddings, *labels, num_classes);
}

PrototypeState update_prototypes(const PrototypeState& state, const Eigen::Ref<const Matrix>& batch_embeddings,
                                 std::span<const int> labels) {
  if (!state.initialized) throw ContractError("update_prototypes: state not initialized");
  const Matrix batch = class_means(batch_embeddings, labels, static_cast<int>(state.M1.rows()), &state.M1);
  const double rho = flat_cosine(batch, state.M1);
  const double r2 = rho * rho;
  PrototypeState next;
  next.M1 = r2 * batch + (1.0 - r2) * state.M1;
  next.M1_prev = state.M1;
  next.initialized = true;
  next.iteration = state.iteration + 1;
  next.last_rho = rho;
  return next;
}

PrototypeState update_prototypes(const PrototypeState& state, const Tensor& labeled_batch,
                                 std::span<const int> labels, const FeatureExtractor& shared) {
  NoGradGuard no_grad;
  const Matrix embeddings = shared.forward(labeled_batch).mat();
  return update_prototypes(state, embeddings, labels);
}

PrototypeState local_prototypes(const PrototypeState& state, const Eigen::Ref<const Matrix>& batch_embeddings,
                                std::span<const int> labels) {
  if (!state.initialized) throw ContractError("local_prototypes: state not initialized");
  PrototypeState next;
  next.M1 = class_means(batch_embeddings, labels, static_cast<int>(state.M1.rows()), &state.M1);
  next.M1_prev = state.M1;
  next.initialized = true;
  next.iteration = state.iteration + 1;
  next.last_rho = 1.0;
  return next;
}

Tensor probability_score(const Tensor& embeddings, const MlpHead& classifier) {
  NoGradGuard no_grad;
  return softmax(classifier.forward(embeddings.detach())).detach();
}

Matrix raw_similarity(const Eigen::Ref<const Matrix>& embeddings, const PrototypeState& state) {
  if (!state.initialized) throw ContractError("similarity_score: prototypes not initialized");
  return cosine_similarity(embeddings, state.M1);
}

Tensor similarity_score(const Tensor& embeddings, const PrototypeState& state, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("similarity_score: temperature must be > 0");
  const Matrix sims = raw_similarity(Matrix(embeddings.mat()), state);
  return Tensor::matrix(row_softmax(sims / temperature));
}

double dynamic_threshold(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("dynamic_threshold: progress outside [0, 1]");
  return 1.0 / (1.0 + std::exp(-10.0 * p)) - 0.1;
}

Tensor pseudolabel_score(const Tensor& phi, const Tensor& psi, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("pseudolabel_score: alpha outside [0, 1]");
  if (phi.shape() != psi.shape()) {
    throw DimensionError("pseudolabel_score: " + to_string(phi.shape()) + " vs " + to_string(psi.shape()));
  }
  return Tensor::from(phi.shape(), alpha * phi.data() + (1.0 - alpha) * psi.data());
}

PseudolabelBatch select_pseudolabels(const Tensor& scores, double tau) {
  PseudolabelBatch out;
  out.scores = scores.mat();
  out.threshold_used = tau;
  for (Index i = 0; i < out.scores.rows(); ++i) {
    Index best = 0;
    const double top = out.scores.row(i).maxCoeff(&best);  // first maximum
    if (top > tau) {
      out.selected_indices.push_back(i);
      out.labels.push_back(static_cast<int>(best));
    }
  }
  return out;
}

}  // namespace msadgn
