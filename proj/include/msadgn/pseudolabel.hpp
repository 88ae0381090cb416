#pragma once

#include "msadgn/data.hpp"
#include "msadgn/error.hpp"
#include "msadgn/networks.hpp"
#include "msadgn/tensor.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace msadgn {

// ---- Eigen-level helpers ---------------------------------------------------

// Row-wise softmax with per-row max subtraction.
template <typename Derived>
Matrix row_softmax(const Eigen::MatrixBase<Derived>& x) {
  Matrix y = (x.colwise() - x.rowwise().maxCoeff()).array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

// Pairwise cosine similarity between rows of a (m x L) and rows of b (C x L).
template <typename DerivedA, typename DerivedB>
Matrix cosine_similarity(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.cols()) throw DimensionError("cosine_similarity: feature widths differ");
  const Eigen::VectorXd na = a.rowwise().norm();
  const Eigen::VectorXd nb = b.rowwise().norm();
  if ((na.array() <= 0.0).any()) throw NumericError("cosine_similarity: zero-norm embedding");
  if ((nb.array() <= 0.0).any()) throw NumericError("cosine_similarity: zero-norm prototype");
  Matrix s = a * b.transpose();
  s.array().colwise() /= na.array();
  s.array().rowwise() /= nb.transpose().array();
  return s;
}

// Cosine of two equally shaped matrices read as flat vectors.
template <typename DerivedA, typename DerivedB>
double flat_cosine(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  const double na = a.norm(), nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("flat_cosine: zero-norm operand");
  return a.cwiseProduct(b).sum() / (na * nb);
}

// ---- prototypes ------------------------------------------------------------

// Class prototypes of the labeled domain, one row per class.
struct PrototypeState {
  Matrix M1;       // C x L
  Matrix M1_prev;  // C x L
  bool initialized = false;
  int iteration = 0;
  double last_rho = 1.0;
};

// Per-class mean rows of `embeddings`. Classes absent from `labels` copy the
// matching row of `fallback`, or raise DataError when there is none.
Matrix class_means(const Eigen::Ref<const Matrix>& embeddings, std::span<const int> labels, int num_classes,
                   const Matrix* fallback = nullptr);

PrototypeState init_prototypes(const Eigen::Ref<const Matrix>& embeddings, std::span<const int> labels,
                               int num_classes);
// Full pass over the labeled domain, in chunks.
PrototypeState init_prototypes(const DomainDataset& labeled, const FeatureExtractor& shared, int num_classes,
                               Index chunk = 256);

// Global iteration: rho = cos(batch, M1); M1 <- rho^2 batch + (1 - rho^2) M1.
PrototypeState update_prototypes(const PrototypeState& state, const Eigen::Ref<const Matrix>& batch_embeddings,
                                 std::span<const int> labels);
PrototypeState update_prototypes(const PrototypeState& state, const Tensor& labeled_batch,
                                 std::span<const int> labels, const FeatureExtractor& shared);
// Minibatch-local prototypes with no blending (ablation M4).
PrototypeState local_prototypes(const PrototypeState& state, const Eigen::Ref<const Matrix>& batch_embeddings,
                                std::span<const int> labels);

// ---- scores and selection --------------------------------------------------

// softmax(C1(embeddings)); no graph is recorded.
Tensor probability_score(const Tensor& embeddings, const MlpHead& classifier);

// Raw cosines against each prototype, m x C in [-1, 1].
Matrix raw_similarity(const Eigen::Ref<const Matrix>& embeddings, const PrototypeState& state);
// Row softmax of raw cosines divided by temperature.
Tensor similarity_score(const Tensor& embeddings, const PrototypeState& state, double temperature = 1.0);

// 1 / (1 + exp(-10 p)) - 0.1 for training progress p in [0, 1].
double dynamic_threshold(double p);

// alpha * phi + (1 - alpha) * psi.
Tensor pseudolabel_score(const Tensor& phi, const Tensor& psi, double alpha);

struct PseudolabelBatch {
  std::vector<Index> selected_indices;
  std::vector<int> labels;
  Matrix scores;
  double threshold_used = 0.0;

  std::size_t size() const { return selected_indices.size(); }
};

// Keeps row i iff max_j scores(i, j) > tau; label is the first argmax.
PseudolabelBatch select_pseudolabels(const Tensor& scores, double tau);

}  // namespace msadgn
