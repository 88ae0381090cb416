#pragma once

#include "msadgn/networks.hpp"
#include "msadgn/tensor.hpp"

#include <span>
#include <vector>

namespace msadgn {

struct DomainPair {
  int k1 = 1;
  int k2 = 2;
  int discriminator_index = 0;

  bool operator==(const DomainPair&) const = default;
};

// All unordered pairs (k1 < k2) of domains 1..K in lexicographic order.
std::vector<DomainPair> enumerate_pairs(int K);

// 2 / (1 + exp(-10 p)) - 1.
double lambda_schedule(double p);

struct AdversarialLossReport {
  std::vector<double> per_pair_losses;
  double mean_loss = 0.0;
  double lambda = 0.0;
};

struct InvariantLoss {
  Tensor value;
  AdversarialLossReport report;
};

// Mean over domain pairs of the binary cross-entropy of each pair's
// discriminator on gradient-reversed shared embeddings. The lower-indexed
// domain of a pair is class 1. embeddings[k - 1] holds domain k's minibatch.
InvariantLoss domain_invariant_loss(std::span<const Tensor> embeddings, std::span<const MlpHead> discriminators,
                                    double lambda);

}  // namespace msadgn
