#include "msadgn/adversarial.hpp"

#include "msadgn/error.hpp"

#include <array>
#include <cmath>

namespace msadgn {

std::vector<DomainPair> enumerate_pairs(int K) {
  if (K < 2) throw ParameterError("enumerate_pairs: K must be >= 2, got " + std::to_string(K));
  std::vector<DomainPair> pairs;
  int index = 0;
  for (int a = 1; a < K; ++a) {
    for (int b = a + 1; b <= K; ++b) pairs.push_back({a, b, index++});
  }
  return pairs;
}

double lambda_schedule(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("lambda_schedule: progress outside [0, 1]");
  return 2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0;
}

InvariantLoss domain_invariant_loss(std::span<const Tensor> embeddings, std::span<const MlpHead> discriminators,
                                    double lambda) {
  const int K = static_cast<int>(embeddings.size());
  const auto pairs = enumerate_pairs(K);
  if (discriminators.size() != pairs.size()) {
    throw ContractError("domain_invariant_loss: " + std::to_string(discriminators.size()) +
                        " discriminators for " + std::to_string(pairs.size()) + " domain pairs");
  }
  for (int k = 0; k < K; ++k) {
    if (!embeddings[static_cast<std::size_t>(k)].defined() || embeddings[static_cast<std::size_t>(k)].dim(0) < 1) {
      throw DataError("domain_invariant_loss: empty batch for domain " + std::to_string(k + 1));
    }
  }

  InvariantLoss out;
  out.report.lambda = lambda;
  Tensor total;
  for (const auto& pair : pairs) {
    const Tensor& a = embeddings[static_cast<std::size_t>(pair.k1 - 1)];
    const Tensor& b = embeddings[static_cast<std::size_t>(pair.k2 - 1)];
    const std::array<Tensor, 2> parts{a, b};
    const Tensor joined = grad_reverse(concat_rows(parts), lambda);
    std::vector<int> s(static_cast<std::size_t>(a.dim(0) + b.dim(0)), 0);
    std::fill(s.begin(), s.begin() + a.dim(0), 1);
    const Tensor logits = discriminators[static_cast<std::size_t>(pair.discriminator_index)].forward(joined);
    const Tensor loss = cross_entropy(logits, s);
    out.report.per_pair_losses.push_back(loss.item());
    total = total.defined() ? add(total, loss) : loss;
  }
  out.value = scale(total, 1.0 / static_cast<double>(pairs.size()));
  double acc = 0.0;
  for (double l : out.report.per_pair_losses) acc += l;
  out.report.mean_loss = acc * (1.0 / static_cast<double>(pairs.size()));
  return out;
}

}  // namespace msadgn
