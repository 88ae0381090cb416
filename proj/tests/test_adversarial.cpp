#include "msadgn/adversarial.hpp"
#include "msadgn/error.hpp"
#include "msadgn/networks.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <map>

using namespace msadgn;
using msadgn::testing::random_matrix;

namespace {

struct Fixture {
  std::mt19937_64 rng{21};
  std::vector<Tensor> embeddings;
  std::vector<MlpHead> discriminators;

  Fixture(int K, Index dim = 6, Index m = 4) {
    for (int k = 0; k < K; ++k) embeddings.push_back(Tensor::matrix(random_matrix(rng, m, dim), true));
    for (int d = 0; d < K * (K - 1) / 2; ++d) {
      discriminators.emplace_back(dim, std::vector<Index>{5, 4}, 2, 0.0, rng);
      for (auto& layer : discriminators.back().layers) {
        layer.bias.mutable_data() = random_matrix(rng, layer.bias.size(), 1, -0.2, 0.2).col(0);
      }
    }
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> out = embeddings;
    for (const auto& d : discriminators) {
      for (const auto& l : d.layers) out.insert(out.end(), {l.weight, l.bias});
    }
    return out;
  }

  void zero_grads() {
    for (auto& t : params()) t.zero_grad();
  }
};

// Pairwise loss written out without the reversal layer.
double straight_line_loss(const std::vector<Tensor>& emb, const std::vector<MlpHead>& discs) {
  const int K = static_cast<int>(emb.size());
  double total = 0.0;
  int pairs = 0, d = 0;
  for (int a = 0; a < K; ++a) {
    for (int b = a + 1; b < K; ++b, ++d) {
      const std::vector<Tensor> parts{emb[static_cast<std::size_t>(a)], emb[static_cast<std::size_t>(b)]};
      const Matrix logits = discs[static_cast<std::size_t>(d)].forward(concat_rows(parts)).mat();
      const Index na = emb[static_cast<std::size_t>(a)].dim(0);
      double ce = 0.0;
      for (Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        ce += lse - logits(i, i < na ? 1 : 0);
      }
      total += ce / static_cast<double>(logits.rows());
      ++pairs;
    }
  }
  return total / pairs;
}

}  // namespace

TEST_CASE("enumerate_pairs") {
  CHECK(enumerate_pairs(2) == std::vector<DomainPair>{{1, 2, 0}});
  CHECK(enumerate_pairs(3) == std::vector<DomainPair>{{1, 2, 0}, {1, 3, 1}, {2, 3, 2}});
  CHECK(enumerate_pairs(4).size() == 6);
  for (int K = 2; K <= 7; ++K) {
    const auto pairs = enumerate_pairs(K);
    CHECK(static_cast<int>(pairs.size()) == K * (K - 1) / 2);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      CHECK(pairs[i].discriminator_index == static_cast<int>(i));
      CHECK(pairs[i].k1 < pairs[i].k2);
      if (i) CHECK(std::pair(pairs[i - 1].k1, pairs[i - 1].k2) < std::pair(pairs[i].k1, pairs[i].k2));
    }
  }
  CHECK_THROWS_AS((void)enumerate_pairs(1), ParameterError);
}

TEST_CASE("lambda schedule") {
  CHECK(lambda_schedule(0.0) == 0.0);
  CHECK(lambda_schedule(1.0) == doctest::Approx(0.9999092).epsilon(1e-7));
  CHECK(lambda_schedule(0.5) == doctest::Approx(0.9866143).epsilon(1e-7));
  CHECK_THROWS_AS((void)lambda_schedule(1.5), ParameterError);
  CHECK_THROWS_AS((void)lambda_schedule(-0.5), ParameterError);
}

TEST_CASE("an indifferent discriminator costs ln 2 per pair") {
  Fixture f(3);
  for (auto& d : f.discriminators) {
    for (auto& l : d.layers) {
      l.weight.mutable_data().setZero();
      l.bias.mutable_data().setZero();
    }
  }
  const InvariantLoss loss = domain_invariant_loss(f.embeddings, f.discriminators, 0.5);
  for (double l : loss.report.per_pair_losses) CHECK(l == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(loss.value.item() == doctest::Approx(0.6931472).epsilon(1e-7));
}

TEST_CASE("invariant loss matches a straight-line oracle") {
  Fixture f(3);
  const InvariantLoss loss = domain_invariant_loss(f.embeddings, f.discriminators, 0.8);
  CHECK(std::abs(loss.value.item() - straight_line_loss(f.embeddings, f.discriminators)) < 1e-12);
  CHECK(loss.value.item() >= 0.0);
  CHECK(loss.report.lambda == 0.8);
  double mean = 0.0;
  for (double l : loss.report.per_pair_losses) mean += l;
  mean /= 3.0;
  CHECK(loss.report.mean_loss == doctest::Approx(mean).epsilon(1e-15));
}

TEST_CASE("lambda scales only the feature-side gradient") {
  // Against the lambda = 1 pass: embeddings scale by lambda, discriminators
  // are untouched.
  for (double lambda : {0.0, 0.3, 1.0}) {
    Fixture f(3);
    auto grads = [&](double l) {
      f.zero_grads();
      backward(domain_invariant_loss(f.embeddings, f.discriminators, l).value);
      std::vector<Vector> g;
      for (const auto& t : f.params()) g.push_back(t.has_grad() ? t.grad() : Vector::Zero(t.size()));
      return g;
    };
    const auto with = grads(lambda);
    const auto unit = grads(1.0);
    const std::size_t n_emb = f.embeddings.size();
    for (std::size_t i = 0; i < with.size(); ++i) {
      const Vector expected = i < n_emb ? Vector(lambda * unit[i]) : unit[i];
      CHECK((with[i] - expected).cwiseAbs().maxCoeff() <= 1e-15 * (1.0 + unit[i].cwiseAbs().maxCoeff()));
    }
    if (lambda == 0.0) {
      for (std::size_t i = 0; i < n_emb; ++i) CHECK(with[i].cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("gradient sign property by double evaluation") {
  Fixture f(3);
  const double lambda = 0.45;
  auto embedding_grads = [&](bool reversed) {
    f.zero_grads();
    Tensor total;
    const auto pairs = enumerate_pairs(3);
    if (reversed) {
      total = domain_invariant_loss(f.embeddings, f.discriminators, lambda).value;
    } else {
      for (const auto& p : pairs) {
        const std::vector<Tensor> parts{f.embeddings[static_cast<std::size_t>(p.k1 - 1)],
                                        f.embeddings[static_cast<std::size_t>(p.k2 - 1)]};
        std::vector<int> s(8, 0);
        std::fill(s.begin(), s.begin() + 4, 1);
        const Tensor l =
            cross_entropy(f.discriminators[static_cast<std::size_t>(p.discriminator_index)].forward(concat_rows(parts)), s);
        total = total.defined() ? add(total, l) : l;
      }
      total = scale(total, 1.0 / 3.0);
    }
    backward(total);
    std::vector<Vector> g;
    for (const auto& e : f.embeddings) g.push_back(e.grad());
    return g;
  };
  const auto rev = embedding_grads(true);
  const auto plain = embedding_grads(false);
  for (std::size_t k = 0; k < rev.size(); ++k) {
    CHECK(plain[k].cwiseAbs().maxCoeff() > 0.0);
    CHECK((rev[k] + lambda * plain[k]).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("swapping a pair and flipping labels leaves the loss unchanged") {
  Fixture f(2);
  const MlpHead& d = f.discriminators[0];
  const std::vector<Tensor> ab{f.embeddings[0], f.embeddings[1]}, ba{f.embeddings[1], f.embeddings[0]};
  const std::vector<int> s_ab{1, 1, 1, 1, 0, 0, 0, 0}, s_ba{0, 0, 0, 0, 1, 1, 1, 1};
  const double a = cross_entropy(d.forward(concat_rows(ab)), s_ab).item();
  const double b = cross_entropy(d.forward(concat_rows(ba)), s_ba).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-14));
  CHECK(domain_invariant_loss(f.embeddings, f.discriminators, 1.0).value.item() == doctest::Approx(a).epsilon(1e-14));
}

TEST_CASE("unequal batch sizes") {
  Fixture f(3);
  f.embeddings[1] = Tensor::matrix(random_matrix(f.rng, 2, 6), true);
  const InvariantLoss loss = domain_invariant_loss(f.embeddings, f.discriminators, 1.0);
  CHECK(std::abs(loss.value.item() - straight_line_loss(f.embeddings, f.discriminators)) < 1e-12);
}

TEST_CASE("invariant loss errors") {
  Fixture f(3);
  std::vector<MlpHead> too_few(f.discriminators.begin(), f.discriminators.begin() + 2);
  CHECK_THROWS_AS((void)domain_invariant_loss(f.embeddings, too_few, 1.0), ContractError);
  std::vector<Tensor> missing = f.embeddings;
  missing[2] = Tensor();
  try {
    (void)domain_invariant_loss(missing, f.discriminators, 1.0);
    FAIL("no throw");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("domain 3") != std::string::npos);
  }
}
