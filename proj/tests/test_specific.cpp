#include "msadgn/error.hpp"
#include "msadgn/networks.hpp"
#include "msadgn/specific.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace msadgn;
using msadgn::testing::random_matrix;
using msadgn::testing::random_simplex_rows;

namespace {

double mean_ce(const Matrix& logits, std::span<const int> y) {
  double acc = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    acc += mx + std::log((logits.row(i).array() - mx).exp().sum()) - logits(i, y[static_cast<std::size_t>(i)]);
  }
  return acc / static_cast<double>(logits.rows());
}

NetworkShape small_shape() {
  NetworkShape s;
  s.signal_len = 32;
  s.channels = {3, 4, 4, 4};
  s.hidden = {6, 5};
  return s;
}

Tensor random_signals(std::mt19937_64& rng, Index m, Index len) {
  const Matrix x = random_matrix(rng, m, len, 0.0, 1.0);
  return Tensor::from({m, 1, len}, Vector(x.reshaped<Eigen::RowMajor>()));
}

void zero_head(MlpHead& h) {
  for (auto& l : h.layers) {
    l.weight.mutable_data().setZero();
    l.bias.mutable_data().setZero();
  }
}

}  // namespace

TEST_CASE("one_hot_weights") {
  const std::vector<int> d{2};
  CHECK(one_hot_weights(d, 3).w == (Matrix(1, 3) << 0, 1, 0).finished());
  const std::vector<int> many{1, 3, 2, 3};
  const Matrix w = one_hot_weights(many, 3).w;
  CHECK((w.rowwise().sum().array() == 1.0).all());
  const std::vector<int> ones{1, 1};
  CHECK(one_hot_weights(ones, 1).w == Matrix::Ones(2, 1));
  const std::vector<int> bad{4};
  CHECK_THROWS_AS((void)one_hot_weights(bad, 3), LabelError);
}

TEST_CASE("combine_specific") {
  std::mt19937_64 rng(1);
  std::vector<Tensor> z;
  for (int k = 0; k < 3; ++k) z.push_back(Tensor::matrix(random_matrix(rng, 5, 3)));
  const Tensor stack = stack_logits(z);
  CHECK(stack.shape() == Shape{5, 3, 3});

  SUBCASE("one-hot weights select a classifier") {
    const std::vector<int> d(5, 1);
    CHECK(combine_specific(stack, one_hot_weights(d, 3)).mat() == z[0].mat());
  }
  SUBCASE("identical logits are unchanged by any weights") {
    const std::vector<Tensor> same{z[1], z[1], z[1]};
    const Matrix out = combine_specific(stack_logits(same), {random_simplex_rows(rng, 5, 3)}).mat();
    CHECK((out - z[1].mat()).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("brute-force triple loop") {
    const SimilarityWeights w{random_simplex_rows(rng, 5, 3)};
    const Matrix out = combine_specific(stack, w).mat();
    Matrix want = Matrix::Zero(5, 3);
    for (Index i = 0; i < 5; ++i) {
      for (Index k = 0; k < 3; ++k) {
        for (Index c = 0; c < 3; ++c) want(i, c) += w.w(i, k) * z[static_cast<std::size_t>(k)].mat()(i, c);
      }
    }
    CHECK((out - want).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("weights off the simplex are rejected") {
    Matrix w = random_simplex_rows(rng, 5, 3);
    w(2, 0) += 1e-3;
    CHECK_THROWS_AS((void)combine_specific(stack, {w}), ContractError);
    CHECK_THROWS_AS((void)combine_specific(stack, {random_simplex_rows(rng, 4, 3)}), DimensionError);
  }
}

TEST_CASE("combine_specific gradient") {
  std::mt19937_64 rng(2);
  std::vector<Tensor> z;
  for (int k = 0; k < 3; ++k) z.push_back(Tensor::matrix(random_matrix(rng, 4, 3), true));
  const SimilarityWeights w{random_simplex_rows(rng, 4, 3)};
  const Tensor r = Tensor::matrix(random_matrix(rng, 4, 3));
  CHECK(finite_diff_check([&] { return sum(mul(combine_specific(stack_logits(z), w), r)); }, z, 1e-5) < 1e-6);
}

TEST_CASE("classification_loss") {
  std::mt19937_64 rng(3);
  std::vector<MlpHead> heads;
  for (int k = 0; k < 3; ++k) heads.emplace_back(6, std::vector<Index>{5, 4}, 3, 0.0, rng);

  SUBCASE("one domain is plain cross-entropy") {
    const Matrix e = random_matrix(rng, 4, 6);
    const std::vector<int> y{0, 2, 1, 1};
    const std::vector<LabeledEmbeddings> d{{1, Tensor::matrix(e), y}};
    const ClassificationLoss l = classification_loss(d, std::span(heads).first(1));
    CHECK(l.contributing_domains == 1);
    CHECK(std::abs(l.value.item() - mean_ce(heads[0].forward(Tensor::matrix(e)).mat(), y)) < 1e-12);
  }
  SUBCASE("empty pseudolabel sets drop out of the divisor") {
    const Matrix e1 = random_matrix(rng, 4, 6), e3 = random_matrix(rng, 2, 6);
    const std::vector<int> y1{0, 1, 2, 0}, y3{2, 2};
    const std::vector<LabeledEmbeddings> d{
        {1, Tensor::matrix(e1), y1}, {2, Tensor(), {}}, {3, Tensor::matrix(e3), y3}};
    const ClassificationLoss l = classification_loss(d, heads);
    const double want = (mean_ce(heads[0].forward(Tensor::matrix(e1)).mat(), y1) +
                         mean_ce(heads[2].forward(Tensor::matrix(e3)).mat(), y3)) /
                        2.0;
    CHECK(l.contributing_domains == 2);
    CHECK(std::abs(l.value.item() - want) < 1e-12);
    CHECK(std::isnan(l.per_domain[1]));
  }
  SUBCASE("saturated classifiers cost nothing") {
    MlpHead h = heads[0];
    zero_head(h);
    h.layers.back().bias.mutable_data() = (Vector(3) << 800.0, 0.0, 0.0).finished();
    const std::vector<MlpHead> one{h};
    const std::vector<LabeledEmbeddings> d{{1, Tensor::matrix(random_matrix(rng, 3, 6)), {0, 0, 0}}};
    CHECK(classification_loss(d, one).value.item() < 1e-12);
  }
  SUBCASE("domain 1 is required") {
    const std::vector<LabeledEmbeddings> d{{2, Tensor::matrix(random_matrix(rng, 2, 6)), {0, 1}}};
    CHECK_THROWS_AS((void)classification_loss(d, heads), DataError);
  }
}

TEST_CASE("weight_branch_loss") {
  std::mt19937_64 rng(4);
  const NetworkShape shape = small_shape();
  FeatureExtractor fw(shape, rng);
  MlpHead cw(shape.embedding_dim(), shape.hidden, 3, 0.0, rng);
  std::vector<Tensor> batches;
  for (int k = 0; k < 3; ++k) batches.push_back(random_signals(rng, 3, 32));

  const Tensor l = weight_branch_loss(batches, fw, cw);
  const std::vector<Tensor> all_parts(batches.begin(), batches.end());
  const Matrix logits = cw.forward(fw.forward(concat_rows(all_parts))).mat();
  const std::vector<int> d{0, 0, 0, 1, 1, 1, 2, 2, 2};
  CHECK(std::abs(l.item() - mean_ce(logits, d)) < 1e-12);

  zero_head(cw);
  CHECK(weight_branch_loss(batches, fw, cw).item() == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK(std::log(3.0) == doctest::Approx(1.0986123).epsilon(1e-7));

  batches[1] = Tensor();
  CHECK_THROWS_AS((void)weight_branch_loss(batches, fw, cw), DataError);
}

TEST_CASE("domain_specific_loss is the exact sum") {
  CHECK(domain_specific_loss(Tensor::scalar(0.4), Tensor::scalar(0.3)).item() == 0.4 + 0.3);
  CHECK(domain_specific_loss(Tensor::scalar(0.0), Tensor::scalar(0.3)).item() == 0.3);

  std::mt19937_64 rng(5);
  Tensor a = Tensor::matrix(random_matrix(rng, 2, 3), true);
  const Tensor ra = Tensor::matrix(random_matrix(rng, 2, 3)), rb = Tensor::matrix(random_matrix(rng, 2, 3));
  auto part1 = [&] { return sum(mul(relu(a), ra)); };
  auto part2 = [&] { return mean(mul(mul(a, a), rb)); };
  backward(domain_specific_loss(part1(), part2()));
  const Vector joint = a.grad();
  a.zero_grad();
  backward(part1());
  const Vector g1 = a.grad();
  a.zero_grad();
  backward(part2());
  CHECK((joint - (g1 + a.grad())).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("predict") {
  std::mt19937_64 rng(6);
  const NetworkShape shape = small_shape();
  Model model = make_model(shape, 3, 3, 77);
  const Tensor x = random_signals(rng, 12, 32);

  SUBCASE("weights are on the simplex") {
    const Prediction p = predict(model, x);
    check_simplex(p.weights.w, 1e-9);
    CHECK((p.weights.w.array() >= 0.0).all());
    CHECK(p.labels.size() == 12);
    CHECK(p.logits.rows() == 12);
  }
  SUBCASE("collapsed weights reproduce the selected classifier") {
    zero_head(model.weighted_classifier);
    model.weighted_classifier.layers.back().bias.mutable_data() = (Vector(3) << -900.0, 900.0, -900.0).finished();
    const Prediction p = predict(model, x);
    const Matrix z2 = model.classifiers[1].forward(model.shared.forward(x)).mat();
    CHECK((p.logits - z2).cwiseAbs().maxCoeff() < 1e-12);
    for (Index i = 0; i < 12; ++i) {
      Index best = 0;
      z2.row(i).maxCoeff(&best);
      CHECK(p.labels[static_cast<std::size_t>(i)] == best);
    }
  }
  SUBCASE("a constant added to every logit leaves labels unchanged") {
    const std::vector<int> before = predict(model, x).labels;
    for (auto& c : model.classifiers) c.layers.back().bias.mutable_data().array() += 3.7;
    CHECK(predict(model, x).labels == before);
  }
  SUBCASE("first-classifier mode ignores the weight branch") {
    const Prediction p = predict(model, x, PredictMode::FirstClassifier);
    CHECK((p.logits - model.classifiers[0].forward(model.shared.forward(x)).mat()).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("dataset overload chunks identically") {
    const DomainDataset ds(4, RowMatrix(Eigen::Map<const RowMatrix>(x.data().data(), 12, 32)), std::nullopt);
    const Prediction a = predict(model, ds, PredictMode::Weighted, 5);
    const Prediction b = predict(model, x);
    CHECK(a.labels == b.labels);
    CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() < 1e-12);  // GEMM blocking depends on batch size
  }
  SUBCASE("wrong signal length") {
    CHECK_THROWS_AS((void)predict(model, random_signals(rng, 2, 64)), DimensionError);
  }
}
