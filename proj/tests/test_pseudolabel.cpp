#include "msadgn/error.hpp"
#include "msadgn/networks.hpp"
#include "msadgn/pseudolabel.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace msadgn;
using msadgn::testing::random_matrix;
using msadgn::testing::random_simplex_rows;

namespace {

// Straight-line softmax(C1(x)) with explicit loops.
Matrix reference_probability(const Matrix& x, const MlpHead& head) {
  Matrix h = x;
  for (std::size_t l = 0; l < head.layers.size(); ++l) {
    const Matrix w = head.layers[l].weight.mat();
    const Vector& b = head.layers[l].bias.data();
    Matrix next(h.rows(), w.cols());
    for (Index i = 0; i < h.rows(); ++i) {
      for (Index j = 0; j < w.cols(); ++j) {
        double acc = b[j];
        for (Index k = 0; k < h.cols(); ++k) acc += h(i, k) * w(k, j);
        next(i, j) = (l + 1 < head.layers.size()) ? std::max(0.0, acc) : acc;
      }
    }
    h = next;
  }
  for (Index i = 0; i < h.rows(); ++i) {
    const double mx = h.row(i).maxCoeff();
    double z = 0.0;
    for (Index j = 0; j < h.cols(); ++j) z += std::exp(h(i, j) - mx);
    for (Index j = 0; j < h.cols(); ++j) h(i, j) = std::exp(h(i, j) - mx) / z;
  }
  return h;
}

PrototypeState state_from(const Matrix& m1) {
  PrototypeState s;
  s.M1 = m1;
  s.M1_prev = m1;
  s.initialized = true;
  return s;
}

}  // namespace

TEST_CASE("probability_score with zero weights is uniform") {
  std::mt19937_64 rng(1);
  MlpHead head(6, {5, 4}, 3, 0.1, rng);
  for (auto& layer : head.layers) {
    layer.weight.mutable_data().setZero();
    layer.bias.mutable_data().setZero();
  }
  const Matrix phi = probability_score(Tensor::matrix(random_matrix(rng, 4, 6)), head).mat();
  CHECK((phi.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("probability_score matches a straight-line reimplementation") {
  std::mt19937_64 rng(2);
  MlpHead head(8, {6, 5}, 3, 0.5, rng);
  for (auto& layer : head.layers) layer.bias.mutable_data() = random_matrix(rng, layer.bias.size(), 1).col(0);
  const Matrix x = random_matrix(rng, 10, 8);
  const Matrix phi = probability_score(Tensor::matrix(x), head).mat();
  CHECK((phi - reference_probability(x, head)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(((phi.rowwise().sum().array() - 1.0).abs() < 1e-12).all());
}

TEST_CASE("init_prototypes is the per-class mean") {
  std::mt19937_64 rng(3);
  SUBCASE("one sample per class") {
    const Matrix e = random_matrix(rng, 3, 5);
    const std::vector<int> y{2, 0, 1};
    const PrototypeState s = init_prototypes(e, y, 3);
    CHECK(s.M1.row(0) == e.row(1));
    CHECK(s.M1.row(1) == e.row(2));
    CHECK(s.M1.row(2) == e.row(0));
    CHECK(s.M1_prev == s.M1);
    CHECK(s.initialized);
    CHECK(s.iteration == 0);
  }
  SUBCASE("duplicating samples changes nothing") {
    const Matrix e = random_matrix(rng, 6, 4);
    const std::vector<int> y{0, 1, 2, 0, 1, 2};
    Matrix e2(12, 4);
    e2 << e, e;
    std::vector<int> y2 = y;
    y2.insert(y2.end(), y.begin(), y.end());
    CHECK((init_prototypes(e, y, 3).M1 - init_prototypes(e2, y2, 3).M1).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("brute-force mean oracle") {
    const Matrix e = random_matrix(rng, 40, 7);
    std::vector<int> y(40);
    std::uniform_int_distribution<int> c(0, 2);
    for (auto& v : y) v = c(rng);
    y[0] = 0, y[1] = 1, y[2] = 2;
    Matrix want = Matrix::Zero(3, 7);
    std::array<int, 3> n{};
    for (int i = 0; i < 40; ++i) {
      for (int j = 0; j < 7; ++j) want(y[static_cast<std::size_t>(i)], j) += e(i, j);
      ++n[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])];
    }
    for (int k = 0; k < 3; ++k) want.row(k) /= n[static_cast<std::size_t>(k)];
    CHECK((init_prototypes(e, y, 3).M1 - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("init_prototypes needs every class") {
  const Matrix e = Matrix::Ones(2, 3);
  const std::vector<int> y{0, 2};
  try {
    (void)init_prototypes(e, y, 3);
    FAIL("no throw");
  } catch (const DataError& err) {
    CHECK(std::string(err.what()).find('1') != std::string::npos);
  }
}

TEST_CASE("update_prototypes global iteration") {
  const std::vector<int> y{0, 1, 2};
  Matrix old(3, 2);
  old << 1, 0, 0, 1, 1, 1;

  SUBCASE("identical batch keeps M1") {
    const PrototypeState next = update_prototypes(state_from(old), old, y);
    CHECK(next.last_rho == doctest::Approx(1.0));
    CHECK((next.M1 - old).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(next.M1_prev == old);
    CHECK(next.iteration == 1);
  }
  SUBCASE("orthogonal batch keeps M1") {
    Matrix ortho(3, 2);
    ortho << 0, 1, -1, 0, 1, -1;  // flattened dot with old is 0
    const PrototypeState next = update_prototypes(state_from(old), ortho, y);
    CHECK(next.last_rho == doctest::Approx(0.0));
    CHECK(next.M1 == old);
  }
  SUBCASE("rho = 0.6 blends 0.36 new + 0.64 old") {
    Matrix a = Matrix::Zero(3, 2), b = Matrix::Zero(3, 2);
    a(0, 0) = 1.0;
    b(0, 0) = 0.6;
    b(0, 1) = 0.8;  // cos(a, b) = 0.6
    const PrototypeState next = update_prototypes(state_from(a), b, y);
    CHECK(next.last_rho == doctest::Approx(0.6).epsilon(1e-14));
    CHECK((next.M1 - (0.36 * b + 0.64 * a)).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("absent classes copy their previous row") {
    const std::vector<int> only0{0, 0};
    Matrix batch(2, 2);
    batch << 2, 0, 4, 0;
    const PrototypeState next = update_prototypes(state_from(old), batch, only0);
    CHECK(next.M1.row(1) == old.row(1));
    CHECK(next.M1.row(2) == old.row(2));
  }
}

TEST_CASE("prototype contraction property") {
  std::mt19937_64 rng(4);
  const std::vector<int> y{0, 1, 2, 2, 1, 0};
  PrototypeState s = init_prototypes(random_matrix(rng, 6, 8, 0.0, 1.0), y, 3);
  for (int t = 0; t < 100; ++t) {
    const Matrix batch = random_matrix(rng, 6, 8, -1.0, 1.0);
    const Matrix local = class_means(batch, y, 3);
    const PrototypeState next = update_prototypes(s, batch, y);
    const double r2 = next.last_rho * next.last_rho;
    CHECK((next.M1 - s.M1).norm() <= r2 * (local - s.M1).norm() * (1.0 + 1e-12) + 1e-15);
    s = next;
  }
}

TEST_CASE("local prototypes do not blend") {
  Matrix old(3, 2), batch(3, 2);
  old << 1, 0, 0, 1, 1, 1;
  batch << 5, 5, 6, 6, 7, 7;
  const std::vector<int> y{0, 1, 2};
  const PrototypeState s = local_prototypes(state_from(old), batch, y);
  CHECK(s.M1 == batch);
}

TEST_CASE("similarity_score examples") {
  const Matrix m1 = Matrix::Identity(3, 3);
  const PrototypeState s = state_from(m1);
  Matrix e(1, 3);
  e << 1, 0, 0;
  const Matrix psi = similarity_score(Tensor::matrix(e), s).mat();
  CHECK(psi(0, 0) == doctest::Approx(0.5761).epsilon(1e-4));
  CHECK(psi(0, 1) == doctest::Approx(0.2119).epsilon(1e-4));
  CHECK(psi(0, 2) == doctest::Approx(0.2119).epsilon(1e-4));

  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(rng, 4, 3);
  const PrototypeState r = state_from(random_matrix(rng, 3, 3));
  const Matrix a = similarity_score(Tensor::matrix(x), r, 0.05).mat();
  const Matrix b = similarity_score(Tensor::matrix(Matrix(10.0 * x)), r, 0.05).mat();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("similarity temperature sharpens without changing the argmax") {
  std::mt19937_64 rng(6);
  const Matrix x = random_matrix(rng, 8, 5);
  const PrototypeState s = state_from(random_matrix(rng, 3, 5));
  const Matrix soft = similarity_score(Tensor::matrix(x), s, 1.0).mat();
  const Matrix sharp = similarity_score(Tensor::matrix(x), s, 0.005).mat();
  for (Index i = 0; i < 8; ++i) {
    Index a = 0, b = 0;
    CHECK(soft.row(i).maxCoeff(&a) <= sharp.row(i).maxCoeff(&b));
    CHECK(a == b);
  }
}

TEST_CASE("raw cosines match brute force") {
  std::mt19937_64 rng(7);
  const Matrix x = random_matrix(rng, 20, 6);
  const Matrix m1 = random_matrix(rng, 3, 6);
  const Matrix raw = raw_similarity(x, state_from(m1));
  double worst = 0.0;
  for (Index i = 0; i < 20; ++i) {
    for (Index j = 0; j < 3; ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (Index k = 0; k < 6; ++k) {
        dot += x(i, k) * m1(j, k);
        na += x(i, k) * x(i, k);
        nb += m1(j, k) * m1(j, k);
      }
      worst = std::max(worst, std::abs(raw(i, j) - dot / std::sqrt(na * nb)));
    }
  }
  CHECK(worst < 1e-12);
  CHECK(raw.cwiseAbs().maxCoeff() <= 1.0 + 1e-15);
}

TEST_CASE("zero-norm embeddings are numeric errors") {
  const PrototypeState s = state_from(Matrix::Identity(3, 3));
  CHECK_THROWS_AS((void)similarity_score(Tensor::matrix(Matrix::Zero(1, 3)), s), NumericError);
}

TEST_CASE("dynamic_threshold values") {
  CHECK(dynamic_threshold(0.0) == 0.4);
  CHECK(dynamic_threshold(1.0) == doctest::Approx(0.8999546).epsilon(1e-7));
  CHECK(dynamic_threshold(0.5) == doctest::Approx(0.8933071).epsilon(1e-7));
  CHECK_THROWS_AS((void)dynamic_threshold(-0.01), ParameterError);
  CHECK_THROWS_AS((void)dynamic_threshold(1.01), ParameterError);
  double prev = dynamic_threshold(0.0);
  for (int i = 1; i <= 1000; ++i) {
    const double t = dynamic_threshold(i / 1000.0);
    CHECK(t > prev);
    prev = t;
  }
}

TEST_CASE("pseudolabel_score examples") {
  Matrix phi(1, 3), psi(1, 3);
  phi << 0.5, 0.3, 0.2;
  psi << 0.6, 0.2, 0.2;
  const Tensor p = Tensor::matrix(phi), q = Tensor::matrix(psi);
  CHECK(pseudolabel_score(p, q, 1.0).mat() == phi);
  CHECK(pseudolabel_score(p, q, 0.0).mat() == psi);
  const Matrix mix = pseudolabel_score(p, q, 0.2).mat();
  CHECK(mix(0, 0) == doctest::Approx(0.58));
  CHECK(mix(0, 1) == doctest::Approx(0.22));
  CHECK(mix(0, 2) == doctest::Approx(0.20));
  CHECK_THROWS_AS((void)pseudolabel_score(p, q, 1.5), ParameterError);
  CHECK_THROWS_AS((void)pseudolabel_score(p, Tensor::matrix(Matrix::Zero(2, 3)), 0.5), DimensionError);
}

TEST_CASE("Phi stays on the simplex") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> a(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    const Matrix s = pseudolabel_score(Tensor::matrix(random_simplex_rows(rng, 5, 3)),
                                       Tensor::matrix(random_simplex_rows(rng, 5, 3)), a(rng))
                         .mat();
    CHECK((s.array() >= 0.0).all());
    CHECK(((s.rowwise().sum().array() - 1.0).abs() < 1e-12).all());
  }
}

TEST_CASE("select_pseudolabels examples") {
  Matrix s(2, 3);
  s << 0.95, 0.03, 0.02, 0.2, 0.5, 0.3;
  const PseudolabelBatch b = select_pseudolabels(Tensor::matrix(s), 0.6);
  CHECK(b.selected_indices == std::vector<Index>{0});
  CHECK(b.labels == std::vector<int>{0});
  CHECK(b.threshold_used == 0.6);
  CHECK(b.scores == s);
  CHECK(select_pseudolabels(Tensor::matrix(s), 1.0).size() == 0);
}

TEST_CASE("selection is strict and ties go to the lowest class") {
  Matrix s(3, 3);
  s << 0.4, 0.4, 0.2, 0.2, 0.4, 0.4, 0.5, 0.25, 0.25;
  const PseudolabelBatch at = select_pseudolabels(Tensor::matrix(s), 0.4);
  CHECK(at.selected_indices == std::vector<Index>{2});
  const PseudolabelBatch below = select_pseudolabels(Tensor::matrix(s), 0.39);
  CHECK(below.selected_indices == std::vector<Index>{0, 1, 2});
  CHECK(below.labels == std::vector<int>{0, 1, 0});
}

TEST_CASE("selection matches a brute-force selector") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Matrix s = random_simplex_rows(rng, 200, 3);
  for (int t = 0; t < 20; ++t) {
    const double tau = u(rng);
    std::vector<Index> rows;
    std::vector<int> labels;
    for (Index i = 0; i < 200; ++i) {
      int best = 0;
      for (int j = 1; j < 3; ++j) best = s(i, j) > s(i, best) ? j : best;
      if (s(i, best) > tau) {
        rows.push_back(i);
        labels.push_back(best);
      }
    }
    const PseudolabelBatch b = select_pseudolabels(Tensor::matrix(s), tau);
    CHECK(b.selected_indices == rows);
    CHECK(b.labels == labels);
  }
}

TEST_CASE("raising the threshold never enlarges the selection") {
  std::mt19937_64 rng(10);
  const Matrix s = random_simplex_rows(rng, 100, 4);
  std::vector<Index> prev = select_pseudolabels(Tensor::matrix(s), 0.0).selected_indices;
  for (int i = 1; i <= 50; ++i) {
    const std::vector<Index> cur = select_pseudolabels(Tensor::matrix(s), i / 50.0).selected_indices;
    CHECK(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
    prev = cur;
  }
}

TEST_CASE("alpha = 1 with a fixed threshold is the plain confidence rule") {
  std::mt19937_64 rng(11);
  const Matrix phi = random_simplex_rows(rng, 50, 3);
  const Matrix psi = random_simplex_rows(rng, 50, 3);
  const PseudolabelBatch mixed =
      select_pseudolabels(pseudolabel_score(Tensor::matrix(phi), Tensor::matrix(psi), 1.0), 0.4);
  const PseudolabelBatch plain = select_pseudolabels(Tensor::matrix(phi), 0.4);
  CHECK(mixed.selected_indices == plain.selected_indices);
  CHECK(mixed.labels == plain.labels);
}
