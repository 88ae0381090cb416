#include "msadgn/gradcheck.hpp"

#include "msadgn/trainer.hpp"

#include <random>

namespace msadgn {

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  Vector uniform(Index n, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = d(rng_);
    return v;
  }

  // Entries at least `gap` away from zero, so ReLU kinks stay out of reach.
  Vector away_from_zero(Index n, double gap) {
    Vector v = uniform(n, gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (Index i = 0; i < n; ++i) {
      if (sign(rng_)) v[i] = -v[i];
    }
    return v;
  }

  Tensor param(Shape shape) {
    const Index n = numel(shape);
    return Tensor::from(std::move(shape), uniform(n, -1.0, 1.0), true);
  }

  Tensor constant(Shape shape) {
    const Index n = numel(shape);
    return Tensor::from(std::move(shape), uniform(n, -1.0, 1.0));
  }

 private:
  std::mt19937_64 rng_;
};

// Random linear read-out so every output entry reaches the scalar.
Tensor probe(const Tensor& t, const Tensor& r) { return sum(mul(t, r)); }

GradCheckResult check(const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> params,
                      double eps) {
  long n = 0;
  for (const auto& p : params) n += p.size();
  return {name, finite_diff_check(f, params, eps), n};
}

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(double eps, std::uint64_t seed) {
  Sampler s(seed);
  std::vector<GradCheckResult> out;

  {
    Tensor a = s.param({3, 4}), b = s.param({4, 2}), r = s.constant({3, 2});
    out.push_back(check("matmul", [&] { return probe(matmul(a, b), r); }, {a, b}, eps));
  }
  {
    Tensor x = s.param({3, 4}), bias = s.param({4}), r = s.constant({3, 4});
    out.push_back(check("add_row_bias", [&] { return probe(add_row_bias(x, bias), r); }, {x, bias}, eps));
  }
  {
    Tensor x = s.param({2, 2, 9}), w = s.param({3, 2, 3}), r = s.constant({2, 3, 5});
    out.push_back(check("conv1d", [&] { return probe(conv1d(x, w, 2, 1), r); }, {x, w}, eps));
  }
  {
    Tensor x = s.param({2, 3, 4}), bias = s.param({3}), r = s.constant({2, 3, 4});
    out.push_back(check("add_channel_bias", [&] { return probe(add_channel_bias(x, bias), r); }, {x, bias}, eps));
  }
  {
    Tensor x = Tensor::from({4, 5}, s.away_from_zero(20, 0.05), true);
    Tensor r = s.constant({4, 5});
    out.push_back(check("relu", [&] { return probe(relu(x), r); }, {x}, eps));
  }
  {
    Tensor x = s.param({3, 4}), r = s.constant({3, 4});
    out.push_back(check("softmax", [&] { return probe(softmax(x), r); }, {x}, eps));
    out.push_back(check("log_softmax", [&] { return probe(log_softmax(x), r); }, {x}, eps));
  }
  {
    Tensor logits = s.param({4, 3});
    const std::vector<int> targets{0, 2, 1, 2};
    out.push_back(check("cross_entropy", [&] { return cross_entropy(logits, targets); }, {logits}, eps));
    Matrix soft(4, 3);
    soft << 0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.6, 0.2, 0.2, 0.1, 0.1, 0.8;
    out.push_back(check("cross_entropy_soft", [&] { return cross_entropy(logits, soft); }, {logits}, eps));
  }
  {
    Tensor x = s.param({3, 4}), r = s.constant({3, 4});
    const double lambda = 0.6;
    std::vector<Tensor> params{x};
    out.push_back({"grad_reverse",
                   finite_diff_check([&] { return probe(grad_reverse(x, lambda), r); },
                                     [&] { return -lambda * probe(x, r).item(); }, params, eps),
                   x.size()});
  }
  {
    Tensor x = s.param({2, 3, 4}), r2 = s.constant({4, 6}), r3 = s.constant({2, 12});
    out.push_back(check("reshape", [&] { return probe(reshape(x, {4, 6}), r2); }, {x}, eps));
    out.push_back(check("flatten_rows", [&] { return probe(flatten_rows(x), r3); }, {x}, eps));
  }
  {
    Tensor a = s.param({2, 3}), b = s.param({3, 3}), r = s.constant({5, 3});
    out.push_back(check("concat_rows",
                        [&] {
                          const std::vector<Tensor> parts{a, b};
                          return probe(concat_rows(parts), r);
                        },
                        {a, b}, eps));
  }
  {
    Tensor x = s.param({4, 3}), r = s.constant({5, 3});
    const std::vector<Index> rows{3, 0, 3, 1, 2};
    out.push_back(check("gather_rows", [&] { return probe(gather_rows(x, rows), r); }, {x}, eps));
  }
  {
    Tensor a = s.param({3, 4}), b = s.param({3, 4}), r = s.constant({3, 4});
    out.push_back(check("add", [&] { return probe(add(a, b), r); }, {a, b}, eps));
    out.push_back(check("mul", [&] { return probe(mul(a, b), r); }, {a, b}, eps));
    out.push_back(check("scale", [&] { return probe(scale(a, -1.7), r); }, {a}, eps));
    out.push_back(check("sum", [&] { return sum(mul(a, b)); }, {a, b}, eps));
    out.push_back(check("mean", [&] { return mean(mul(a, b)); }, {a, b}, eps));
  }

  // Full loss of the method, K = 3, two samples per domain. A small network
  // with a wide initialization and nonzero biases keeps gradients above the
  // round-off floor and preactivations off ReLU kinks (zero biases behind a
  // fully dead layer sit exactly on one).
  {
    TrainConfig cfg;
    cfg.K = 3;
    cfg.network.signal_len = 32;
    cfg.network.channels = {3, 4, 4, 4};
    cfg.network.hidden = {6, 5};
    cfg.network.init_std = 0.5;
    cfg.seed = seed;
    const Model model = build_networks(cfg);
    for (auto& [name, t] : model.named_parameters()) {
      if (name.ends_with(".bias")) t.mutable_data() = s.uniform(t.size(), -0.3, 0.3);
    }

    StepInputs inputs;
    for (int k = 0; k < cfg.K; ++k) inputs.signals.push_back(Tensor::from({2, 1, 32}, s.uniform(64, 0.0, 1.0)));
    inputs.labels = {0, 2};
    inputs.pseudolabels.resize(3);
    inputs.pseudolabels[1].selected_indices = {0, 1};
    inputs.pseudolabels[1].labels = {1, 0};
    inputs.pseudolabels[2].selected_indices = {1};
    inputs.pseudolabels[2].labels = {2};
    const double lambda = 0.7;

    auto losses = [&] {
      const std::vector<Tensor> emb = shared_embeddings(model, inputs.signals);
      return compute_losses(model, cfg, inputs, emb, lambda);
    };
    auto total = [&] { return losses().total; };

    std::vector<Tensor> shared, rest;
    for (const auto& [name, t] : model.named_parameters()) {
      (name.rfind("shared.", 0) == 0 ? shared : rest).push_back(t);
    }
    long n_shared = 0, n_rest = 0;
    for (const auto& t : shared) n_shared += t.size();
    for (const auto& t : rest) n_rest += t.size();

    // F_shared sits behind the reversal layer, so its oracle flips the sign
    // of the adversarial term.
    out.push_back({"msadgn_loss.shared",
                   finite_diff_check(total,
                                     [&] {
                                       const StepLosses l = losses();
                                       return l.classification.item() + l.weight.item() -
                                              lambda * l.invariant.item();
                                     },
                                     shared, eps),
                   n_shared});
    out.push_back({"msadgn_loss.heads", finite_diff_check(total, rest, eps), n_rest});
  }
  return out;
}

}  // namespace msadgn
