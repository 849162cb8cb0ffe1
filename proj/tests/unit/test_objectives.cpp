#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "support/test_support.hpp"
#include "trida/errors.hpp"
#include "trida/objectives.hpp"

using namespace trida;
using trida::testing::probe_bundle;
using trida::testing::random_labels;
using trida::testing::random_tensor;

namespace {

struct Batches {
  Tensor x_p, x_t;
  std::vector<int> y_p, y_t;
};

Batches make_batches(std::uint64_t seed, int n = 6) {
  std::mt19937_64 rng(seed);
  Batches b;
  b.x_p = random_tensor({n, 1, 4, 4}, rng, 0.0, 1.0);
  b.x_t = random_tensor({n, 1, 4, 4}, rng, 0.0, 1.0);
  b.y_p = random_labels(static_cast<std::size_t>(n), 4, rng);
  b.y_t = random_labels(static_cast<std::size_t>(n), 3, rng);
  return b;
}

TriDAConfig all_off_but_supplied() {
  TriDAConfig cfg;
  cfg.use_pretrain = false;
  cfg.use_sem = false;
  cfg.use_feat = false;
  return cfg;
}

}  // namespace

TEST_CASE("lambda follows Beta(2,2) (Kolmogorov-Smirnov)") {
  std::mt19937_64 rng(2024);
  const int n = 5000;
  std::vector<double> draws(n);
  for (double& v : draws) v = sample_lambda(2.0, rng);
  std::sort(draws.begin(), draws.end());
  double d = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = draws[static_cast<std::size_t>(i)];
    const double cdf = 3 * x * x - 2 * x * x * x;
    d = std::max({d, std::abs(cdf - static_cast<double>(i) / n), std::abs(cdf - static_cast<double>(i + 1) / n)});
  }
  // Critical value at the 1% level is 1.63 / sqrt(n).
  CHECK(d < 1.63 / std::sqrt(static_cast<double>(n)));
  CHECK(draws.front() >= 0.0);
  CHECK(draws.back() <= 1.0);
  CHECK_THROWS_AS(sample_lambda(0.0, rng), ValidationError);
}

TEST_CASE("mix_batch blends pixels and validates inputs") {
  const auto b = make_batches(1);
  const auto m = mix_batch(b.x_p, b.y_p, b.x_t, b.y_t, 0.3);
  for (std::size_t i = 0; i < m.x_mixed.size(); ++i) CHECK(m.x_mixed[i] == doctest::Approx(0.3 * b.x_p[i] + 0.7 * b.x_t[i]));
  CHECK(mix_batch(b.x_p, b.y_p, b.x_t, b.y_t, 1.0).x_mixed == b.x_p);
  CHECK(mix_batch(b.x_p, b.y_p, b.x_t, b.y_t, 0.0).x_mixed == b.x_t);
  CHECK_THROWS_AS(mix_batch(b.x_p, b.y_p, b.x_t, b.y_t, 1.5), ValidationError);
  CHECK_THROWS_AS(mix_batch(b.x_p, b.y_p, slice_rows(b.x_t, 0, 2), b.y_t, 0.5), ValidationError);
  CHECK_THROWS_AS(mix_batch(b.x_p, {0}, b.x_t, b.y_t, 0.5), ValidationError);
}

TEST_CASE("loss_feat against a direct computation") {
  std::mt19937_64 rng(3);
  const Tensor fp = random_tensor({4, 5}, rng), ft = random_tensor({4, 5}, rng), fm = random_tensor({4, 5}, rng);
  const double lam = 0.35;
  double expected = 0.0;
  for (std::size_t k = 0; k < fp.size(); ++k) expected += std::abs(lam * fp[k] + (1 - lam) * ft[k] - fm[k]);
  expected /= 4.0;
  Var vp = Var::parameter(fp), vt = Var::parameter(ft), vm = Var::parameter(fm);
  const Var loss = loss_feat(vp, vt, vm, lam);
  CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-13));
  loss.backward();
  // Gradient reaches all three feature passes.
  for (const Var* v : {&vp, &vt, &vm}) {
    double norm = 0.0;
    for (double g : v->grad().values()) norm += std::abs(g);
    CHECK(norm > 0.0);
  }
  CHECK(vp.grad()[0] == doctest::Approx(lam / 4.0 * (lam * fp[0] + (1 - lam) * ft[0] - fm[0] > 0 ? 1 : -1)));
}

TEST_CASE("endpoint identities at lambda = 1 and lambda = 0") {
  ModelBundle bundle = probe_bundle(5);
  const auto b = make_batches(5);

  const auto at_one = mix_batch(b.x_p, b.y_p, b.x_t, b.y_t, 1.0);
  CHECK(loss_feat(bundle, at_one).item() == 0.0);
  const double lp = loss_pretrain(bundle, b.x_p, b.y_p).item();
  CHECK(loss_sem(bundle, at_one).item() == doctest::Approx(lp).epsilon(1e-12));

  const auto at_zero = mix_batch(b.x_p, b.y_p, b.x_t, b.y_t, 0.0);
  CHECK(loss_feat(bundle, at_zero).item() == 0.0);
  const double ce_t = ops::cross_entropy(bundle.target_logits(bundle.forward_features(b.x_t)), b.y_t).item();
  CHECK(loss_sem(bundle, at_zero).item() == doctest::Approx(ce_t).epsilon(1e-12));
}

TEST_CASE("objective decomposes into its parts and the parts are non-negative") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ModelBundle bundle = probe_bundle(seed);
    const auto b = make_batches(100 + seed);
    std::mt19937_64 rng(seed);
    const auto mixed = mix_batch(b.x_p, b.y_p, b.x_t, b.y_t, sample_lambda(2.0, rng));
    auto shot = make_objective(ObjectiveKind::sfuda_shot_like, bundle.config().feature_dim(), seed);
    TriDAConfig cfg;
    cfg.beta = 0.1 + 0.1 * static_cast<double>(seed);
    const auto step2 = objective_sfuda_step2(bundle, b.x_t, b.y_t, &mixed, *shot, cfg);
    const auto& p = step2.parts;
    CHECK(std::abs(p.total - (p.baseline + p.pretrain + cfg.beta * (p.sem + p.feat))) <= 1e-7);
    CHECK(step2.total.item() == p.total);
    CHECK(p.pretrain >= 0.0);
    CHECK(p.sem >= 0.0);
    CHECK(p.feat >= 0.0);

    std::mt19937_64 src(seed + 1);
    const Tensor x_s = random_tensor({6, 1, 4, 4}, src, 0.0, 1.0);
    const auto y_s = random_labels(6, 3, src);
    auto dann = make_objective(ObjectiveKind::uda_adversarial, bundle.config().feature_dim(), seed);
    const auto uda = objective_uda(bundle, x_s, y_s, b.x_t, b.y_t, &mixed, *dann, cfg, 0.5);
    const auto& u = uda.parts;
    CHECK(std::abs(u.total - (u.baseline + u.source + u.pretrain + cfg.beta * (u.sem + u.feat))) <= 1e-7);
    CHECK(u.baseline >= 0.0);
    CHECK(u.source >= 0.0);

    const auto step1 = objective_sfuda_step1(bundle, x_s, y_s, &mixed, cfg);
    CHECK(std::abs(step1.parts.total - (step1.parts.source + step1.parts.pretrain)) <= 1e-7);
    CHECK(step1.parts.sem == 0.0);
    CHECK(step1.parts.feat == 0.0);
  }
}

TEST_CASE("flags off reproduces the baseline bit for bit") {
  const auto b = make_batches(9);
  const auto mixed = mix_batch(b.x_p, b.y_p, b.x_t, b.y_t, 0.4);

  auto run = [&](const TriDAConfig& cfg, const MixedBatch* m) {
    ModelBundle bundle = probe_bundle(9);
    auto shot = make_objective(ObjectiveKind::sfuda_shot_like, bundle.config().feature_dim(), 1);
    const auto value = objective_sfuda_step2(bundle, b.x_t, b.y_t, m, *shot, cfg);
    value.total.backward();
    std::vector<Tensor> grads;
    for (const auto& [name, p] : bundle.named_parameters()) grads.push_back(p.has_grad() ? p.grad() : Tensor(p.shape(), 0.0));
    return std::make_tuple(value.parts.total, grads, bundle.state_hash());
  };

  const auto baseline = run(TriDAConfig::disabled(), nullptr);
  const auto off_with_batch = run(all_off_but_supplied(), &mixed);
  TriDAConfig beta_zero;
  beta_zero.beta = 0.0;
  beta_zero.use_pretrain = false;
  const auto zero_beta = run(beta_zero, &mixed);
  CHECK(std::get<0>(baseline) == std::get<0>(off_with_batch));
  CHECK(std::get<1>(baseline) == std::get<1>(off_with_batch));
  CHECK(std::get<2>(baseline) == std::get<2>(off_with_batch));
  CHECK(std::get<0>(baseline) == std::get<0>(zero_beta));
  CHECK(std::get<1>(baseline) == std::get<1>(zero_beta));
  CHECK(std::get<2>(baseline) == std::get<2>(zero_beta));
  CHECK_FALSE(TriDAConfig::disabled().active());
  CHECK_FALSE(beta_zero.active());

  // Turning a term on changes the result.
  const auto on = run(TriDAConfig{}, &mixed);
  CHECK(std::get<0>(on) != std::get<0>(baseline));
}

TEST_CASE("enabled terms without a pre-training batch are rejected") {
  ModelBundle bundle = probe_bundle(1);
  const auto b = make_batches(1);
  auto shot = make_objective(ObjectiveKind::sfuda_shot_like, bundle.config().feature_dim(), 1);
  CHECK_THROWS_AS(objective_sfuda_step2(bundle, b.x_t, b.y_t, nullptr, *shot, TriDAConfig{}), ValidationError);
  TriDAConfig bad;
  bad.beta = -1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = TriDAConfig{};
  bad.alpha = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}
