#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "support/test_support.hpp"
#include "trida/baselines.hpp"
#include "trida/objectives.hpp"

namespace trida::testing {

struct GradCase {
  std::string name;
  GradCheckResult result;
};

/// Finite-difference checks of every training loss on the small conv
/// bundle, over all of its parameters (plus the discriminator for the
/// adversarial loss). Batches are fixed by `seed`.
inline std::vector<GradCase> loss_gradient_checks(int directions, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int n = 6;
  const Tensor x_p = random_tensor({n, 1, 4, 4}, rng, 0.0, 1.0);
  const Tensor x_t = random_tensor({n, 1, 4, 4}, rng, 0.0, 1.0);
  const Tensor x_s = random_tensor({n, 1, 4, 4}, rng, 0.0, 1.0);
  const auto y_p = random_labels(n, 4, rng);
  const auto y_t = random_labels(n, 3, rng);
  const auto y_s = random_labels(n, 3, rng);
  const MixedBatch mixed = mix_batch(x_p, y_p, x_t, y_t, 0.37);

  ModelBundle bundle = probe_bundle(seed + 1);
  const std::vector<Var> params = parameters_of(bundle);
  std::vector<GradCase> out;

  out.push_back({"L_p", check_gradients([&] { return loss_pretrain(bundle, x_p, y_p); }, params, directions, seed)});
  out.push_back({"L_sem", check_gradients([&] { return loss_sem(bundle, mixed); }, params, directions, seed + 1)});
  out.push_back({"L_feat", check_gradients([&] { return loss_feat(bundle, mixed); }, params, directions, seed + 2)});
  out.push_back({"L_s", check_gradients([&] { return loss_source(bundle, x_s, y_s, 0.1); }, params, directions, seed + 3)});
  out.push_back({"L_SFUDA (info-max + pseudo-label CE)",
                 check_gradients([&] { return loss_sfuda_shot_like(bundle, bundle.forward_features(x_t), y_t, 0.3); },
                                 params, directions, seed + 4)});

  // Gradient reversal makes the update direction for f deliberately not
  // the gradient of the loss. With coefficient -1 the reversal is the
  // identity, so the composite is checked against finite differences
  // there; the reversed gradient at coefficient c must then equal -c times
  // it on f and be unchanged on the discriminator.
  const DomainDiscriminator disc(bundle.config().feature_dim(), 16, seed);
  std::vector<Var> adv_params = params;
  for (const Var& p : disc.parameters()) adv_params.push_back(p);
  auto adversarial = [&](double coeff) {
    return loss_uda_adversarial(disc, bundle.forward_features(x_s), bundle.forward_features(x_t), coeff);
  };
  GradCase adv{"L_UDA (adversarial)", check_gradients([&] { return adversarial(-1.0); }, adv_params, directions, seed + 5)};
  auto gradients_at = [&](double coeff) {
    for (auto& p : adv_params) p.zero_grad();
    adversarial(coeff).backward();
    std::vector<Tensor> g;
    for (auto& p : adv_params) g.push_back(p.has_grad() ? p.grad() : Tensor(p.shape(), 0.0));
    for (auto& p : adv_params) p.zero_grad();
    return g;
  };
  const double c = 0.8;
  const auto plain = gradients_at(-1.0);
  const auto reversed = gradients_at(c);
  for (std::size_t i = 0; i < adv_params.size(); ++i) {
    const double factor = i < params.size() ? -c : 1.0;
    for (std::size_t k = 0; k < plain[i].size(); ++k) {
      const double expected = factor * plain[i][k];
      const double scale = std::max({std::abs(expected), std::abs(reversed[i][k]), 1e-7});
      adv.result.worst_relative_error =
          std::max(adv.result.worst_relative_error, std::abs(expected - reversed[i][k]) / scale);
    }
  }
  out.push_back(adv);
  return out;
}

}  // namespace trida::testing
