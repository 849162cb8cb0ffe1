#pragma once

#include <random>
#include <span>
#include <vector>

#include "trida/autograd.hpp"
#include "trida/baselines.hpp"
#include "trida/model.hpp"

namespace trida {

struct TriDAConfig {
  double beta = 0.1;   // weight of L_sem + L_feat
  double alpha = 2.0;  // lambda ~ Beta(alpha, alpha)
  bool use_pretrain = true;
  bool use_sem = true;
  bool use_feat = true;

  void validate() const;
  /// True when any term would add to the baseline loss.
  bool active() const { return use_pretrain || (beta != 0.0 && (use_sem || use_feat)); }
  /// Configuration with every TriDA term switched off.
  static TriDAConfig disabled() { return {0.0, 2.0, false, false, false}; }
};

/// One draw from Beta(alpha, alpha) via the gamma ratio.
double sample_lambda(double alpha, std::mt19937_64& rng);

/// A pre-training batch, a target batch and their pixel-space blend
/// x_mixed = lam * x_p + (1 - lam) * x_t, all with one scalar lam.
struct MixedBatch {
  Tensor x_p;
  std::vector<int> y_p;
  Tensor x_t;
  std::vector<int> y_hat_t;
  double lam = 0.0;
  Tensor x_mixed;
};

MixedBatch mix_batch(const Tensor& x_p, std::vector<int> y_p, const Tensor& x_t, std::vector<int> y_hat_t, double lam);

/// Mean CE of h_p(features) against pre-training labels.
Var loss_pretrain(const ModelBundle& bundle, const Var& pretrain_features, std::span<const int> y_p);
Var loss_pretrain(ModelBundle& bundle, const Tensor& x_p, std::span<const int> y_p);

/// lam * CE(h_p(f(x_mixed)), y_p) + (1 - lam) * CE(h(f(x_mixed)), y_hat_t).
Var loss_sem(const ModelBundle& bundle, const Var& mixed_features, const MixedBatch& mixed);
Var loss_sem(ModelBundle& bundle, const MixedBatch& mixed);

/// Batch mean of || lam f(x_p) + (1 - lam) f(x_t) - f(x_mixed) ||_1.
/// Gradients reach all three feature tensors.
Var loss_feat(const Var& f_p, const Var& f_t, const Var& f_mixed, double lam);
Var loss_feat(ModelBundle& bundle, const MixedBatch& mixed);

struct LossBreakdown {
  double baseline = 0.0;  // L_UDA or L_SFUDA
  double source = 0.0;    // L_s
  double pretrain = 0.0;  // L_p
  double sem = 0.0;
  double feat = 0.0;
  double total = 0.0;
};

struct ObjectiveValue {
  Var total;
  LossBreakdown parts;
};

/// L_s + L_p. Without a pre-training batch, or with use_pretrain off, the
/// result is L_s itself.
ObjectiveValue objective_sfuda_step1(ModelBundle& bundle, const Tensor& x_s, std::span<const int> y_s,
                                     const MixedBatch* pretrain, const TriDAConfig& cfg, double smoothing = 0.1);

/// L_SFUDA + L_p + beta (L_sem + L_feat). `mixed` must be built from the
/// same target batch x_t; it may be null when every TriDA term is off.
ObjectiveValue objective_sfuda_step2(ModelBundle& bundle, const Tensor& x_t, std::span<const int> pseudo_t,
                                     const MixedBatch* mixed, AdaptationObjective& baseline, const TriDAConfig& cfg,
                                     double progress = 0.0);

/// L_UDA + L_s + L_p + beta (L_sem + L_feat).
ObjectiveValue objective_uda(ModelBundle& bundle, const Tensor& x_s, std::span<const int> y_s, const Tensor& x_t,
                             std::span<const int> pseudo_t, const MixedBatch* mixed, AdaptationObjective& uda_loss,
                             const TriDAConfig& cfg, double progress = 0.0, double smoothing = 0.1);

}  // namespace trida
