#include "trida/objectives.hpp"

#include <cmath>

#include "trida/errors.hpp"

namespace trida {

void TriDAConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ValidationError("beta must be a finite value >= 0");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ValidationError("alpha must be a finite value > 0");
}

double sample_lambda(double alpha, std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw ValidationError("Beta parameter alpha must be positive");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double x = gamma(rng);
  const double y = gamma(rng);
  const double s = x + y;
  return s > 0.0 ? x / s : 0.5;
}

MixedBatch mix_batch(const Tensor& x_p, std::vector<int> y_p, const Tensor& x_t, std::vector<int> y_hat_t, double lam) {
  if (x_p.shape() != x_t.shape()) {
    throw ValidationError("mix_batch: pre-training batch " + shape_string(x_p.shape()) + " and target batch " +
                          shape_string(x_t.shape()) + " differ in shape");
  }
  if (!(lam >= 0.0 && lam <= 1.0)) throw ValidationError("mix_batch: lambda must lie in [0, 1]");
  if (static_cast<int>(y_p.size()) != x_p.rows() || static_cast<int>(y_hat_t.size()) != x_t.rows()) {
    throw ValidationError("mix_batch: label count does not match the batch size");
  }
  MixedBatch m{x_p, std::move(y_p), x_t, std::move(y_hat_t), lam, Tensor(x_p.shape())};
  for (std::size_t i = 0; i < m.x_mixed.size(); ++i) m.x_mixed[i] = lam * x_p[i] + (1.0 - lam) * x_t[i];
  return m;
}

Var loss_pretrain(const ModelBundle& bundle, const Var& pretrain_features, std::span<const int> y_p) {
  return ops::cross_entropy(bundle.pretrain_logits(pretrain_features), y_p);
}

Var loss_pretrain(ModelBundle& bundle, const Tensor& x_p, std::span<const int> y_p) {
  return loss_pretrain(bundle, bundle.forward_features(x_p), y_p);
}

Var loss_sem(const ModelBundle& bundle, const Var& mixed_features, const MixedBatch& mixed) {
  const double lam = mixed.lam;
  const Var term_p = ops::cross_entropy(bundle.pretrain_logits(mixed_features), mixed.y_p);
  const Var term_t = ops::cross_entropy(bundle.target_logits(mixed_features), mixed.y_hat_t);
  return ops::scale(term_p, lam) + ops::scale(term_t, 1.0 - lam);
}

Var loss_sem(ModelBundle& bundle, const MixedBatch& mixed) {
  return loss_sem(bundle, bundle.forward_features(mixed.x_mixed), mixed);
}

Var loss_feat(const Var& f_p, const Var& f_t, const Var& f_mixed, double lam) {
  const int n = f_mixed.value().rows();
  if (n == 0) throw ValidationError("loss_feat: empty batch");
  const Var residual = ops::lerp(f_p, f_t, lam) - f_mixed;
  return ops::scale(ops::sum(ops::abs(residual)), 1.0 / n);
}

Var loss_feat(ModelBundle& bundle, const MixedBatch& mixed) {
  const Var f_p = bundle.forward_features(mixed.x_p);
  const Var f_t = bundle.forward_features(mixed.x_t);
  const Var f_m = bundle.forward_features(mixed.x_mixed);
  return loss_feat(f_p, f_t, f_m, mixed.lam);
}

namespace {

// Adds L_p and beta (L_sem + L_feat) to `total`, reusing f_t when given.
void add_trida_terms(ModelBundle& bundle, const Var& f_t, const MixedBatch* mixed, const TriDAConfig& cfg,
                     ObjectiveValue& out) {
  cfg.validate();
  const bool need_p = cfg.use_pretrain;
  const bool need_sem = cfg.beta != 0.0 && cfg.use_sem;
  const bool need_feat = cfg.beta != 0.0 && cfg.use_feat;
  if (!(need_p || need_sem || need_feat)) return;
  if (!mixed) throw ValidationError("TriDA terms are enabled but no pre-training batch was supplied");

  Var f_p, f_m;
  if (need_p || need_feat) f_p = bundle.forward_features(mixed->x_p);
  if (need_sem || need_feat) f_m = bundle.forward_features(mixed->x_mixed);

  if (need_p) {
    const Var lp = loss_pretrain(bundle, f_p, mixed->y_p);
    out.parts.pretrain = lp.item();
    out.total = out.total + lp;
  }
  Var reg;
  if (need_sem) {
    reg = loss_sem(bundle, f_m, *mixed);
    out.parts.sem = reg.item();
  }
  if (need_feat) {
    if (!f_t.defined()) throw ValidationError("loss_feat needs target features");
    const Var lf = loss_feat(f_p, f_t, f_m, mixed->lam);
    out.parts.feat = lf.item();
    reg = reg.defined() ? reg + lf : lf;
  }
  if (reg.defined()) out.total = out.total + ops::scale(reg, cfg.beta);
}

void check_mixed_target(const MixedBatch* mixed, const Tensor& x_t) {
  if (mixed && mixed->x_t.shape() != x_t.shape()) {
    throw ValidationError("mixed batch was built from a different target batch");
  }
}

}  // namespace

ObjectiveValue objective_sfuda_step1(ModelBundle& bundle, const Tensor& x_s, std::span<const int> y_s,
                                     const MixedBatch* pretrain, const TriDAConfig& cfg, double smoothing) {
  ObjectiveValue out;
  out.total = loss_source(bundle, x_s, y_s, smoothing);
  out.parts.source = out.total.item();
  if (pretrain && cfg.use_pretrain && pretrain->x_p.rows() > 0) {
    const Var lp = loss_pretrain(bundle, pretrain->x_p, pretrain->y_p);
    out.parts.pretrain = lp.item();
    out.total = out.total + lp;
  }
  out.parts.total = out.total.item();
  return out;
}

ObjectiveValue objective_sfuda_step2(ModelBundle& bundle, const Tensor& x_t, std::span<const int> pseudo_t,
                                     const MixedBatch* mixed, AdaptationObjective& baseline, const TriDAConfig& cfg,
                                     double progress) {
  check_mixed_target(mixed, x_t);
  AdaptationBatch batch;
  batch.target_features = bundle.forward_features(x_t);
  batch.target_pseudo_labels.assign(pseudo_t.begin(), pseudo_t.end());
  batch.progress = progress;

  ObjectiveValue out;
  out.total = baseline.evaluate(bundle, batch);
  out.parts.baseline = out.total.item();
  add_trida_terms(bundle, batch.target_features, mixed, cfg, out);
  out.parts.total = out.total.item();
  return out;
}

ObjectiveValue objective_uda(ModelBundle& bundle, const Tensor& x_s, std::span<const int> y_s, const Tensor& x_t,
                             std::span<const int> pseudo_t, const MixedBatch* mixed, AdaptationObjective& uda_loss,
                             const TriDAConfig& cfg, double progress, double smoothing) {
  check_mixed_target(mixed, x_t);
  AdaptationBatch batch;
  batch.source_features = bundle.forward_features(x_s);
  batch.source_labels.assign(y_s.begin(), y_s.end());
  batch.target_features = bundle.forward_features(x_t);
  batch.target_pseudo_labels.assign(pseudo_t.begin(), pseudo_t.end());
  batch.progress = progress;

  ObjectiveValue out;
  const Var l_uda = uda_loss.evaluate(bundle, batch);
  out.parts.baseline = l_uda.item();
  const Var l_s = loss_source(bundle, batch.source_features, y_s, smoothing);
  out.parts.source = l_s.item();
  out.total = l_uda + l_s;
  add_trida_terms(bundle, batch.target_features, mixed, cfg, out);
  out.parts.total = out.total.item();
  return out;
}

}  // namespace trida
