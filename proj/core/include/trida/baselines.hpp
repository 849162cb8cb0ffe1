#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "trida/autograd.hpp"
#include "trida/data.hpp"
#include "trida/model.hpp"

namespace trida {

/// Mean cross-entropy of h(features) against source labels, with label
/// smoothing eps.
Var loss_source(const ModelBundle& bundle, const Var& features, std::span<const int> labels, double smoothing = 0.1);
Var loss_source(ModelBundle& bundle, const Tensor& images, std::span<const int> labels, double smoothing = 0.1);

// ---------------------------------------------------------------------------
// Centroid pseudo-labelling

enum class CentroidMetric { cosine, euclidean };

struct PseudoLabelState {
  Tensor centroids;              // K x D
  std::vector<int> labels;       // one per target sample
  std::vector<double> affinity;  // similarity to the assigned centroid (negated distance for euclidean)
  int refresh_epoch = -1;
};

/// Clusters features against soft predictions: centroids start as
/// probability-weighted feature means, samples go to the nearest centroid,
/// then one round recomputes centroids from the hard labels and reassigns.
/// A class without mass keeps its centroid from the previous round (or
/// from `previous` in the first round). Ties go to the lowest class index.
PseudoLabelState cluster_pseudo_labels(const Tensor& features, const Tensor& probabilities,
                                       const PseudoLabelState* previous = nullptr,
                                       CentroidMetric metric = CentroidMetric::cosine);

/// Eval-mode features and predictions of the whole target set, clustered.
/// Never mutates the bundle.
PseudoLabelState cluster_pseudo_labels(const ModelBundle& bundle, const LabeledDataset& target, int epoch,
                                       const PseudoLabelState* previous = nullptr,
                                       CentroidMetric metric = CentroidMetric::cosine, int batch_size = 256);

/// "index,pseudo_label,affinity" rows.
void write_pseudo_labels_csv(const PseudoLabelState& state, std::ostream& out);

// ---------------------------------------------------------------------------
// SHOT-style source-free objective

/// Mean per-sample prediction entropy minus the entropy of the mean
/// prediction. Bounded below by -ln K.
Var information_maximization(const Var& logits);

/// information_maximization + w_pl * CE(logits, pseudo_labels).
Var loss_sfuda_shot_like(const Var& logits, std::span<const int> pseudo_labels, double w_pl = 0.3);
Var loss_sfuda_shot_like(const ModelBundle& bundle, const Var& target_features, std::span<const int> pseudo_labels,
                         double w_pl = 0.3);

// ---------------------------------------------------------------------------
// Domain-adversarial objective

/// Two-layer MLP domain classifier on features (logit > 0: source).
class DomainDiscriminator {
 public:
  DomainDiscriminator() = default;
  DomainDiscriminator(int feature_dim, int hidden, std::uint64_t seed);

  Var forward(const Var& features) const;
  std::vector<Var> parameters() const { return {w1_, b1_, w2_, b2_}; }

 private:
  Var w1_, b1_, w2_, b2_;
};

/// Domain BCE over the union of both batches (source = 1, target = 0),
/// with features passed through a gradient-reversal layer of strength
/// `coeff` so f learns to confuse the discriminator.
Var loss_uda_adversarial(const DomainDiscriminator& disc, const Var& source_features, const Var& target_features,
                         double coeff = 1.0);

/// 2 / (1 + exp(-10 p)) - 1, the usual ramp for the reversal strength.
double adversarial_coefficient(double progress);

// ---------------------------------------------------------------------------
// Pluggable baseline interface

enum class ObjectiveKind { source_only, sfuda_shot_like, uda_adversarial };

std::string to_string(ObjectiveKind kind);
ObjectiveKind parse_objective_kind(const std::string& text);

/// Inputs a baseline may read; unused members stay empty.
struct AdaptationBatch {
  Var source_features;
  std::vector<int> source_labels;
  Var target_features;
  std::vector<int> target_pseudo_labels;
  double progress = 0.0;  // training progress in [0, 1]
};

class AdaptationObjective {
 public:
  virtual ~AdaptationObjective() = default;
  virtual ObjectiveKind kind() const = 0;
  virtual Var evaluate(const ModelBundle& bundle, const AdaptationBatch& batch) = 0;
  /// Trainable state owned by the objective (e.g. a discriminator).
  virtual std::vector<Var> auxiliary_parameters() const { return {}; }
  const std::map<std::string, double>& hyperparameters() const { return hyper_; }

 protected:
  double hyper(const std::string& key) const { return hyper_.at(key); }
  std::map<std::string, double> hyper_;
};

/// Hyperparameters (defaults): smoothing (0.1) for source_only; w_pl (0.3)
/// for sfuda_shot_like; disc_hidden (64) and max_coeff (1.0) for
/// uda_adversarial. Unknown keys are validation errors.
std::unique_ptr<AdaptationObjective> make_objective(ObjectiveKind kind, int feature_dim, std::uint64_t seed,
                                                    const std::map<std::string, double>& overrides = {});

}  // namespace trida
