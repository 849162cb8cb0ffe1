#include "trida/baselines.hpp"

#include <cmath>
#include <limits>
#include <ostream>
#include <random>

#include <spdlog/spdlog.h>

#include "trida/errors.hpp"
#include "trida/kvfile.hpp"

namespace trida {

Var loss_source(const ModelBundle& bundle, const Var& features, std::span<const int> labels, double smoothing) {
  if (smoothing < 0.0 || smoothing >= 1.0) throw ValidationError("label smoothing must lie in [0, 1)");
  return ops::cross_entropy(bundle.target_logits(features), labels, smoothing);
}

Var loss_source(ModelBundle& bundle, const Tensor& images, std::span<const int> labels, double smoothing) {
  return loss_source(bundle, bundle.forward_features(images), labels, smoothing);
}

namespace {

struct Centroids {
  RowMatrix values;
  std::vector<bool> valid;
};

void assign(const ConstMatrixMap& f, const Centroids& c, CentroidMetric metric, std::vector<int>& labels,
            std::vector<double>& affinity) {
  const Eigen::Index n = f.rows();
  const Eigen::Index k = c.values.rows();
  labels.assign(static_cast<std::size_t>(n), 0);
  affinity.assign(static_cast<std::size_t>(n), -std::numeric_limits<double>::infinity());
  Eigen::VectorXd cnorm(k);
  for (Eigen::Index j = 0; j < k; ++j) cnorm(j) = c.values.row(j).norm();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double fnorm = f.row(i).norm();
    double best = -std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (!c.valid[static_cast<std::size_t>(j)]) continue;
      double score;
      if (metric == CentroidMetric::cosine) {
        const double denom = fnorm * cnorm(j);
        score = denom > 0.0 ? f.row(i).dot(c.values.row(j)) / denom : 0.0;
      } else {
        score = -(f.row(i) - c.values.row(j)).squaredNorm();
      }
      if (score > best) {
        best = score;
        best_k = static_cast<int>(j);
      }
    }
    labels[static_cast<std::size_t>(i)] = best_k;
    affinity[static_cast<std::size_t>(i)] = best;
  }
}

Centroids weighted_means(const ConstMatrixMap& f, const RowMatrix& weights, const Centroids* fallback,
                         const char* round) {
  const Eigen::Index k = weights.cols();
  Centroids c{RowMatrix::Zero(k, f.cols()), std::vector<bool>(static_cast<std::size_t>(k), true)};
  const RowMatrix sums = weights.transpose() * f;
  const Eigen::VectorXd mass = weights.colwise().sum().transpose();
  for (Eigen::Index j = 0; j < k; ++j) {
    if (mass(j) > 0.0) {
      c.values.row(j) = sums.row(j) / mass(j);
    } else if (fallback && fallback->valid[static_cast<std::size_t>(j)]) {
      spdlog::warn("pseudo-labels: class {} has no mass in the {} round; keeping its previous centroid", j, round);
      c.values.row(j) = fallback->values.row(j);
    } else {
      spdlog::warn("pseudo-labels: class {} has no mass in the {} round and no previous centroid", j, round);
      c.valid[static_cast<std::size_t>(j)] = false;
    }
  }
  return c;
}

}  // namespace

PseudoLabelState cluster_pseudo_labels(const Tensor& features, const Tensor& probabilities,
                                       const PseudoLabelState* previous, CentroidMetric metric) {
  if (features.rank() != 2 || probabilities.rank() != 2 || features.rows() != probabilities.rows()) {
    throw ValidationError("cluster_pseudo_labels: expected N x D features and N x K probabilities, got " +
                          shape_string(features.shape()) + " and " + shape_string(probabilities.shape()));
  }
  if (features.rows() == 0) throw ValidationError("cluster_pseudo_labels: empty target set");
  const ConstMatrixMap f = features.matrix();
  const RowMatrix p = probabilities.matrix();
  const Eigen::Index k = p.cols();

  Centroids prior;
  const Centroids* fallback = nullptr;
  if (previous && previous->centroids.rank() == 2 && previous->centroids.rows() == k &&
      previous->centroids.cols() == f.cols()) {
    prior = {previous->centroids.matrix(), std::vector<bool>(static_cast<std::size_t>(k), true)};
    fallback = &prior;
  }

  const Centroids soft = weighted_means(f, p, fallback, "soft");
  PseudoLabelState state;
  assign(f, soft, metric, state.labels, state.affinity);

  RowMatrix onehot = RowMatrix::Zero(p.rows(), k);
  for (Eigen::Index i = 0; i < p.rows(); ++i) onehot(i, state.labels[static_cast<std::size_t>(i)]) = 1.0;
  const Centroids hard = weighted_means(f, onehot, &soft, "refinement");
  assign(f, hard, metric, state.labels, state.affinity);

  state.centroids = Tensor({static_cast<int>(k), static_cast<int>(f.cols())});
  state.centroids.matrix() = hard.values;
  return state;
}

PseudoLabelState cluster_pseudo_labels(const ModelBundle& bundle, const LabeledDataset& target, int epoch,
                                       const PseudoLabelState* previous, CentroidMetric metric, int batch_size) {
  if (target.empty()) throw ValidationError("cluster_pseudo_labels: empty target set");
  if (batch_size <= 0) throw ValidationError("batch_size must be positive");
  NoGradGuard guard;
  const int n = static_cast<int>(target.size());
  Tensor features({n, bundle.config().feature_dim()});
  Tensor probs({n, bundle.config().target_classes});
  std::vector<int> idx;
  for (int begin = 0; begin < n; begin += batch_size) {
    const int end = std::min(n, begin + batch_size);
    idx.resize(static_cast<std::size_t>(end - begin));
    for (int i = begin; i < end; ++i) idx[static_cast<std::size_t>(i - begin)] = i;
    const Var f = bundle.eval_features(Var::constant(target.images(idx)));
    const Var p = ops::softmax(bundle.target_logits(f));
    features.matrix().middleRows(begin, end - begin) = f.value().matrix();
    probs.matrix().middleRows(begin, end - begin) = p.value().matrix();
  }
  PseudoLabelState state = cluster_pseudo_labels(features, probs, previous, metric);
  state.refresh_epoch = epoch;
  return state;
}

void write_pseudo_labels_csv(const PseudoLabelState& state, std::ostream& out) {
  out << "index,pseudo_label,affinity\n";
  for (std::size_t i = 0; i < state.labels.size(); ++i) {
    out << i << ',' << state.labels[i] << ',' << format_double(state.affinity[i]) << '\n';
  }
}

Var information_maximization(const Var& logits) {
  const int n = logits.value().rows();
  const Var p = ops::softmax(logits);
  const Var logp = ops::log_softmax(logits);
  // mean_i sum_k p log p = -mean entropy
  const Var neg_entropy = ops::scale(ops::sum(p * logp), 1.0 / n);
  const Var p_mean = ops::mean_rows(p);
  const Var neg_diversity = ops::sum(p_mean * ops::log(p_mean, 1e-12));
  // mean entropy - entropy of mean = -neg_entropy + neg_diversity
  return ops::sub(neg_diversity, neg_entropy);
}

Var loss_sfuda_shot_like(const Var& logits, std::span<const int> pseudo_labels, double w_pl) {
  if (w_pl < 0.0) throw ValidationError("w_pl must be non-negative");
  Var im = information_maximization(logits);
  if (w_pl == 0.0) return im;
  return im + ops::scale(ops::cross_entropy(logits, pseudo_labels), w_pl);
}

Var loss_sfuda_shot_like(const ModelBundle& bundle, const Var& target_features, std::span<const int> pseudo_labels,
                         double w_pl) {
  return loss_sfuda_shot_like(bundle.target_logits(target_features), pseudo_labels, w_pl);
}

DomainDiscriminator::DomainDiscriminator(int feature_dim, int hidden, std::uint64_t seed) {
  if (feature_dim <= 0 || hidden <= 0) throw ValidationError("discriminator dimensions must be positive");
  std::mt19937_64 rng(seed ^ 0xd15c0ffeeULL);
  auto init = [&](int out, int in) {
    Tensor w({out, in});
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in + out)));
    for (double& v : w.values()) v = dist(rng);
    return Var::parameter(std::move(w));
  };
  w1_ = init(hidden, feature_dim);
  b1_ = Var::parameter(Tensor({hidden}, 0.0));
  w2_ = init(1, hidden);
  b2_ = Var::parameter(Tensor({1}, 0.0));
}

Var DomainDiscriminator::forward(const Var& features) const {
  if (!w1_.defined()) throw RunError("discriminator is not initialised");
  return ops::linear(ops::relu(ops::linear(features, w1_, b1_)), w2_, b2_);
}

Var loss_uda_adversarial(const DomainDiscriminator& disc, const Var& source_features, const Var& target_features,
                         double coeff) {
  const int ns = source_features.value().rows();
  const int nt = target_features.value().rows();
  if (ns == 0 || nt == 0) throw ValidationError("adversarial loss needs non-empty source and target batches");
  const Var ds = disc.forward(ops::grad_reverse(source_features, coeff));
  const Var dt = disc.forward(ops::grad_reverse(target_features, coeff));
  const std::vector<double> ones(static_cast<std::size_t>(ns), 1.0);
  const std::vector<double> zeros(static_cast<std::size_t>(nt), 0.0);
  // mean over the concatenated batch
  const double total = ns + nt;
  return ops::scale(ops::bce_with_logits(ds, ones), ns / total) +
         ops::scale(ops::bce_with_logits(dt, zeros), nt / total);
}

double adversarial_coefficient(double progress) { return 2.0 / (1.0 + std::exp(-10.0 * progress)) - 1.0; }

std::string to_string(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::source_only: return "source_only";
    case ObjectiveKind::sfuda_shot_like: return "sfuda_shot_like";
    case ObjectiveKind::uda_adversarial: return "uda_adversarial";
  }
  return "?";
}

ObjectiveKind parse_objective_kind(const std::string& text) {
  if (text == "source_only") return ObjectiveKind::source_only;
  if (text == "sfuda_shot_like" || text == "shot") return ObjectiveKind::sfuda_shot_like;
  if (text == "uda_adversarial" || text == "dann") return ObjectiveKind::uda_adversarial;
  throw ValidationError("unknown objective kind '" + text + "'");
}

namespace {

class SourceOnly final : public AdaptationObjective {
 public:
  explicit SourceOnly(std::map<std::string, double> hyper) { hyper_ = std::move(hyper); }
  ObjectiveKind kind() const override { return ObjectiveKind::source_only; }
  Var evaluate(const ModelBundle& bundle, const AdaptationBatch& batch) override {
    return loss_source(bundle, batch.source_features, batch.source_labels, hyper("smoothing"));
  }
};

class ShotLike final : public AdaptationObjective {
 public:
  explicit ShotLike(std::map<std::string, double> hyper) { hyper_ = std::move(hyper); }
  ObjectiveKind kind() const override { return ObjectiveKind::sfuda_shot_like; }
  Var evaluate(const ModelBundle& bundle, const AdaptationBatch& batch) override {
    return loss_sfuda_shot_like(bundle, batch.target_features, batch.target_pseudo_labels, hyper("w_pl"));
  }
};

class Adversarial final : public AdaptationObjective {
 public:
  Adversarial(std::map<std::string, double> hyper, int feature_dim, std::uint64_t seed) {
    hyper_ = std::move(hyper);
    disc_ = DomainDiscriminator(feature_dim, static_cast<int>(hyper_.at("disc_hidden")), seed);
  }
  ObjectiveKind kind() const override { return ObjectiveKind::uda_adversarial; }
  Var evaluate(const ModelBundle&, const AdaptationBatch& batch) override {
    const double coeff = hyper("max_coeff") * adversarial_coefficient(batch.progress);
    return loss_uda_adversarial(disc_, batch.source_features, batch.target_features, coeff);
  }
  std::vector<Var> auxiliary_parameters() const override { return disc_.parameters(); }

 private:
  DomainDiscriminator disc_;
};

}  // namespace

std::unique_ptr<AdaptationObjective> make_objective(ObjectiveKind kind, int feature_dim, std::uint64_t seed,
                                                    const std::map<std::string, double>& overrides) {
  std::map<std::string, double> hyper;
  switch (kind) {
    case ObjectiveKind::source_only: hyper = {{"smoothing", 0.1}}; break;
    case ObjectiveKind::sfuda_shot_like: hyper = {{"w_pl", 0.3}}; break;
    case ObjectiveKind::uda_adversarial: hyper = {{"disc_hidden", 64}, {"max_coeff", 1.0}}; break;
  }
  for (const auto& [key, value] : overrides) {
    auto it = hyper.find(key);
    if (it == hyper.end()) throw ValidationError("objective " + to_string(kind) + " has no hyperparameter '" + key + "'");
    if (!std::isfinite(value)) throw ValidationError("hyperparameter '" + key + "' must be finite");
    it->second = value;
  }
  switch (kind) {
    case ObjectiveKind::source_only: return std::make_unique<SourceOnly>(hyper);
    case ObjectiveKind::sfuda_shot_like: return std::make_unique<ShotLike>(hyper);
    case ObjectiveKind::uda_adversarial: return std::make_unique<Adversarial>(hyper, feature_dim, seed);
  }
  throw ValidationError("unknown objective kind");
}

}  // namespace trida
