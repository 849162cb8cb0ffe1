#include "trida/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "trida/errors.hpp"
#include "trida/kvfile.hpp"

namespace trida {

SynthesisInit parse_synthesis_init(const std::string& text) {
  if (text == "uniform_noise" || text == "uniform") return SynthesisInit::uniform_noise;
  if (text == "gaussian_noise" || text == "gaussian") return SynthesisInit::gaussian_noise;
  throw ValidationError("unknown synthesis init '" + text + "'");
}

std::string to_string(SynthesisInit init) {
  return init == SynthesisInit::uniform_noise ? "uniform_noise" : "gaussian_noise";
}

void SynthesisConfig::validate() const {
  if (steps < 0) throw ValidationError("synthesis steps must be non-negative");
  if (!(step_size > 0.0) || !std::isfinite(step_size)) throw ValidationError("synthesis step_size must be positive");
  if (images_per_class <= 0) throw ValidationError("images_per_class must be positive");
  for (double w : {reg.w_tv, reg.w_l2, reg.w_feat}) {
    if (!std::isfinite(w) || w < 0.0) throw ValidationError("regularizer weights must be finite and non-negative");
  }
}

Var feature_statistics_penalty(std::span<const Var> norm_inputs, std::span<const NamedNormStats> stored) {
  if (norm_inputs.size() != stored.size()) {
    throw ValidationError("feature penalty: " + std::to_string(norm_inputs.size()) + " layer inputs for " +
                          std::to_string(stored.size()) + " stored statistics");
  }
  Var total;
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const Var dm = ops::channel_mean(norm_inputs[i]) - Var::constant(stored[i].stats->mean);
    const Var dv = ops::channel_var(norm_inputs[i]) - Var::constant(stored[i].stats->var);
    const Var layer = ops::sum(ops::square(dm)) + ops::sum(ops::square(dv));
    total = total.defined() ? total + layer : layer;
  }
  return total.defined() ? total : Var::constant(Tensor::scalar(0.0));
}

RegularizerValue regularizer_eval(const Var& images, const ModelBundle& bundle, const RegularizerWeights& weights,
                                  Var* features) {
  if (images.shape().size() != 4) throw ValidationError("regularizer expects an N x C x H x W batch");
  std::vector<Var> taps;
  const Var f = bundle.eval_features(images, &taps);
  if (features) *features = f;
  const std::vector<NamedNormStats> stored = bundle.normalization_stats();

  RegularizerValue out;
  const Var tv = ops::total_variation(images);
  const Var l2 = ops::scale(ops::sum(ops::square(images)), 1.0 / images.shape()[0]);
  const Var feat = feature_statistics_penalty(taps, stored);
  out.tv = tv.item();
  out.l2 = l2.item();
  out.feat = feat.item();
  out.total = ops::scale(tv, weights.w_tv) + ops::scale(l2, weights.w_l2) + ops::scale(feat, weights.w_feat);
  return out;
}

TableEmbeddingProvider::TableEmbeddingProvider(std::map<std::string, std::vector<double>> table, double temperature)
    : temperature_(temperature) {
  if (!(temperature > 0.0)) throw ValidationError("embedding temperature must be positive");
  std::size_t dim = 0;
  for (auto& [cls, v] : table) {
    if (dim == 0) dim = v.size();
    if (v.empty() || v.size() != dim) throw ValidationError("embedding for '" + cls + "' has the wrong dimension");
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ValidationError("embedding for '" + cls + "' is zero");
    for (double& x : v) x /= norm;
    table_.emplace(cls, Tensor({static_cast<int>(dim)}, std::move(v)));
  }
}

TableEmbeddingProvider TableEmbeddingProvider::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding table " + path.string());
  std::map<std::string, std::vector<double>> table;
  double temperature = 0.07;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::istringstream fields(line);
    std::string cls;
    if (!(fields >> cls) || cls.starts_with('#')) continue;
    if (cls == "temperature") {
      if (!(fields >> temperature)) throw ParseError("expected 'temperature <value>'", number);
      continue;
    }
    std::vector<double> v;
    for (double x; fields >> x;) v.push_back(x);
    if (!fields.eof()) throw ParseError("non-numeric embedding component", number);
    table[cls] = std::move(v);
  }
  return TableEmbeddingProvider(std::move(table), temperature);
}

Tensor TableEmbeddingProvider::embed(const std::string& class_id) const {
  auto it = table_.find(class_id);
  if (it == table_.end()) throw LookupError("no embedding for class '" + class_id + "'");
  return it->second;
}

Var clip_style_logits(const Var& features, const TextEmbeddingProvider& provider,
                      std::span<const std::string> classes) {
  if (classes.empty()) throw ValidationError("clip-style scoring needs at least one class");
  const int d = features.value().cols();
  Tensor w({static_cast<int>(classes.size()), d});
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const Tensor e = provider.embed(classes[k]);
    if (static_cast<int>(e.size()) != d) {
      throw ValidationError("embedding dimension " + std::to_string(e.size()) + " does not match features (" +
                            std::to_string(d) + ")");
    }
    std::copy(e.values().begin(), e.values().end(), w.data() + k * static_cast<std::size_t>(d));
  }
  const Var cos = ops::linear(ops::l2_normalize_rows(features), Var::constant(std::move(w)), Var());
  return ops::scale(cos, 1.0 / provider.temperature());
}

std::vector<double> clip_style_probability(const Tensor& features, const std::string& class_id,
                                           const TextEmbeddingProvider& provider,
                                           std::span<const std::string> classes) {
  auto it = std::find(classes.begin(), classes.end(), class_id);
  if (it == classes.end()) throw ValidationError("class '" + class_id + "' is not among the scored classes");
  const auto k = static_cast<Eigen::Index>(it - classes.begin());
  NoGradGuard guard;
  const Tensor p = ops::softmax(clip_style_logits(Var::constant(features), provider, classes)).value();
  std::vector<double> out(static_cast<std::size_t>(p.rows()));
  for (int r = 0; r < p.rows(); ++r) out[static_cast<std::size_t>(r)] = p.matrix()(r, k);
  return out;
}

namespace {

struct Evaluation {
  double loss = 0.0;
  Tensor grad;
  Tensor probs;
};

}  // namespace

SynthesisResult synthesize_class_images(const ModelBundle& bundle, int class_id, const SynthesisConfig& cfg,
                                        const ClipScoring& clip) {
  cfg.validate();
  const int classes = clip.provider ? static_cast<int>(clip.classes.size())
                                    : (bundle.has_pretrain_head() ? bundle.config().pretrain_classes : 0);
  if (!clip.provider && !bundle.has_pretrain_head()) throw ValidationError("synthesis needs a pre-training head");
  if (class_id < 0 || class_id >= classes) {
    throw ValidationError("class " + std::to_string(class_id) + " is outside the head's " + std::to_string(classes) +
                          " classes");
  }
  const ModelConfig& mc = bundle.config();
  const int n = cfg.images_per_class;
  const Shape shape{n, mc.in_channels, mc.image_side, mc.image_side};

  Tensor x(shape);
  std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(class_id));
  if (cfg.init == SynthesisInit::uniform_noise) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : x.values()) v = u(rng);
  } else {
    std::normal_distribution<double> g(0.5, 0.2);
    for (double& v : x.values()) v = std::clamp(g(rng), 0.0, 1.0);
  }

  // Parameter gradients accumulated here are discarded afterwards.
  const auto params = bundle.named_parameters();
  std::vector<Tensor> saved_grads;
  for (const auto& [name, p] : params) saved_grads.push_back(p.has_grad() ? p.grad() : Tensor());

  const std::vector<int> labels(static_cast<std::size_t>(n), class_id);
  auto evaluate = [&](const Tensor& images) {
    Var xv = Var::parameter(images);
    Var f;
    const RegularizerValue reg = regularizer_eval(xv, bundle, cfg.reg, &f);
    const Var logits = clip.provider ? clip_style_logits(f, *clip.provider, clip.classes) : bundle.pretrain_logits(f);
    const Var loss = ops::cross_entropy(logits, labels) + reg.total;
    loss.backward();
    Evaluation e{loss.item(), xv.grad(), Tensor()};
    {
      NoGradGuard guard;
      e.probs = ops::softmax(Var::constant(logits.value())).value();
    }
    return e;
  };

  SynthesisResult result;
  Evaluation cur = evaluate(x);
  result.loss_history.push_back(cur.loss);
  double lr = cfg.step_size;
  const std::size_t per_image = x.size() / static_cast<std::size_t>(n);
  Tensor dir(shape);
  for (int step = 0; step < cfg.steps; ++step) {
    for (int i = 0; i < n; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * per_image;
      double ss = 0.0;
      for (std::size_t k = 0; k < per_image; ++k) ss += cur.grad[base + k] * cur.grad[base + k];
      const double rms = std::sqrt(ss / static_cast<double>(per_image));
      for (std::size_t k = 0; k < per_image; ++k) dir[base + k] = rms > 0.0 ? cur.grad[base + k] / rms : 0.0;
    }
    bool accepted = false;
    for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
      Tensor cand(shape);
      for (std::size_t k = 0; k < cand.size(); ++k) cand[k] = std::clamp(x[k] - lr * dir[k], 0.0, 1.0);
      Evaluation next = evaluate(cand);
      if (next.loss <= cur.loss) {
        x = std::move(cand);
        cur = std::move(next);
        accepted = true;
        lr = std::min(cfg.step_size, 2.0 * lr);
      } else {
        lr *= 0.5;
      }
    }
    if (!accepted) break;  // no descent within the step-size floor
    result.loss_history.push_back(cur.loss);
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    Var p = params[i].second;
    p.zero_grad();
    if (!saved_grads[i].empty()) p.node()->grad_buffer() = saved_grads[i];
  }

  for (int i = 0; i < n; ++i) {
    result.images.push_back(row(x, i));
    result.confidence.push_back(cur.probs.matrix()(i, class_id));
  }
  return result;
}

LabeledDataset synthesized_dataset(std::span<const std::string> class_names, std::span<const SynthesisResult> results) {
  if (class_names.size() != results.size()) throw ValidationError("one synthesis result per class expected");
  std::vector<Sample> samples;
  for (std::size_t c = 0; c < results.size(); ++c) {
    for (const Tensor& img : results[c].images) samples.push_back({img, static_cast<int>(c), DomainRole::pretrain});
  }
  return LabeledDataset(DomainRole::pretrain, std::vector<std::string>(class_names.begin(), class_names.end()),
                        std::move(samples));
}

void write_synthesized_dataset(const std::filesystem::path& root, std::span<const std::string> class_names,
                               std::span<const SynthesisResult> results, const SynthesisConfig& cfg) {
  save_image_folder(synthesized_dataset(class_names, results), root);
  KeyValueFile manifest;
  manifest.set("steps", cfg.steps);
  manifest.set("step_size", cfg.step_size);
  manifest.set("w_tv", cfg.reg.w_tv);
  manifest.set("w_l2", cfg.reg.w_l2);
  manifest.set("w_feat", cfg.reg.w_feat);
  manifest.set("images_per_class", cfg.images_per_class);
  manifest.set("init", to_string(cfg.init));
  manifest.set("seed", static_cast<long long>(cfg.seed));
  for (std::size_t c = 0; c < results.size(); ++c) {
    for (std::size_t i = 0; i < results[c].confidence.size(); ++i) {
      char name[16];
      std::snprintf(name, sizeof name, "%05zu", i);
      manifest.set("confidence." + class_names[c] + "." + name, results[c].confidence[i]);
    }
  }
  manifest.write(root / "manifest.txt");
}

}  // namespace trida
