#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "trida/autograd.hpp"
#include "trida/data.hpp"
#include "trida/model.hpp"

namespace trida {

enum class SynthesisInit { uniform_noise, gaussian_noise };

SynthesisInit parse_synthesis_init(const std::string& text);
std::string to_string(SynthesisInit init);

struct RegularizerWeights {
  double w_tv = 20.0;
  double w_l2 = 1e-5;
  double w_feat = 1e-2;
};

struct SynthesisConfig {
  int steps = 500;
  double step_size = 0.05;
  RegularizerWeights reg;
  int images_per_class = 10;
  SynthesisInit init = SynthesisInit::uniform_noise;
  std::uint64_t seed = 0;

  void validate() const;
};

/// sum over layers of |mu(x) - mu_stored|^2 + |var(x) - var_stored|^2,
/// with per-channel batch moments of each normalisation layer's input.
Var feature_statistics_penalty(std::span<const Var> norm_inputs, std::span<const NamedNormStats> stored);

struct RegularizerValue {
  Var total;
  double tv = 0.0;
  double l2 = 0.0;
  double feat = 0.0;
};

/// w_tv TV(x) + w_l2 |x|^2 + w_feat * feature penalty, for a batch
/// N x C x H x W (the l2 term is the per-image squared norm averaged over
/// the batch). `features` receives the eval-mode f(x) of the same pass.
RegularizerValue regularizer_eval(const Var& images, const ModelBundle& bundle, const RegularizerWeights& weights,
                                  Var* features = nullptr);

/// Source of unit-norm class embeddings and a softmax temperature.
class TextEmbeddingProvider {
 public:
  virtual ~TextEmbeddingProvider() = default;
  virtual Tensor embed(const std::string& class_id) const = 0;
  virtual double temperature() const = 0;
};

/// Embeddings from a fixed table, normalised on construction.
class TableEmbeddingProvider final : public TextEmbeddingProvider {
 public:
  TableEmbeddingProvider(std::map<std::string, std::vector<double>> table, double temperature);
  /// Text file: optional "temperature <t>" line, then "class v1 v2 ..." lines.
  static TableEmbeddingProvider load(const std::filesystem::path& path);

  Tensor embed(const std::string& class_id) const override;
  double temperature() const override { return temperature_; }

 private:
  std::map<std::string, Tensor> table_;
  double temperature_;
};

/// Cosine similarity between each feature row and each class embedding,
/// divided by the temperature: N x K logits.
Var clip_style_logits(const Var& features, const TextEmbeddingProvider& provider,
                      std::span<const std::string> classes);

/// Softmax of clip_style_logits over `classes`, evaluated at `class_id`
/// for every row (N values).
std::vector<double> clip_style_probability(const Tensor& features, const std::string& class_id,
                                           const TextEmbeddingProvider& provider,
                                           std::span<const std::string> classes);

/// Optional CLIP-style class scoring; replaces h_p when set.
struct ClipScoring {
  const TextEmbeddingProvider* provider = nullptr;
  std::vector<std::string> classes;
};

struct SynthesisResult {
  std::vector<Tensor> images;       // C x H x W each, in [0, 1]
  std::vector<double> confidence;   // final probability of the requested class
  std::vector<double> loss_history; // objective after every accepted step, starting at the initial value
};

/// Optimises a batch of images_per_class images on
/// CE(class probabilities, class_id) + Reg(x) with the model frozen in
/// eval mode. Each step moves along the per-image RMS-normalised gradient,
/// clamps to [0, 1], and halves the step size until the objective does not
/// increase (an accepted step lets it grow back toward step_size), so
/// loss_history is non-increasing.
SynthesisResult synthesize_class_images(const ModelBundle& bundle, int class_id, const SynthesisConfig& cfg,
                                        const ClipScoring& clip = {});

/// Writes root/<class>/<index>.png plus root/manifest.txt recording the
/// configuration and every image's final confidence.
void write_synthesized_dataset(const std::filesystem::path& root, std::span<const std::string> class_names,
                               std::span<const SynthesisResult> results, const SynthesisConfig& cfg);

/// Synthesised images as a labelled pre-training dataset.
LabeledDataset synthesized_dataset(std::span<const std::string> class_names, std::span<const SynthesisResult> results);

}  // namespace trida
