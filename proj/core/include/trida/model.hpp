#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "trida/autograd.hpp"
#include "trida/tensor.hpp"

namespace trida {

enum class BackboneKind {
  conv,      // stack of conv3x3/stride-2 -> BatchNorm -> ReLU blocks
  identity,  // flattens the input; used as a linear stub in tests
};

enum class Mode { train, eval };

struct ModelConfig {
  BackboneKind backbone = BackboneKind::conv;
  int in_channels = 3;
  int image_side = 32;
  std::vector<int> conv_channels{16, 32, 32};
  int bottleneck_width = 256;  // 0: features are the flattened backbone output
  bool backbone_pretrained = true;
  bool weight_norm_head = false;
  int target_classes = 0;
  int pretrain_classes = 0;  // 0: no pre-training head

  void validate() const;
  int backbone_output_dim() const;
  int feature_dim() const;
  /// Canonical `key = value` text; the config hash is taken over it.
  std::string canonical() const;
};

struct LinearLayer {
  Var weight;  // out x in (direction when weight-normalised)
  Var bias;
  Var gain;    // only with weight normalisation

  Var forward(const Var& x) const;
};

struct NormLayer {
  Var gamma;
  Var beta;
  NormStats running;
};

struct ConvBlock {
  Var weight;
  NormLayer norm;
};

struct ParameterGroups {
  std::vector<Var> backbone;    // pre-trained layers
  std::vector<Var> new_layers;  // bottleneck, heads, and everything when training from scratch
};

struct NamedNormStats {
  std::string name;
  const NormStats* stats;
};

/// Feature extractor f (backbone -> bottleneck -> BatchNorm), target
/// classifier h and removable pre-training classifier h_p.
///
/// Copies are deep. Forward passes in Mode::train normalise with batch
/// statistics and update the running ones; eval_features() never mutates.
class ModelBundle {
 public:
  ModelBundle() = default;
  ModelBundle(ModelConfig config, std::uint64_t seed);
  ModelBundle(const ModelBundle& other);
  ModelBundle& operator=(const ModelBundle& other);
  ModelBundle(ModelBundle&&) noexcept = default;
  ModelBundle& operator=(ModelBundle&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }
  /// Marks the backbone as pre-trained (it then gets its own rate group).
  void set_backbone_pretrained(bool value) { config_.backbone_pretrained = value; }

  /// f(x) in the bundle's current mode.
  Var forward_features(const Var& images);
  Var forward_features(const Tensor& images) { return forward_features(Var::constant(images)); }

  /// f(x) in eval mode. When `norm_inputs` is given it receives the input
  /// of every normalisation layer of f, in normalization_stats() order.
  Var eval_features(const Var& images, std::vector<Var>* norm_inputs = nullptr) const;

  Var target_logits(const Var& features) const;
  Var pretrain_logits(const Var& features) const;

  /// Logits without gradient tracking, in the current mode.
  Tensor classify_target(const Tensor& images);
  Tensor classify_pretrain(const Tensor& images);
  /// Both heads over one shared feature pass.
  std::pair<Tensor, Tensor> classify_joint(const Tensor& images);

  bool has_pretrain_head() const { return pretrain_head_.weight.defined(); }
  ModelBundle strip_pretrain_head() const;

  void reset_target_head(int classes, std::uint64_t seed);
  void reset_pretrain_head(int classes, std::uint64_t seed);
  void reset_bottleneck(std::uint64_t seed);

  ParameterGroups parameter_groups() const;
  std::vector<std::pair<std::string, Var>> named_parameters() const;
  std::size_t parameter_count() const;

  /// Running statistics of every normalisation layer of f (read-only).
  std::vector<NamedNormStats> normalization_stats() const;

  /// Fingerprint over parameters and running statistics.
  std::uint64_t state_hash() const;

  std::vector<std::string> target_class_names;
  std::vector<std::string> pretrain_class_names;

  void save(const std::filesystem::path& path) const;
  static ModelBundle load(const std::filesystem::path& path);

 private:
  template <class Self>
  static Var forward_impl(Self& self, const Var& images, bool training, std::vector<Var>* norm_inputs);

  void deep_copy_parameters();
  std::vector<std::pair<std::string, NormLayer*>> norm_layers();
  std::vector<std::pair<std::string, const NormLayer*>> norm_layers() const;

  ModelConfig config_;
  Mode mode_ = Mode::train;
  std::vector<ConvBlock> blocks_;
  LinearLayer bottleneck_;
  NormLayer bottleneck_norm_;
  LinearLayer target_head_;
  LinearLayer pretrain_head_;
};

/// Row-wise argmax; ties resolve to the lowest index.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace trida
