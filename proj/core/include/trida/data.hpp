#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trida/tensor.hpp"

namespace trida {

enum class DomainRole { source, target, pretrain };

std::string to_string(DomainRole role);
DomainRole parse_domain_role(std::string_view text);

struct Sample {
  Tensor image;  // C x H x W, values in [0, 1]
  std::optional<int> label;
  DomainRole role = DomainRole::source;
};

/// Immutable ordered collection of samples from one domain.
///
/// Target-domain data carries no training labels; its ground truth, when
/// known, lives in ground_truth() and is only meant for reporting
/// accuracy. Pseudo-labels are attached with with_labels().
class LabeledDataset {
 public:
  LabeledDataset() = default;
  LabeledDataset(DomainRole role, std::vector<std::string> class_set, std::vector<Sample> samples,
                 std::vector<int> hidden_labels = {});

  DomainRole role() const { return role_; }
  const std::vector<std::string>& class_set() const { return class_set_; }
  int num_classes() const { return static_cast<int>(class_set_.size()); }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const Sample& operator[](std::size_t i) const { return samples_[i]; }
  const std::vector<Sample>& samples() const { return samples_; }
  Shape image_shape() const;

  /// True when every sample carries a label.
  bool labeled() const;

  /// N x C x H x W batch of the selected samples.
  Tensor images(std::span<const int> indices) const;
  Tensor all_images() const;

  /// Training labels of the selected samples; throws when any is absent.
  std::vector<int> labels(std::span<const int> indices) const;
  std::vector<int> all_labels() const;

  /// Labels usable for evaluation: the hidden ground truth when present,
  /// the sample labels otherwise. Empty when neither exists.
  std::vector<int> ground_truth() const;

  /// Copy with the given labels attached (e.g. pseudo-labels).
  LabeledDataset with_labels(std::span<const int> labels) const;

  /// Copy without sample labels; existing labels move to ground_truth().
  LabeledDataset without_labels() const;

  LabeledDataset subset(std::span<const int> indices) const;

 private:
  DomainRole role_ = DomainRole::source;
  std::vector<std::string> class_set_;
  std::vector<Sample> samples_;
  std::vector<int> hidden_labels_;
};

/// Reads root/<class>/<image> into a dataset. Classes are the sorted
/// subdirectory names; files are read in sorted order, resized
/// bilinearly to image_side x image_side and scaled to [0, 1]. Target
/// datasets keep the folder labels as hidden ground truth.
LabeledDataset load_image_folder(const std::filesystem::path& root, DomainRole role, int image_side = 32);

/// Writes a dataset as root/<class>/<index>.png (8-bit RGB or gray).
void save_image_folder(const LabeledDataset& dataset, const std::filesystem::path& root);

// ---------------------------------------------------------------------------
// Toy three-domain benchmark

/// Appearance of one rendered domain.
struct DomainAppearance {
  double hue_center = 0.0;
  double hue_spread = 0.0;
  double saturation = 0.8;
  double foreground_value = 0.9;
  double background_min = 0.05;
  double background_max = 0.2;
  double texture_min = 0.0;
  double texture_max = 0.0;
  double noise_min = 0.03;
  double noise_max = 0.03;
};

/// Photometric shift between source and target plus the appearance of
/// the (diverse) pre-training domain.
struct DomainShift {
  double hue_shift = 0.2;
  double background_level = 0.3;
  double texture_amplitude = 0.1;
  double noise = 0.05;
  DomainAppearance source_appearance() const;
  DomainAppearance target_appearance() const;
  DomainAppearance pretrain_appearance() const;
};

struct ToyBenchmarkSpec {
  int n_classes_task = 4;
  int n_classes_pretrain = 8;
  int image_side = 32;
  int samples_per_class_per_domain = 60;
  DomainShift domain_shift;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ToyBenchmark {
  LabeledDataset source;
  LabeledDataset target;
  LabeledDataset pretrain;
};

struct ToyShape {
  std::string name;
  std::string parent;  // taxonomy position
};

/// The fixed shape catalogue; task classes are a prefix of it.
std::span<const ToyShape> toy_shape_catalog();

/// Renders the three domains. Identical specs give bit-identical output.
ToyBenchmark generate_toy_benchmark(const ToyBenchmarkSpec& spec);

/// Directory layout: manifest.txt (key = value) plus, per domain,
/// <role>.images.f64 (N*C*H*W little-endian doubles) and
/// <role>.labels.i32 (N little-endian int32, -1 when absent).
void save_toy_benchmark(const ToyBenchmark& bench, const ToyBenchmarkSpec& spec, const std::filesystem::path& dir);
ToyBenchmark load_toy_benchmark(const std::filesystem::path& dir, ToyBenchmarkSpec* spec = nullptr);

// ---------------------------------------------------------------------------
// Cross-domain pairing

struct BatchPair {
  std::vector<int> a;
  std::vector<int> b;
};

/// Pairs batches of two datasets of possibly different sizes. The larger
/// side (a on ties) is shuffled once per epoch and walked in order; the
/// smaller side is cycled, reshuffling each time it is exhausted.
class PairedBatchStream {
 public:
  PairedBatchStream(std::size_t size_a, std::size_t size_b, int batch_size, std::uint64_t seed);

  int steps_per_epoch() const { return steps_; }

  /// Index pairs for the next epoch.
  std::vector<BatchPair> next_epoch();

 private:
  std::vector<int> draw_cycled(std::size_t count);

  std::size_t size_a_;
  std::size_t size_b_;
  int batch_size_;
  int steps_;
  bool a_leads_;
  std::mt19937_64 rng_;
  std::vector<int> cycle_;
  std::size_t cycle_pos_ = 0;
};

/// Endless sampler over one dataset: shuffled passes, each index drawn
/// once per pass.
class CyclicSampler {
 public:
  CyclicSampler(std::size_t size, std::uint64_t seed);
  std::vector<int> draw(std::size_t count);

 private:
  std::size_t size_;
  std::mt19937_64 rng_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

/// Index stream over a single dataset: one shuffled pass per epoch.
std::vector<std::vector<int>> shuffled_batches(std::size_t size, int batch_size, std::uint64_t seed);

}  // namespace trida
