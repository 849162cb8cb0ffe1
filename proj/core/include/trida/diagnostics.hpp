#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "trida/data.hpp"
#include "trida/model.hpp"
#include "trida/optim.hpp"

namespace trida {

/// Exact Wasserstein-1 distance between two empirical distributions on
/// the line: the integral of |F_a^-1(u) - F_b^-1(u)| over u, evaluated on
/// the merged quantile grid. Exactly symmetric in its arguments.
double wasserstein_1d_exact(std::span<const double> a, std::span<const double> b);

/// Mean over n_projections random unit directions (seeded) of the exact
/// 1-D Wasserstein-1 distance between the projected rows of a and b.
double sliced_wasserstein(const Tensor& a, const Tensor& b, int n_projections = 128, std::uint64_t seed = 0);

/// Mean silhouette (b - a) / max(a, b) under the Euclidean metric.
/// Singleton clusters score 0, as does 0 / 0.
double silhouette_score(const Tensor& features, std::span<const int> labels);

struct DiagnosticsRecord {
  int epoch = 0;
  double w_st = 0.0;
  double w_sp = 0.0;
  double w_tp = 0.0;
  double silhouette_pretrain = 0.0;
  double acc_source = 0.0;
  double acc_target = 0.0;
};

struct DiagnosticsConfig {
  int n_eval = 512;  // per-domain cap on the evaluation subset
  int n_projections = 128;
  std::uint64_t seed = 0;
  int batch_size = 256;
};

/// Domains to measure; null members are skipped (their metrics are NaN).
struct DomainSets {
  const LabeledDataset* source = nullptr;
  const LabeledDataset* target = nullptr;
  const LabeledDataset* pretrain = nullptr;
};

/// The fixed evaluation subset of a dataset: min(n, n_eval) indices drawn
/// without replacement from a seeded shuffle, in ascending order.
std::vector<int> evaluation_subset(std::size_t size, int n_eval, std::uint64_t seed);

/// Eval-mode features of the selected samples; `logits` receives h's
/// outputs when given.
Tensor extract_features(const ModelBundle& bundle, const LabeledDataset& dataset, std::span<const int> indices,
                        int batch_size = 256, Tensor* logits = nullptr);

/// Eval-mode top-1 accuracy of h against the dataset's ground truth.
double accuracy(const ModelBundle& bundle, const LabeledDataset& dataset, int batch_size = 256);

/// Feature-space distances between the three domains, the silhouette of
/// pre-training features grouped by pre-training class, and both
/// accuracies. Accuracies use the full datasets; everything else the
/// evaluation subsets. Never mutates the bundle.
DiagnosticsRecord track_epoch(const ModelBundle& bundle, const DomainSets& domains, const DiagnosticsConfig& cfg,
                              int epoch);

// ---------------------------------------------------------------------------
// Noisy-label probe

/// Replaces round(fraction * N) labels, chosen uniformly without
/// replacement, with a different class drawn uniformly. `corrupted`
/// receives the affected indices in ascending order.
std::vector<int> corrupt_labels(std::span<const int> labels, int num_classes, double fraction, std::uint64_t seed,
                                std::vector<int>* corrupted = nullptr);

struct ProbeOptions {
  double noise_fraction = 0.5;
  int epochs = 10;
  std::uint64_t seed = 0;
  bool with_pretrain_loss = false;  // also minimise L_p on the pre-training set
  int batch_size = 32;
  double smoothing = 0.0;
  SgdConfig sgd;
  DiagnosticsConfig diag;
};

struct ProbeResult {
  std::vector<DiagnosticsRecord> records;  // epoch 0 is the starting point
  std::vector<int> corrupted;
};

/// Fine-tunes a copy of `bundle` on `train` with a fraction of its labels
/// randomised and records diagnostics after every epoch.
ProbeResult noisy_label_probe(const ModelBundle& bundle, const LabeledDataset& train, const DomainSets& eval,
                              const ProbeOptions& options);

// ---------------------------------------------------------------------------
// Reporting

void write_diagnostics_csv(std::span<const DiagnosticsRecord> records, std::ostream& out);
/// Writes <dir>/diag_<run_id>.csv and returns its path.
std::filesystem::path write_diagnostics_csv(std::span<const DiagnosticsRecord> records,
                                            const std::filesystem::path& dir, const std::string& run_id);

struct ChartSeries {
  std::string label;
  std::vector<double> y;
};

/// Minimal SVG line chart (x = index).
void write_line_chart_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                          std::span<const ChartSeries> series);

}  // namespace trida
