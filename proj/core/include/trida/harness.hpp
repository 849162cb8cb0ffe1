#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trida/baselines.hpp"
#include "trida/data.hpp"
#include "trida/diagnostics.hpp"
#include "trida/kvfile.hpp"
#include "trida/model.hpp"
#include "trida/objectives.hpp"
#include "trida/optim.hpp"
#include "trida/synthesis.hpp"
#include "trida/taxonomy.hpp"

namespace trida {

enum class Recipe { pretrain, uda, sfuda_step1, sfuda_step2, noisy_probe, synthesize };

std::string to_string(Recipe recipe);
Recipe parse_recipe(const std::string& text);

/// Everything a run needs. Settable by key (see RunConfig::set); the same
/// keys are used by config files, TRIDA_* environment variables and CLI
/// flags.
struct RunConfig {
  Recipe recipe = Recipe::sfuda_step1;

  // Data: the toy benchmark unless image-folder directories are given.
  ToyBenchmarkSpec toy;
  std::string source_dir;
  std::string target_dir;
  std::string pretrain_dir;
  int image_side = 32;

  // Pre-training class selection (empty taxonomy: keep every class).
  std::string taxonomy = "builtin:toy";
  std::string class_mapping;
  double tau = 0.2;
  int per_class_cap = -1;

  // Model.
  ModelConfig model;
  std::string pretrained_checkpoint;  // produced by the pretrain recipe
  std::string source_checkpoint;      // produced by sfuda_step1
  int pretrain_epochs = 12;
  std::uint64_t pretrain_seed = 0;

  // Objectives.
  TriDAConfig trida;
  std::string baseline;  // empty: the recipe's default baseline
  double smoothing = 0.1;
  double w_pl = 0.3;
  int disc_hidden = 64;
  bool freeze_head = true;  // keep h fixed in sfuda_step2

  // Optimisation.
  SgdConfig sgd;
  int epochs = 10;
  int batch_size = 32;
  std::uint64_t seed = 0;

  // Output and diagnostics.
  std::string output_dir = "runs";
  std::string run_id;  // empty: derived from recipe and seed
  DiagnosticsConfig diag;
  bool track = true;
  bool save_checkpoints = true;

  // Noisy-label probe.
  double noise_fraction = 0.5;
  bool probe_with_pretrain_loss = false;

  // Synthesis.
  SynthesisConfig synth;
  std::string embeddings;  // embedding table for CLIP-style scoring

  /// Sets one field from text. Throws ValidationError for unknown keys or
  /// malformed values.
  void set(const std::string& key, const std::string& value);
  void apply(const KeyValueFile& kv);
  /// Applies TRIDA_<KEY> variables (key upper-cased, '.' as '_').
  void apply_environment();
  static std::vector<std::string> keys();

  void validate() const;
  KeyValueFile to_kv() const;
  std::string effective_run_id() const;
  std::uint64_t hash() const;
};

struct StepRecord {
  int epoch = 0;
  int step = 0;
  LossBreakdown loss;
};

struct RunReport {
  std::string run_id;
  Recipe recipe = Recipe::sfuda_step1;
  std::string config_hash;
  std::vector<DiagnosticsRecord> diagnostics;
  std::vector<StepRecord> losses;
  std::map<std::string, double> final_accuracy;  // per domain
  std::map<std::string, double> metrics;         // recipe-specific extras
  std::map<std::string, std::string> artifacts;  // checkpoint and output paths
  std::vector<std::string> selected_classes;
  double wall_clock_seconds = 0.0;

  /// Fingerprint of everything except wall-clock time and paths.
  std::uint64_t hash() const;
};

/// Source, target and pre-training data for a run (selection not applied).
struct Domains {
  LabeledDataset source;
  LabeledDataset target;
  LabeledDataset pretrain;
};

Domains load_domains(const RunConfig& cfg);

/// Executes the configured recipe.
RunReport run(const RunConfig& cfg);

/// Runs seeds seed, seed + 1, ... and averages final accuracies.
std::vector<RunReport> run_repeats(const RunConfig& cfg, int repeats);

/// Writes diag_<id>.csv, losses_<id>.csv, one SVG chart per tracked
/// metric, summary_<id>.txt and, when given, the config snapshot.
/// Returns the written paths.
std::vector<std::filesystem::path> export_report(const RunReport& report, const std::filesystem::path& dir,
                                                 const RunConfig* cfg = nullptr);

}  // namespace trida
