#include "trida/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "trida/errors.hpp"
#include "trida/hash.hpp"

namespace trida {

std::string to_string(Recipe recipe) {
  switch (recipe) {
    case Recipe::pretrain: return "pretrain";
    case Recipe::uda: return "uda";
    case Recipe::sfuda_step1: return "sfuda_step1";
    case Recipe::sfuda_step2: return "sfuda_step2";
    case Recipe::noisy_probe: return "noisy_probe";
    case Recipe::synthesize: return "synthesize";
  }
  return "?";
}

Recipe parse_recipe(const std::string& text) {
  if (text == "pretrain") return Recipe::pretrain;
  if (text == "uda") return Recipe::uda;
  if (text == "sfuda_step1" || text == "sfuda1") return Recipe::sfuda_step1;
  if (text == "sfuda_step2" || text == "sfuda2") return Recipe::sfuda_step2;
  if (text == "noisy_probe" || text == "probe") return Recipe::noisy_probe;
  if (text == "synthesize" || text == "synth") return Recipe::synthesize;
  throw ValidationError("unknown recipe '" + text + "'");
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
    throw ValidationError("'" + key + "' expects a number, got '" + v + "'");
  }
  return out;
}

long long to_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ValidationError("'" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  const long long x = to_integer(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    throw ValidationError("'" + key + "' is out of range");
  }
  return static_cast<int>(x);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ValidationError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ValidationError("'" + key + "' expects a boolean, got '" + v + "'");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool hashed = true;
};

#define TRIDA_DOUBLE(member) \
  Field { [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_double(k, v); }, \
          [](const RunConfig& c) { return format_double(c.member); } }
#define TRIDA_INT(member) \
  Field { [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_int(k, v); }, \
          [](const RunConfig& c) { return std::to_string(c.member); } }
#define TRIDA_U64(member) \
  Field { [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_u64(k, v); }, \
          [](const RunConfig& c) { return std::to_string(c.member); } }
#define TRIDA_BOOL(member) \
  Field { [](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_bool(k, v); }, \
          [](const RunConfig& c) { return from_bool(c.member); } }
#define TRIDA_STRING(member) \
  Field { [](RunConfig& c, const std::string&, const std::string& v) { c.member = v; }, \
          [](const RunConfig& c) { return c.member; } }

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("recipe", Field{[](RunConfig& c, const std::string&, const std::string& v) { c.recipe = parse_recipe(v); },
                                   [](const RunConfig& c) { return to_string(c.recipe); }});
    t.emplace_back("image_side", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                         c.image_side = to_int(k, v);
                                         c.toy.image_side = c.image_side;
                                         c.model.image_side = c.image_side;
                                       },
                                       [](const RunConfig& c) { return std::to_string(c.image_side); }});
    t.emplace_back("toy.classes_task", TRIDA_INT(toy.n_classes_task));
    t.emplace_back("toy.classes_pretrain", TRIDA_INT(toy.n_classes_pretrain));
    t.emplace_back("toy.samples_per_class", TRIDA_INT(toy.samples_per_class_per_domain));
    t.emplace_back("toy.seed", TRIDA_U64(toy.seed));
    t.emplace_back("toy.hue_shift", TRIDA_DOUBLE(toy.domain_shift.hue_shift));
    t.emplace_back("toy.background_level", TRIDA_DOUBLE(toy.domain_shift.background_level));
    t.emplace_back("toy.texture_amplitude", TRIDA_DOUBLE(toy.domain_shift.texture_amplitude));
    t.emplace_back("toy.noise", TRIDA_DOUBLE(toy.domain_shift.noise));
    t.emplace_back("source_dir", TRIDA_STRING(source_dir));
    t.emplace_back("target_dir", TRIDA_STRING(target_dir));
    t.emplace_back("pretrain_dir", TRIDA_STRING(pretrain_dir));
    t.emplace_back("taxonomy", TRIDA_STRING(taxonomy));
    t.emplace_back("class_mapping", TRIDA_STRING(class_mapping));
    t.emplace_back("tau", TRIDA_DOUBLE(tau));
    t.emplace_back("per_class_cap", TRIDA_INT(per_class_cap));
    t.emplace_back("backbone", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                       if (v == "conv") {
                                         c.model.backbone = BackboneKind::conv;
                                       } else if (v == "identity") {
                                         c.model.backbone = BackboneKind::identity;
                                       } else {
                                         throw ValidationError("'" + k + "' expects conv or identity");
                                       }
                                     },
                                     [](const RunConfig& c) {
                                       return std::string(c.model.backbone == BackboneKind::conv ? "conv" : "identity");
                                     }});
    t.emplace_back("conv_channels", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                            c.model.conv_channels.clear();
                                            for (const auto& part : split(v, ',')) {
                                              c.model.conv_channels.push_back(to_int(k, trim(part)));
                                            }
                                          },
                                          [](const RunConfig& c) {
                                            std::vector<std::string> parts;
                                            for (int ch : c.model.conv_channels) parts.push_back(std::to_string(ch));
                                            return join(parts, ',');
                                          }});
    t.emplace_back("bottleneck_width", TRIDA_INT(model.bottleneck_width));
    t.emplace_back("weight_norm_head", TRIDA_BOOL(model.weight_norm_head));
    t.emplace_back("pretrained_checkpoint", TRIDA_STRING(pretrained_checkpoint));
    t.emplace_back("source_checkpoint", TRIDA_STRING(source_checkpoint));
    t.emplace_back("pretrain_epochs", TRIDA_INT(pretrain_epochs));
    t.emplace_back("pretrain_seed", TRIDA_U64(pretrain_seed));
    t.emplace_back("trida.beta", TRIDA_DOUBLE(trida.beta));
    t.emplace_back("trida.alpha", TRIDA_DOUBLE(trida.alpha));
    t.emplace_back("trida.use_pretrain", TRIDA_BOOL(trida.use_pretrain));
    t.emplace_back("trida.use_sem", TRIDA_BOOL(trida.use_sem));
    t.emplace_back("trida.use_feat", TRIDA_BOOL(trida.use_feat));
    t.emplace_back("trida.enabled", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                            const bool on = to_bool(k, v);
                                            c.trida.use_pretrain = c.trida.use_sem = c.trida.use_feat = on;
                                          },
                                          [](const RunConfig& c) { return from_bool(c.trida.active()); }, false});
    t.emplace_back("baseline", TRIDA_STRING(baseline));
    t.emplace_back("smoothing", TRIDA_DOUBLE(smoothing));
    t.emplace_back("w_pl", TRIDA_DOUBLE(w_pl));
    t.emplace_back("disc_hidden", TRIDA_INT(disc_hidden));
    t.emplace_back("freeze_head", TRIDA_BOOL(freeze_head));
    t.emplace_back("preset", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                     if (v == "visda") {
                                       const LrSchedule s = c.sgd.schedule;
                                       c.sgd = SgdConfig::visda_preset();
                                       c.sgd.schedule = s;
                                     } else if (v != "default") {
                                       throw ValidationError("'" + k + "' expects default or visda");
                                     }
                                   },
                                   [](const RunConfig&) { return std::string("default"); }, false});
    t.emplace_back("lr_backbone", TRIDA_DOUBLE(sgd.lr_backbone));
    t.emplace_back("lr_new", TRIDA_DOUBLE(sgd.lr_new));
    t.emplace_back("momentum", TRIDA_DOUBLE(sgd.momentum));
    t.emplace_back("weight_decay", TRIDA_DOUBLE(sgd.weight_decay));
    t.emplace_back("lr_schedule", Field{[](RunConfig& c, const std::string&, const std::string& v) {
                                          c.sgd.schedule = parse_lr_schedule(v);
                                        },
                                        [](const RunConfig& c) { return to_string(c.sgd.schedule); }});
    t.emplace_back("epochs", TRIDA_INT(epochs));
    t.emplace_back("batch_size", TRIDA_INT(batch_size));
    t.emplace_back("seed", TRIDA_U64(seed));
    t.emplace_back("output_dir", Field{[](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; },
                                       [](const RunConfig& c) { return c.output_dir; }, false});
    t.emplace_back("run_id", Field{[](RunConfig& c, const std::string&, const std::string& v) { c.run_id = v; },
                                   [](const RunConfig& c) { return c.run_id; }, false});
    t.emplace_back("track", TRIDA_BOOL(track));
    t.emplace_back("save_checkpoints", Field{[](RunConfig& c, const std::string& k, const std::string& v) {
                                               c.save_checkpoints = to_bool(k, v);
                                             },
                                             [](const RunConfig& c) { return from_bool(c.save_checkpoints); }, false});
    t.emplace_back("diag.n_eval", TRIDA_INT(diag.n_eval));
    t.emplace_back("diag.projections", TRIDA_INT(diag.n_projections));
    t.emplace_back("diag.seed", TRIDA_U64(diag.seed));
    t.emplace_back("probe.noise_fraction", TRIDA_DOUBLE(noise_fraction));
    t.emplace_back("probe.with_pretrain_loss", TRIDA_BOOL(probe_with_pretrain_loss));
    t.emplace_back("synth.steps", TRIDA_INT(synth.steps));
    t.emplace_back("synth.step_size", TRIDA_DOUBLE(synth.step_size));
    t.emplace_back("synth.w_tv", TRIDA_DOUBLE(synth.reg.w_tv));
    t.emplace_back("synth.w_l2", TRIDA_DOUBLE(synth.reg.w_l2));
    t.emplace_back("synth.w_feat", TRIDA_DOUBLE(synth.reg.w_feat));
    t.emplace_back("synth.images_per_class", TRIDA_INT(synth.images_per_class));
    t.emplace_back("synth.init", Field{[](RunConfig& c, const std::string&, const std::string& v) {
                                         c.synth.init = parse_synthesis_init(v);
                                       },
                                       [](const RunConfig& c) { return to_string(c.synth.init); }});
    t.emplace_back("embeddings", TRIDA_STRING(embeddings));
    return t;
  }();
  return table;
}

#undef TRIDA_DOUBLE
#undef TRIDA_INT
#undef TRIDA_U64
#undef TRIDA_BOOL
#undef TRIDA_STRING

const Field& field(const std::string& key) {
  for (const auto& [name, f] : fields()) {
    if (name == key) return f;
  }
  throw ValidationError("unknown configuration key '" + key + "'");
}

std::string env_name(const std::string& key) {
  std::string out = "TRIDA_";
  for (char ch : key) out += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, trim(value)); }

void RunConfig::apply(const KeyValueFile& kv) {
  for (const auto& key : kv.keys()) set(key, kv.get(key));
}

void RunConfig::apply_environment() {
  for (const auto& [name, f] : fields()) {
    if (const char* v = std::getenv(env_name(name).c_str())) set(name, v);
  }
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [name, f] : fields()) out.push_back(name);
  return out;
}

void RunConfig::validate() const {
  toy.validate();
  sgd.validate();
  trida.validate();
  synth.validate();
  if (image_side <= 0 || model.image_side != image_side || toy.image_side != image_side) {
    throw ValidationError("image_side must be positive and shared by the model and the toy benchmark");
  }
  if (!(tau >= 0.0 && tau < 1.0)) throw ValidationError("tau must lie in [0, 1)");
  if (per_class_cap < -1) throw ValidationError("per_class_cap must be -1 (no cap) or non-negative");
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (pretrain_epochs < 0) throw ValidationError("pretrain_epochs must be non-negative");
  if (batch_size < 2) throw ValidationError("batch_size must be at least 2");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ValidationError("smoothing must lie in [0, 1)");
  if (w_pl < 0.0) throw ValidationError("w_pl must be non-negative");
  if (disc_hidden <= 0) throw ValidationError("disc_hidden must be positive");
  if (!(noise_fraction >= 0.0 && noise_fraction <= 1.0)) throw ValidationError("probe.noise_fraction must lie in [0, 1]");
  if (diag.n_eval <= 0 || diag.n_projections <= 0) throw ValidationError("diagnostics sizes must be positive");
  if (model.bottleneck_width < 0) throw ValidationError("bottleneck_width must be non-negative");
  if (model.backbone == BackboneKind::conv && model.conv_channels.empty()) {
    throw ValidationError("conv_channels must list at least one block");
  }
  if (!baseline.empty()) parse_objective_kind(baseline);
  if (recipe == Recipe::sfuda_step2 && source_checkpoint.empty()) {
    throw ValidationError("sfuda_step2 needs source_checkpoint (the output of sfuda_step1)");
  }
  if (!class_mapping.empty() && taxonomy.empty()) throw ValidationError("class_mapping needs a taxonomy");
}

KeyValueFile RunConfig::to_kv() const {
  KeyValueFile kv;
  for (const auto& [name, f] : fields()) {
    if (name == "preset" || name == "trida.enabled") continue;
    kv.set(name, f.get(*this));
  }
  return kv;
}

std::string RunConfig::effective_run_id() const {
  return run_id.empty() ? to_string(recipe) + "_s" + std::to_string(seed) : run_id;
}

std::uint64_t RunConfig::hash() const {
  Fnv1a h;
  for (const auto& [name, f] : fields()) {
    if (!f.hashed) continue;
    h.update(name);
    h.update("=");
    h.update(f.get(*this));
    h.update("\n");
  }
  return h.digest();
}

std::uint64_t RunReport::hash() const {
  Fnv1a h;
  h.update(to_string(recipe));
  h.update(config_hash);
  auto put = [&](double v) { h.update(&v, sizeof v); };
  for (const auto& r : diagnostics) {
    h.update(&r.epoch, sizeof r.epoch);
    for (double v : {r.w_st, r.w_sp, r.w_tp, r.silhouette_pretrain, r.acc_source, r.acc_target}) put(v);
  }
  for (const auto& s : losses) {
    h.update(&s.epoch, sizeof s.epoch);
    h.update(&s.step, sizeof s.step);
    for (double v : {s.loss.baseline, s.loss.source, s.loss.pretrain, s.loss.sem, s.loss.feat, s.loss.total}) put(v);
  }
  for (const auto& [k, v] : final_accuracy) {
    h.update(k);
    put(v);
  }
  for (const auto& [k, v] : metrics) {
    h.update(k);
    put(v);
  }
  for (const auto& c : selected_classes) h.update(c);
  return h.digest();
}

// ---------------------------------------------------------------------------
// Data

Domains load_domains(const RunConfig& cfg) {
  Domains d;
  if (cfg.source_dir.empty() || cfg.target_dir.empty() || cfg.pretrain_dir.empty()) {
    ToyBenchmark toy = generate_toy_benchmark(cfg.toy);
    d.source = std::move(toy.source);
    d.target = std::move(toy.target);
    d.pretrain = std::move(toy.pretrain);
  }
  if (!cfg.source_dir.empty()) d.source = load_image_folder(cfg.source_dir, DomainRole::source, cfg.image_side);
  if (!cfg.target_dir.empty()) d.target = load_image_folder(cfg.target_dir, DomainRole::target, cfg.image_side);
  if (!cfg.pretrain_dir.empty()) d.pretrain = load_image_folder(cfg.pretrain_dir, DomainRole::pretrain, cfg.image_side);
  if (d.source.class_set() != d.target.class_set()) {
    throw ValidationError("source and target datasets must share one class set");
  }
  return d;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent streams so that switching one consumer on or off leaves the
// others untouched.
enum Stream : std::uint64_t {
  kModelInit = 1,
  kPrimaryOrder,
  kPretrainSampler,
  kSourceSampler,
  kLambda,
  kPretrainOrder,
  kDiscriminator,
  kProbe,
  kSynthesis,
};

std::uint64_t stream_seed(std::uint64_t seed, Stream stream) { return splitmix(splitmix(seed) ^ stream); }

std::vector<int> labels_of(const std::vector<int>& truth, std::span<const int> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(truth[static_cast<std::size_t>(i)]);
  return out;
}

double pretrain_accuracy(const ModelBundle& bundle, const LabeledDataset& data) {
  const std::vector<int> truth = data.ground_truth();
  if (truth.empty() || !bundle.has_pretrain_head()) return std::numeric_limits<double>::quiet_NaN();
  NoGradGuard guard;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += 256) {
    std::vector<int> idx;
    for (std::size_t i = begin; i < std::min(data.size(), begin + 256); ++i) idx.push_back(static_cast<int>(i));
    const Tensor logits = bundle.pretrain_logits(bundle.eval_features(Var::constant(data.images(idx)))).value();
    const std::vector<int> pred = argmax_rows(logits);
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == truth[static_cast<std::size_t>(idx[k])];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

class Runner {
 public:
  explicit Runner(const RunConfig& cfg) : cfg_(cfg), out_dir_(cfg.output_dir) {
    report_.run_id = cfg.effective_run_id();
    report_.recipe = cfg.recipe;
    report_.config_hash = hex_digest(cfg.hash());
  }

  RunReport execute() {
    const auto start = std::chrono::steady_clock::now();
    domains_ = load_domains(cfg_);
    if (cfg_.save_checkpoints) std::filesystem::create_directories(out_dir_);
    switch (cfg_.recipe) {
      case Recipe::pretrain: run_pretrain(); break;
      case Recipe::uda: run_uda(); break;
      case Recipe::sfuda_step1: run_step1(); break;
      case Recipe::sfuda_step2: run_step2(); break;
      case Recipe::noisy_probe: run_probe(); break;
      case Recipe::synthesize: run_synthesis(); break;
    }
    report_.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return std::move(report_);
  }

 private:
  std::filesystem::path artifact(const std::string& name) const {
    return out_dir_ / (report_.run_id + "." + name);
  }

  DomainSets eval_sets() const { return {&domains_.source, &domains_.target, &domains_.pretrain}; }

  void track(const ModelBundle& bundle, int epoch) {
    if (cfg_.track) report_.diagnostics.push_back(track_epoch(bundle, eval_sets(), cfg_.diag, epoch));
  }

  void check_finite(const ObjectiveValue& v, const ModelBundle& bundle, int epoch, int step) {
    if (std::isfinite(v.parts.total)) return;
    std::string where = "epoch " + std::to_string(epoch) + " step " + std::to_string(step);
    if (cfg_.save_checkpoints) {
      const auto path = artifact("last_good.ckpt");
      bundle.save(path);
      throw RunError("non-finite loss at " + where + "; last good checkpoint: " + path.string());
    }
    throw RunError("non-finite loss at " + where);
  }

  void finish(const ModelBundle& bundle) {
    report_.final_accuracy["source"] = accuracy(bundle, domains_.source);
    report_.final_accuracy["target"] = accuracy(bundle, domains_.target);
    if (bundle.has_pretrain_head() && !selected_.empty()) {
      report_.final_accuracy["pretrain"] = pretrain_accuracy(bundle, selected_);
    }
  }

  // Pre-training data restricted to the selected classes.
  void select_classes() {
    if (cfg_.taxonomy.empty()) {
      selected_ = domains_.pretrain;
      report_.selected_classes = selected_.class_set();
      return;
    }
    Taxonomy tax = Taxonomy::load_source(cfg_.taxonomy);
    if (!cfg_.class_mapping.empty()) tax.load_class_mapping(cfg_.class_mapping);
    const SelectionResult sel =
        select_pretrain_classes(tax, domains_.pretrain.class_set(), domains_.target.class_set(), cfg_.tau);
    if (sel.empty()) throw ValidationError("class selection kept no pre-training classes at tau=" + format_double(cfg_.tau));
    const std::optional<int> cap = cfg_.per_class_cap >= 0 ? std::optional<int>(cfg_.per_class_cap) : std::nullopt;
    selected_ = build_pretrain_subset(domains_.pretrain, sel, cap);
    report_.selected_classes = sel.selected;
    report_.metrics["selected_classes"] = static_cast<double>(sel.selected.size());
    if (cfg_.save_checkpoints) {
      std::ofstream csv(artifact("selection.csv"));
      write_selection_csv(sel, csv);
      report_.artifacts["selection"] = artifact("selection.csv").string();
    }
  }

  ModelConfig model_config(int pretrain_classes) const {
    ModelConfig m = cfg_.model;
    m.in_channels = domains_.source.image_shape()[0];
    m.image_side = cfg_.image_side;
    m.target_classes = domains_.source.num_classes();
    m.pretrain_classes = pretrain_classes;
    return m;
  }

  // Stand-in for an ImageNet backbone: f and h_p trained on the full
  // pre-training domain.
  ModelBundle pretrained_model() {
    if (!cfg_.pretrained_checkpoint.empty() && std::filesystem::exists(cfg_.pretrained_checkpoint)) {
      ModelBundle b = ModelBundle::load(cfg_.pretrained_checkpoint);
      const ModelConfig& m = b.config();
      if (m.image_side != cfg_.image_side || m.pretrain_classes != domains_.pretrain.num_classes()) {
        throw ValidationError("pretrained checkpoint " + cfg_.pretrained_checkpoint +
                              " does not match the configured data");
      }
      // Same metric as a fresh pre-training run, so reports do not depend
      // on whether the checkpoint was cached.
      report_.metrics["pretrain_accuracy"] = pretrain_accuracy(b, domains_.pretrain);
      return b;
    }
    ModelConfig m = model_config(domains_.pretrain.num_classes());
    m.backbone_pretrained = false;
    ModelBundle bundle(m, stream_seed(cfg_.pretrain_seed, kModelInit));
    bundle.pretrain_class_names = domains_.pretrain.class_set();
    bundle.target_class_names = domains_.source.class_set();
    Sgd opt = make_optimizer(bundle, cfg_.sgd);
    const std::vector<int> truth = domains_.pretrain.ground_truth();
    const long per_epoch = static_cast<long>((domains_.pretrain.size() + cfg_.batch_size - 1) / cfg_.batch_size);
    const long total = std::max(1L, per_epoch * cfg_.pretrain_epochs);
    long step = 0;
    bundle.set_mode(Mode::train);
    for (int epoch = 1; epoch <= cfg_.pretrain_epochs; ++epoch) {
      for (const auto& idx : shuffled_batches(domains_.pretrain.size(), cfg_.batch_size,
                                              stream_seed(cfg_.pretrain_seed + epoch, kPretrainOrder))) {
        if (idx.size() < 2) continue;
        opt.zero_grad();
        const Var loss = loss_pretrain(bundle, domains_.pretrain.images(idx), labels_of(truth, idx));
        if (!std::isfinite(loss.item())) throw RunError("non-finite loss while pre-training");
        loss.backward();
        opt.step(step++, total);
      }
    }
    bundle.set_mode(Mode::eval);
    const double acc = pretrain_accuracy(bundle, domains_.pretrain);
    report_.metrics["pretrain_accuracy"] = acc;
    spdlog::info("pre-trained backbone: {:.3f} accuracy on the pre-training domain", acc);
    if (cfg_.save_checkpoints) {
      const auto path = cfg_.pretrained_checkpoint.empty() ? out_dir_ / "pretrained.ckpt"
                                                           : std::filesystem::path(cfg_.pretrained_checkpoint);
      if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
      bundle.save(path);
      report_.artifacts["pretrained_checkpoint"] = path.string();
    }
    return bundle;
  }

  // Pre-trained backbone with a fresh bottleneck, h and h_p (over the
  // selected classes).
  ModelBundle adaptation_model() {
    ModelBundle base = pretrained_model();
    ModelBundle b = base;
    const std::uint64_t s = stream_seed(cfg_.seed, kModelInit);
    b.set_backbone_pretrained(true);
    b.reset_bottleneck(s);
    b.reset_target_head(domains_.source.num_classes(), s);
    b.reset_pretrain_head(selected_.num_classes(), s);
    b.target_class_names = domains_.source.class_set();
    b.pretrain_class_names = selected_.class_set();
    return b;
  }

  void run_pretrain() {
    selected_ = domains_.pretrain;
    ModelBundle b = pretrained_model();
    report_.final_accuracy["pretrain"] = report_.metrics["pretrain_accuracy"];
    (void)b;
  }

  void run_step1() {
    select_classes();
    ModelBundle bundle = adaptation_model();
    Sgd opt = make_optimizer(bundle, cfg_.sgd);
    const LabeledDataset& src = domains_.source;
    const std::vector<int> p_truth = selected_.ground_truth();
    CyclicSampler p_sampler(selected_.size(), stream_seed(cfg_.seed, kPretrainSampler));
    const bool use_p = cfg_.trida.use_pretrain;

    track(bundle, 0);
    const long per_epoch = static_cast<long>((src.size() + cfg_.batch_size - 1) / cfg_.batch_size);
    const long total = std::max(1L, per_epoch * cfg_.epochs);
    long step = 0;
    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      bundle.set_mode(Mode::train);
      for (const auto& idx : shuffled_batches(src.size(), cfg_.batch_size, stream_seed(cfg_.seed + epoch, kPrimaryOrder))) {
        if (idx.size() < 2) continue;
        MixedBatch p;
        if (use_p) {
          const std::vector<int> pidx = p_sampler.draw(idx.size());
          p.x_p = selected_.images(pidx);
          p.y_p = labels_of(p_truth, pidx);
        }
        opt.zero_grad();
        const ObjectiveValue v =
            objective_sfuda_step1(bundle, src.images(idx), src.labels(idx), use_p ? &p : nullptr, cfg_.trida, cfg_.smoothing);
        check_finite(v, bundle, epoch, static_cast<int>(step));
        v.total.backward();
        opt.step(step, total);
        report_.losses.push_back({epoch, static_cast<int>(step), v.parts});
        ++step;
      }
      bundle.set_mode(Mode::eval);
      track(bundle, epoch);
    }
    finish(bundle);
    if (cfg_.save_checkpoints) {
      const auto path = artifact("source.ckpt");
      bundle.save(path);
      report_.artifacts["source_checkpoint"] = path.string();
    }
  }

  // Shared by sfuda_step2 and uda: builds the mixed batch for this step.
  std::optional<MixedBatch> trida_batch(const Tensor& x_t, const std::vector<int>& pseudo, CyclicSampler& sampler,
                                        std::mt19937_64& lambda_rng) {
    if (!cfg_.trida.active()) return std::nullopt;
    const std::vector<int> pidx = sampler.draw(static_cast<std::size_t>(x_t.rows()));
    const double lam = sample_lambda(cfg_.trida.alpha, lambda_rng);
    return mix_batch(selected_.images(pidx), labels_of(selected_.ground_truth(), pidx), x_t, pseudo, lam);
  }

  void finish_adaptation(const ModelBundle& bundle, const PseudoLabelState* pseudo) {
    finish(bundle);
    if (!cfg_.save_checkpoints) return;
    const ModelBundle stripped = bundle.strip_pretrain_head();
    const auto path = artifact("final.ckpt");
    stripped.save(path);
    report_.artifacts["final_checkpoint"] = path.string();
    const double reloaded = accuracy(ModelBundle::load(path), domains_.target);
    const double reported = report_.final_accuracy["target"];
    if (!(reloaded == reported || (std::isnan(reloaded) && std::isnan(reported)))) {
      throw RunError("reloaded final checkpoint does not reproduce the reported target accuracy");
    }
    if (pseudo) {
      std::ofstream csv(artifact("pseudo_labels.csv"));
      write_pseudo_labels_csv(*pseudo, csv);
      report_.artifacts["pseudo_labels"] = artifact("pseudo_labels.csv").string();
    }
  }

  void run_step2() {
    if (!std::filesystem::exists(cfg_.source_checkpoint)) {
      throw ValidationError("source checkpoint '" + cfg_.source_checkpoint + "' not found; run sfuda_step1 first");
    }
    ModelBundle bundle = ModelBundle::load(cfg_.source_checkpoint);
    const LabeledDataset target = domains_.target.without_labels();
    if (bundle.config().target_classes != target.num_classes()) {
      throw ValidationError("source checkpoint head does not match the target class count");
    }
    if (cfg_.trida.active()) {
      select_classes();
      if (!bundle.has_pretrain_head() || bundle.config().pretrain_classes != selected_.num_classes()) {
        throw ValidationError("TriDA terms need the checkpoint's pre-training head over the selected classes");
      }
    } else {
      selected_ = {};
    }
    const ObjectiveKind kind = cfg_.baseline.empty() ? ObjectiveKind::sfuda_shot_like : parse_objective_kind(cfg_.baseline);
    if (kind == ObjectiveKind::source_only) throw ValidationError("sfuda_step2 has no source data for a source_only baseline");
    auto baseline = make_objective(kind, bundle.config().feature_dim(), stream_seed(cfg_.seed, kDiscriminator),
                                   kind == ObjectiveKind::sfuda_shot_like
                                       ? std::map<std::string, double>{{"w_pl", cfg_.w_pl}}
                                       : std::map<std::string, double>{{"disc_hidden", cfg_.disc_hidden}});
    const std::vector<std::string> frozen = cfg_.freeze_head ? std::vector<std::string>{"head."} : std::vector<std::string>{};
    const auto aux = baseline->auxiliary_parameters();
    Sgd opt = make_optimizer(bundle, cfg_.sgd, aux, frozen);

    CyclicSampler p_sampler(cfg_.trida.active() ? selected_.size() : 1, stream_seed(cfg_.seed, kPretrainSampler));
    std::mt19937_64 lambda_rng(stream_seed(cfg_.seed, kLambda));
    PseudoLabelState pseudo;

    bundle.set_mode(Mode::eval);
    track(bundle, 0);
    const long per_epoch = static_cast<long>((target.size() + cfg_.batch_size - 1) / cfg_.batch_size);
    const long total = std::max(1L, per_epoch * cfg_.epochs);
    long step = 0;
    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      bundle.set_mode(Mode::eval);
      pseudo = cluster_pseudo_labels(bundle, target, epoch, pseudo.labels.empty() ? nullptr : &pseudo);
      bundle.set_mode(Mode::train);
      for (const auto& idx : shuffled_batches(target.size(), cfg_.batch_size, stream_seed(cfg_.seed + epoch, kPrimaryOrder))) {
        if (idx.size() < 2) continue;
        const Tensor x_t = target.images(idx);
        const std::vector<int> y_hat = labels_of(pseudo.labels, idx);
        const std::optional<MixedBatch> mixed = trida_batch(x_t, y_hat, p_sampler, lambda_rng);
        opt.zero_grad();
        const double progress = static_cast<double>(step) / static_cast<double>(total);
        const ObjectiveValue v =
            objective_sfuda_step2(bundle, x_t, y_hat, mixed ? &*mixed : nullptr, *baseline, cfg_.trida, progress);
        check_finite(v, bundle, epoch, static_cast<int>(step));
        v.total.backward();
        opt.step(step, total);
        report_.losses.push_back({epoch, static_cast<int>(step), v.parts});
        ++step;
      }
      bundle.set_mode(Mode::eval);
      track(bundle, epoch);
    }
    finish_adaptation(bundle, pseudo.labels.empty() ? nullptr : &pseudo);
  }

  void run_uda() {
    select_classes();
    ModelBundle bundle = adaptation_model();
    const ObjectiveKind kind = cfg_.baseline.empty() ? ObjectiveKind::uda_adversarial : parse_objective_kind(cfg_.baseline);
    std::map<std::string, double> hyper;
    if (kind == ObjectiveKind::uda_adversarial) hyper = {{"disc_hidden", cfg_.disc_hidden}};
    if (kind == ObjectiveKind::sfuda_shot_like) hyper = {{"w_pl", cfg_.w_pl}};
    if (kind == ObjectiveKind::source_only) hyper = {{"smoothing", cfg_.smoothing}};
    auto uda_loss = make_objective(kind, bundle.config().feature_dim(), stream_seed(cfg_.seed, kDiscriminator), hyper);
    const auto aux = uda_loss->auxiliary_parameters();
    Sgd opt = make_optimizer(bundle, cfg_.sgd, aux);

    const LabeledDataset& src = domains_.source;
    const LabeledDataset target = domains_.target.without_labels();
    CyclicSampler s_sampler(src.size(), stream_seed(cfg_.seed, kSourceSampler));
    CyclicSampler p_sampler(selected_.size(), stream_seed(cfg_.seed, kPretrainSampler));
    std::mt19937_64 lambda_rng(stream_seed(cfg_.seed, kLambda));
    const std::vector<int> s_truth = src.ground_truth();
    const bool need_pseudo = cfg_.trida.active() || kind == ObjectiveKind::sfuda_shot_like;
    PseudoLabelState pseudo;

    bundle.set_mode(Mode::eval);
    track(bundle, 0);
    const long per_epoch = static_cast<long>((target.size() + cfg_.batch_size - 1) / cfg_.batch_size);
    const long total = std::max(1L, per_epoch * cfg_.epochs);
    long step = 0;
    for (int epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      if (need_pseudo) {
        bundle.set_mode(Mode::eval);
        pseudo = cluster_pseudo_labels(bundle, target, epoch, pseudo.labels.empty() ? nullptr : &pseudo);
      }
      bundle.set_mode(Mode::train);
      for (const auto& idx : shuffled_batches(target.size(), cfg_.batch_size, stream_seed(cfg_.seed + epoch, kPrimaryOrder))) {
        if (idx.size() < 2) continue;
        const std::vector<int> sidx = s_sampler.draw(idx.size());
        const Tensor x_t = target.images(idx);
        const std::vector<int> y_hat = need_pseudo ? labels_of(pseudo.labels, idx) : std::vector<int>(idx.size(), 0);
        const std::optional<MixedBatch> mixed = trida_batch(x_t, y_hat, p_sampler, lambda_rng);
        opt.zero_grad();
        const double progress = static_cast<double>(step) / static_cast<double>(total);
        const ObjectiveValue v = objective_uda(bundle, src.images(sidx), labels_of(s_truth, sidx), x_t, y_hat,
                                               mixed ? &*mixed : nullptr, *uda_loss, cfg_.trida, progress, cfg_.smoothing);
        check_finite(v, bundle, epoch, static_cast<int>(step));
        v.total.backward();
        opt.step(step, total);
        report_.losses.push_back({epoch, static_cast<int>(step), v.parts});
        ++step;
      }
      bundle.set_mode(Mode::eval);
      track(bundle, epoch);
    }
    finish_adaptation(bundle, need_pseudo ? &pseudo : nullptr);
  }

  void run_probe() {
    selected_ = domains_.pretrain;
    ModelBundle bundle = pretrained_model();
    bundle.set_backbone_pretrained(true);
    bundle.reset_target_head(domains_.source.num_classes(), stream_seed(cfg_.seed, kModelInit));
    bundle.target_class_names = domains_.source.class_set();
    ProbeOptions opt;
    opt.noise_fraction = cfg_.noise_fraction;
    opt.epochs = cfg_.epochs;
    opt.seed = stream_seed(cfg_.seed, kProbe);
    opt.with_pretrain_loss = cfg_.probe_with_pretrain_loss;
    opt.batch_size = cfg_.batch_size;
    opt.smoothing = 0.0;
    opt.sgd = cfg_.sgd;
    opt.diag = cfg_.diag;
    ProbeResult result = noisy_label_probe(bundle, domains_.source, eval_sets(), opt);
    report_.diagnostics = std::move(result.records);
    report_.metrics["corrupted_labels"] = static_cast<double>(result.corrupted.size());
    if (!report_.diagnostics.empty()) {
      report_.final_accuracy["source"] = report_.diagnostics.back().acc_source;
      report_.final_accuracy["target"] = report_.diagnostics.back().acc_target;
      report_.metrics["final_silhouette_pretrain"] = report_.diagnostics.back().silhouette_pretrain;
    }
  }

  void run_synthesis() {
    selected_ = domains_.pretrain;
    const ModelBundle bundle = pretrained_model();
    std::optional<TableEmbeddingProvider> provider;
    ClipScoring clip;
    if (!cfg_.embeddings.empty()) {
      provider.emplace(TableEmbeddingProvider::load(cfg_.embeddings));
      clip.provider = &*provider;
      clip.classes = bundle.pretrain_class_names;
    }
    std::vector<SynthesisResult> results;
    SynthesisConfig sc = cfg_.synth;
    double confidence = 0.0;
    std::size_t count = 0;
    for (int c = 0; c < bundle.config().pretrain_classes; ++c) {
      sc.seed = stream_seed(cfg_.seed + static_cast<std::uint64_t>(c), kSynthesis);
      results.push_back(synthesize_class_images(bundle, c, sc, clip));
      for (double p : results.back().confidence) {
        confidence += p;
        ++count;
      }
      report_.metrics["min_confidence." + bundle.pretrain_class_names[static_cast<std::size_t>(c)]] =
          *std::min_element(results.back().confidence.begin(), results.back().confidence.end());
    }
    report_.metrics["mean_confidence"] = count ? confidence / static_cast<double>(count) : 0.0;
    if (cfg_.save_checkpoints) {
      const auto dir = out_dir_ / (report_.run_id + ".images");
      write_synthesized_dataset(dir, bundle.pretrain_class_names, results, sc);
      report_.artifacts["synthesized_images"] = dir.string();
    }
  }

  const RunConfig& cfg_;
  std::filesystem::path out_dir_;
  RunReport report_;
  Domains domains_;
  LabeledDataset selected_;
};

}  // namespace

RunReport run(const RunConfig& cfg) {
  cfg.validate();
  Runner runner(cfg);
  return runner.execute();
}

std::vector<RunReport> run_repeats(const RunConfig& cfg, int repeats) {
  if (repeats <= 0) throw ValidationError("repeats must be positive");
  std::vector<RunReport> out;
  for (int r = 0; r < repeats; ++r) {
    RunConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(r);
    if (!cfg.run_id.empty() && repeats > 1) c.run_id = cfg.run_id + "_r" + std::to_string(r);
    out.push_back(run(c));
  }
  return out;
}

std::vector<std::filesystem::path> export_report(const RunReport& report, const std::filesystem::path& dir,
                                                 const RunConfig* cfg) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const std::string& id = report.run_id;
  written.push_back(write_diagnostics_csv(report.diagnostics, dir, id));

  const auto losses = dir / ("losses_" + id + ".csv");
  {
    std::ofstream out(losses, std::ios::binary);
    if (!out) throw IoError("cannot write " + losses.string());
    out << "epoch,step,baseline,source,pretrain,sem,feat,total\n";
    for (const auto& s : report.losses) {
      out << s.epoch << ',' << s.step << ',' << format_double(s.loss.baseline) << ',' << format_double(s.loss.source)
          << ',' << format_double(s.loss.pretrain) << ',' << format_double(s.loss.sem) << ','
          << format_double(s.loss.feat) << ',' << format_double(s.loss.total) << '\n';
    }
  }
  written.push_back(losses);

  auto column = [&](double DiagnosticsRecord::*member) {
    std::vector<double> y;
    for (const auto& r : report.diagnostics) y.push_back(r.*member);
    return y;
  };
  const std::vector<std::pair<std::string, std::vector<ChartSeries>>> charts = {
      {"wasserstein", {{"W(s,t)", column(&DiagnosticsRecord::w_st)},
                       {"W(s,p)", column(&DiagnosticsRecord::w_sp)},
                       {"W(t,p)", column(&DiagnosticsRecord::w_tp)}}},
      {"w_st", {{"W(s,t)", column(&DiagnosticsRecord::w_st)}}},
      {"w_sp", {{"W(s,p)", column(&DiagnosticsRecord::w_sp)}}},
      {"w_tp", {{"W(t,p)", column(&DiagnosticsRecord::w_tp)}}},
      {"silhouette", {{"silhouette (pre-training)", column(&DiagnosticsRecord::silhouette_pretrain)}}},
      {"accuracy", {{"source", column(&DiagnosticsRecord::acc_source)},
                    {"target", column(&DiagnosticsRecord::acc_target)}}},
  };
  for (const auto& [name, series] : charts) {
    const auto path = dir / (name + "_" + id + ".svg");
    write_line_chart_svg(path, name + " (" + id + ")", "epoch", series);
    written.push_back(path);
  }

  KeyValueFile summary;
  summary.set("run_id", id);
  summary.set("recipe", to_string(report.recipe));
  summary.set("config_hash", report.config_hash);
  summary.set("report_hash", hex_digest(report.hash()));
  summary.set("wall_clock_seconds", report.wall_clock_seconds);
  for (const auto& [k, v] : report.final_accuracy) summary.set("final_accuracy." + k, v);
  for (const auto& [k, v] : report.metrics) summary.set("metric." + k, v);
  for (const auto& [k, v] : report.artifacts) summary.set("artifact." + k, v);
  summary.set("selected_classes", join(report.selected_classes, ','));
  const auto summary_path = dir / ("summary_" + id + ".txt");
  summary.write(summary_path);
  written.push_back(summary_path);

  if (cfg) {
    const auto config_path = dir / ("config_" + id + ".txt");
    cfg->to_kv().write(config_path);
    written.push_back(config_path);
  }
  return written;
}

}  // namespace trida
