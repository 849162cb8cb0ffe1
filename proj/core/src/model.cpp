#include "trida/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <type_traits>

#include "trida/errors.hpp"
#include "trida/hash.hpp"
#include "trida/kvfile.hpp"

namespace trida {

static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes little-endian doubles");

namespace {

constexpr double kNormEps = 1e-5;
constexpr const char* kCheckpointMagic = "TRIDA-CHECKPOINT 1";

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

std::mt19937_64 layer_rng(std::uint64_t seed, std::uint64_t layer) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(layer)};
  return std::mt19937_64(seq);
}

LinearLayer make_linear(int in, int out, bool weight_norm, std::mt19937_64& rng) {
  // Xavier-normal weights, zero bias.
  LinearLayer layer;
  const double stddev = std::sqrt(2.0 / (in + out));
  Tensor w = normal_tensor({out, in}, stddev, rng);
  if (weight_norm) {
    Tensor g({out});
    auto m = w.matrix();
    for (int o = 0; o < out; ++o) g[static_cast<std::size_t>(o)] = m.row(o).norm();
    layer.gain = Var::parameter(std::move(g));
  }
  layer.weight = Var::parameter(std::move(w));
  layer.bias = Var::parameter(Tensor({out}, 0.0));
  return layer;
}

NormLayer make_norm(int channels) {
  return NormLayer{Var::parameter(Tensor({channels}, 1.0)), Var::parameter(Tensor({channels}, 0.0)),
                   NormStats{Tensor({channels}, 0.0), Tensor({channels}, 1.0)}};
}

Var clone_param(const Var& v) { return v.defined() ? Var::parameter(v.value()) : Var(); }

void clone_linear(LinearLayer& layer) {
  layer.weight = clone_param(layer.weight);
  layer.bias = clone_param(layer.bias);
  layer.gain = clone_param(layer.gain);
}

void clone_norm(NormLayer& layer) {
  layer.gamma = clone_param(layer.gamma);
  layer.beta = clone_param(layer.beta);
}

void append_linear(std::vector<std::pair<std::string, Var>>& out, const std::string& prefix, const LinearLayer& l) {
  if (!l.weight.defined()) return;
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
  if (l.gain.defined()) out.emplace_back(prefix + ".gain", l.gain);
}

void append_norm(std::vector<std::pair<std::string, Var>>& out, const std::string& prefix, const NormLayer& n) {
  out.emplace_back(prefix + ".gamma", n.gamma);
  out.emplace_back(prefix + ".beta", n.beta);
}

}  // namespace

void ModelConfig::validate() const {
  if (in_channels <= 0) throw ValidationError("in_channels must be positive");
  if (image_side <= 0) throw ValidationError("image_side must be positive");
  if (bottleneck_width < 0) throw ValidationError("bottleneck_width must be non-negative");
  if (target_classes <= 0) throw ValidationError("target_classes must be positive");
  if (pretrain_classes < 0) throw ValidationError("pretrain_classes must be non-negative");
  if (backbone == BackboneKind::conv) {
    if (conv_channels.empty()) throw ValidationError("conv backbone needs at least one block");
    for (int c : conv_channels) {
      if (c <= 0) throw ValidationError("conv channel counts must be positive");
    }
  }
}

int ModelConfig::backbone_output_dim() const {
  if (backbone == BackboneKind::identity) return in_channels * image_side * image_side;
  int side = image_side;
  for (std::size_t i = 0; i < conv_channels.size(); ++i) side = (side - 1) / 2 + 1;  // k3, s2, p1
  return conv_channels.back() * side * side;
}

int ModelConfig::feature_dim() const { return bottleneck_width > 0 ? bottleneck_width : backbone_output_dim(); }

std::string ModelConfig::canonical() const {
  KeyValueFile kv;
  kv.set("backbone", backbone == BackboneKind::conv ? "conv" : "identity");
  kv.set("in_channels", in_channels);
  kv.set("image_side", image_side);
  std::vector<std::string> channels;
  for (int c : conv_channels) channels.push_back(std::to_string(c));
  kv.set("conv_channels", join(channels, ','));
  kv.set("bottleneck_width", bottleneck_width);
  kv.set("backbone_pretrained", backbone_pretrained ? 1 : 0);
  kv.set("weight_norm_head", weight_norm_head ? 1 : 0);
  kv.set("target_classes", target_classes);
  kv.set("pretrain_classes", pretrain_classes);
  std::ostringstream out;
  kv.write(out);
  return out.str();
}

Var LinearLayer::forward(const Var& x) const {
  if (gain.defined()) return ops::linear(x, ops::weight_norm_rows(weight, gain), bias);
  return ops::linear(x, weight, bias);
}

ModelBundle::ModelBundle(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::uint64_t layer = 0;
  if (config_.backbone == BackboneKind::conv) {
    int in = config_.in_channels;
    for (int out : config_.conv_channels) {
      auto rng = layer_rng(seed, layer++);
      // Kaiming-normal for ReLU blocks.
      const double stddev = std::sqrt(2.0 / (in * 9));
      blocks_.push_back(ConvBlock{Var::parameter(normal_tensor({out, in, 3, 3}, stddev, rng)), make_norm(out)});
      in = out;
    }
  }
  reset_bottleneck(seed);
  reset_target_head(config_.target_classes, seed);
  if (config_.pretrain_classes > 0) reset_pretrain_head(config_.pretrain_classes, seed);
}

ModelBundle::ModelBundle(const ModelBundle& other)
    : target_class_names(other.target_class_names),
      pretrain_class_names(other.pretrain_class_names),
      config_(other.config_),
      mode_(other.mode_),
      blocks_(other.blocks_),
      bottleneck_(other.bottleneck_),
      bottleneck_norm_(other.bottleneck_norm_),
      target_head_(other.target_head_),
      pretrain_head_(other.pretrain_head_) {
  deep_copy_parameters();
}

ModelBundle& ModelBundle::operator=(const ModelBundle& other) {
  if (this != &other) {
    ModelBundle copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void ModelBundle::deep_copy_parameters() {
  for (auto& b : blocks_) {
    b.weight = clone_param(b.weight);
    clone_norm(b.norm);
  }
  clone_linear(bottleneck_);
  if (bottleneck_norm_.gamma.defined()) clone_norm(bottleneck_norm_);
  clone_linear(target_head_);
  clone_linear(pretrain_head_);
}

void ModelBundle::reset_bottleneck(std::uint64_t seed) {
  if (config_.bottleneck_width == 0) {
    bottleneck_ = {};
    bottleneck_norm_ = {};
    return;
  }
  auto rng = layer_rng(seed, 100);
  bottleneck_ = make_linear(config_.backbone_output_dim(), config_.bottleneck_width, false, rng);
  bottleneck_norm_ = make_norm(config_.bottleneck_width);
}

void ModelBundle::reset_target_head(int classes, std::uint64_t seed) {
  if (classes <= 0) throw ValidationError("target head needs at least one class");
  auto rng = layer_rng(seed, 200);
  target_head_ = make_linear(config_.feature_dim(), classes, config_.weight_norm_head, rng);
  config_.target_classes = classes;
}

void ModelBundle::reset_pretrain_head(int classes, std::uint64_t seed) {
  if (classes <= 0) throw ValidationError("pre-training head needs at least one class");
  auto rng = layer_rng(seed, 300);
  pretrain_head_ = make_linear(config_.feature_dim(), classes, config_.weight_norm_head, rng);
  config_.pretrain_classes = classes;
}

template <class Self>
Var ModelBundle::forward_impl(Self& self, const Var& images, bool training, std::vector<Var>* norm_inputs) {
  constexpr bool kMutable = !std::is_const_v<Self>;
  const Shape& s = images.shape();
  const ModelConfig& cfg = self.config_;
  if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_side || s[3] != cfg.image_side) {
    throw ValidationError("model expects N x " + std::to_string(cfg.in_channels) + " x " +
                          std::to_string(cfg.image_side) + " x " + std::to_string(cfg.image_side) + " input, got " +
                          shape_string(s));
  }
  auto norm = [&](auto& layer, const Var& z) {
    if (norm_inputs) norm_inputs->push_back(z);
    NormStats* update = nullptr;
    if constexpr (kMutable) {
      if (training) update = &layer.running;
    }
    return ops::batch_norm(z, layer.gamma, layer.beta, layer.running, training, kNormEps, update);
  };

  Var h = images;
  for (auto& block : self.blocks_) {
    h = ops::relu(norm(block.norm, ops::conv2d(h, block.weight, Var(), 2, 1)));
  }
  h = ops::flatten(h);
  if (cfg.bottleneck_width > 0) h = norm(self.bottleneck_norm_, self.bottleneck_.forward(h));
  return h;
}

Var ModelBundle::forward_features(const Var& images) {
  return forward_impl(*this, images, mode_ == Mode::train, nullptr);
}

Var ModelBundle::eval_features(const Var& images, std::vector<Var>* norm_inputs) const {
  return forward_impl(*this, images, false, norm_inputs);
}

Var ModelBundle::target_logits(const Var& features) const { return target_head_.forward(features); }

Var ModelBundle::pretrain_logits(const Var& features) const {
  if (!has_pretrain_head()) throw RunError("pre-training head removed");
  return pretrain_head_.forward(features);
}

Tensor ModelBundle::classify_target(const Tensor& images) {
  NoGradGuard guard;
  return target_logits(forward_features(images)).value();
}

Tensor ModelBundle::classify_pretrain(const Tensor& images) {
  if (!has_pretrain_head()) throw RunError("pre-training head removed");
  NoGradGuard guard;
  return pretrain_logits(forward_features(images)).value();
}

std::pair<Tensor, Tensor> ModelBundle::classify_joint(const Tensor& images) {
  if (!has_pretrain_head()) throw RunError("pre-training head removed");
  NoGradGuard guard;
  const Var f = forward_features(images);
  return {target_logits(f).value(), pretrain_logits(f).value()};
}

ModelBundle ModelBundle::strip_pretrain_head() const {
  ModelBundle copy(*this);
  copy.pretrain_head_ = {};
  copy.config_.pretrain_classes = 0;
  copy.pretrain_class_names.clear();
  return copy;
}

std::vector<std::pair<std::string, Var>> ModelBundle::named_parameters() const {
  std::vector<std::pair<std::string, Var>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i);
    out.emplace_back(prefix + ".conv", blocks_[i].weight);
    append_norm(out, prefix + ".norm", blocks_[i].norm);
  }
  if (config_.bottleneck_width > 0) {
    append_linear(out, "bottleneck", bottleneck_);
    append_norm(out, "bottleneck.norm", bottleneck_norm_);
  }
  append_linear(out, "head", target_head_);
  append_linear(out, "pretrain_head", pretrain_head_);
  return out;
}

std::size_t ModelBundle::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : named_parameters()) n += p.value().size();
  return n;
}

ParameterGroups ModelBundle::parameter_groups() const {
  ParameterGroups groups;
  for (const auto& [name, p] : named_parameters()) {
    const bool backbone = name.starts_with("block");
    if (backbone && config_.backbone_pretrained) {
      groups.backbone.push_back(p);
    } else {
      groups.new_layers.push_back(p);
    }
  }
  return groups;
}

std::vector<std::pair<std::string, NormLayer*>> ModelBundle::norm_layers() {
  std::vector<std::pair<std::string, NormLayer*>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) out.emplace_back("block" + std::to_string(i) + ".norm", &blocks_[i].norm);
  if (config_.bottleneck_width > 0) out.emplace_back("bottleneck.norm", &bottleneck_norm_);
  return out;
}

std::vector<std::pair<std::string, const NormLayer*>> ModelBundle::norm_layers() const {
  std::vector<std::pair<std::string, const NormLayer*>> out;
  for (auto& [name, layer] : const_cast<ModelBundle*>(this)->norm_layers()) out.emplace_back(name, layer);
  return out;
}

std::vector<NamedNormStats> ModelBundle::normalization_stats() const {
  std::vector<NamedNormStats> out;
  for (const auto& [name, layer] : norm_layers()) out.push_back({name, &layer->running});
  return out;
}

std::uint64_t ModelBundle::state_hash() const {
  Fnv1a h;
  h.update(config_.canonical());
  for (const auto& [name, p] : named_parameters()) {
    h.update(name);
    h.update(p.value().values());
  }
  for (const auto& [name, layer] : norm_layers()) {
    h.update(name);
    h.update(layer->running.mean.values());
    h.update(layer->running.var.values());
  }
  return h.digest();
}

// Checkpoint layout:
//   line "TRIDA-CHECKPOINT 1"
//   `key = value` header (config, config_hash, class names, tensor count), then "---"
//   per tensor: "<name> <rank> <d0> ... <dk>\n" followed by the raw
//   little-endian float64 values and a newline.
// Tensors are every named parameter plus "<norm>.running_mean" and
// "<norm>.running_var" for each normalisation layer.
void ModelBundle::save(const std::filesystem::path& path) const {
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& [name, p] : named_parameters()) tensors.emplace_back(name, &p.value());
  for (const auto& [name, layer] : norm_layers()) {
    tensors.emplace_back(name + ".running_mean", &layer->running.mean);
    tensors.emplace_back(name + ".running_var", &layer->running.var);
  }

  const std::string canonical = config_.canonical();
  std::istringstream canonical_in(canonical);
  KeyValueFile header = KeyValueFile::parse(canonical_in);
  Fnv1a config_hash;
  config_hash.update(canonical);
  header.set("config_hash", hex_digest(config_hash.digest()));
  header.set("target_class_names", join(target_class_names, ','));
  header.set("pretrain_class_names", join(pretrain_class_names, ','));
  header.set("tensors", static_cast<long long>(tensors.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << kCheckpointMagic << '\n';
  header.write(out);
  out << "---\n";
  for (const auto& [name, t] : tensors) {
    out << name << ' ' << t->rank();
    for (int d : t->shape()) out << ' ' << d;
    out << '\n';
    out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    out << '\n';
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ModelBundle ModelBundle::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) throw IoError(path.string() + " is not a checkpoint");
  std::string header_text;
  while (std::getline(in, line) && line != "---") header_text += line + '\n';
  if (line != "---") throw IoError("truncated checkpoint header in " + path.string());
  std::istringstream header_in(header_text);
  const KeyValueFile header = KeyValueFile::parse(header_in);
  auto get_int = [&](const std::string& key) { return static_cast<int>(header.get_int(key)); };

  ModelConfig cfg;
  const std::string backbone = header.get("backbone");
  if (backbone == "conv") {
    cfg.backbone = BackboneKind::conv;
  } else if (backbone == "identity") {
    cfg.backbone = BackboneKind::identity;
  } else {
    throw IoError("unknown backbone '" + backbone + "' in checkpoint");
  }
  cfg.in_channels = get_int("in_channels");
  cfg.image_side = get_int("image_side");
  cfg.conv_channels.clear();
  for (const auto& c : split(header.get("conv_channels"), ',')) {
    if (!c.empty()) cfg.conv_channels.push_back(std::stoi(c));
  }
  cfg.bottleneck_width = get_int("bottleneck_width");
  cfg.backbone_pretrained = get_int("backbone_pretrained") != 0;
  cfg.weight_norm_head = get_int("weight_norm_head") != 0;
  cfg.target_classes = get_int("target_classes");
  cfg.pretrain_classes = get_int("pretrain_classes");

  Fnv1a config_hash;
  config_hash.update(cfg.canonical());
  if (header.get("config_hash") != hex_digest(config_hash.digest())) {
    throw IoError("checkpoint config hash mismatch in " + path.string());
  }

  ModelBundle bundle(cfg, 0);
  auto names = [](const std::string& joined) {
    std::vector<std::string> out;
    if (joined.empty()) return out;
    return split(joined, ',');
  };
  bundle.target_class_names = names(header.get_or("target_class_names", ""));
  bundle.pretrain_class_names = names(header.get_or("pretrain_class_names", ""));

  std::map<std::string, Tensor*> slots;
  for (auto& [name, p] : bundle.named_parameters()) slots[name] = &p.mutable_value();
  for (auto& [name, layer] : bundle.norm_layers()) {
    slots[name + ".running_mean"] = &layer->running.mean;
    slots[name + ".running_var"] = &layer->running.var;
  }
  const int count = get_int("tensors");
  if (count != static_cast<int>(slots.size())) throw IoError("checkpoint tensor count does not match its config");
  for (int i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw IoError("truncated checkpoint " + path.string());
    std::istringstream fields(line);
    std::string name;
    int rank = 0;
    fields >> name >> rank;
    Shape shape(static_cast<std::size_t>(std::max(rank, 0)));
    for (int& d : shape) fields >> d;
    if (!fields) throw IoError("malformed tensor record '" + line + "'");
    auto it = slots.find(name);
    if (it == slots.end()) throw IoError("unexpected tensor '" + name + "' in checkpoint");
    if (it->second->shape() != shape) {
      throw IoError("tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                    shape_string(it->second->shape()));
    }
    in.read(reinterpret_cast<char*>(it->second->data()),
            static_cast<std::streamsize>(it->second->size() * sizeof(double)));
    if (in.get() != '\n') throw IoError("corrupt tensor payload for '" + name + "'");
  }
  return bundle;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const auto m = logits.matrix();
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    int best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) > m(r, best)) best = static_cast<int>(c);
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

}  // namespace trida
