#include "trida/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "trida/errors.hpp"
#include "trida/kvfile.hpp"

namespace trida {

static_assert(std::endian::native == std::endian::little, "raw tensor files assume a little-endian host");

std::string to_string(DomainRole role) {
  switch (role) {
    case DomainRole::source: return "source";
    case DomainRole::target: return "target";
    case DomainRole::pretrain: return "pretrain";
  }
  return "unknown";
}

DomainRole parse_domain_role(std::string_view text) {
  if (text == "source") return DomainRole::source;
  if (text == "target") return DomainRole::target;
  if (text == "pretrain") return DomainRole::pretrain;
  throw ValidationError("unknown domain role '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// LabeledDataset

LabeledDataset::LabeledDataset(DomainRole role, std::vector<std::string> class_set, std::vector<Sample> samples,
                               std::vector<int> hidden_labels)
    : role_(role), class_set_(std::move(class_set)), samples_(std::move(samples)), hidden_labels_(std::move(hidden_labels)) {
  const int k = num_classes();
  const Shape shape = samples_.empty() ? Shape{} : samples_.front().image.shape();
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    const Sample& s = samples_[i];
    if (s.image.shape() != shape) throw ValidationError("sample " + std::to_string(i) + " has a different image shape");
    if (s.label && (*s.label < 0 || *s.label >= k)) {
      throw ValidationError("sample " + std::to_string(i) + " label " + std::to_string(*s.label) +
                            " outside the class set");
    }
    for (double v : s.image.values()) {
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("sample " + std::to_string(i) + " has pixels outside [0,1]");
    }
  }
  if (!hidden_labels_.empty() && hidden_labels_.size() != samples_.size()) {
    throw ValidationError("hidden label count does not match sample count");
  }
  for (int y : hidden_labels_) {
    if (y < 0 || y >= k) throw ValidationError("hidden label outside the class set");
  }
}

Shape LabeledDataset::image_shape() const { return samples_.empty() ? Shape{} : samples_.front().image.shape(); }

bool LabeledDataset::labeled() const {
  return std::all_of(samples_.begin(), samples_.end(), [](const Sample& s) { return s.label.has_value(); });
}

Tensor LabeledDataset::images(std::span<const int> indices) const {
  Shape shape = image_shape();
  shape.insert(shape.begin(), static_cast<int>(indices.size()));
  Tensor out(shape);
  const std::size_t each = shape_size(image_shape());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = samples_.at(static_cast<std::size_t>(indices[i]));
    std::copy_n(s.image.data(), each, out.data() + i * each);
  }
  return out;
}

Tensor LabeledDataset::all_images() const {
  std::vector<int> idx(samples_.size());
  std::iota(idx.begin(), idx.end(), 0);
  return images(idx);
}

std::vector<int> LabeledDataset::labels(std::span<const int> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) {
    const Sample& s = samples_.at(static_cast<std::size_t>(i));
    if (!s.label) throw ValidationError("sample " + std::to_string(i) + " of the " + to_string(role_) + " domain has no label");
    out.push_back(*s.label);
  }
  return out;
}

std::vector<int> LabeledDataset::all_labels() const {
  std::vector<int> idx(samples_.size());
  std::iota(idx.begin(), idx.end(), 0);
  return labels(idx);
}

std::vector<int> LabeledDataset::ground_truth() const {
  if (!hidden_labels_.empty()) return hidden_labels_;
  if (labeled()) return all_labels();
  return {};
}

LabeledDataset LabeledDataset::with_labels(std::span<const int> labels) const {
  if (labels.size() != samples_.size()) throw ValidationError("with_labels: label count does not match sample count");
  std::vector<Sample> samples = samples_;
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].label = labels[i];
  return LabeledDataset(role_, class_set_, std::move(samples), hidden_labels_);
}

LabeledDataset LabeledDataset::without_labels() const {
  std::vector<int> hidden = ground_truth();
  std::vector<Sample> samples = samples_;
  for (Sample& s : samples) s.label.reset();
  return LabeledDataset(role_, class_set_, std::move(samples), std::move(hidden));
}

LabeledDataset LabeledDataset::subset(std::span<const int> indices) const {
  std::vector<Sample> samples;
  std::vector<int> hidden;
  for (int i : indices) {
    samples.push_back(samples_.at(static_cast<std::size_t>(i)));
    if (!hidden_labels_.empty()) hidden.push_back(hidden_labels_[static_cast<std::size_t>(i)]);
  }
  return LabeledDataset(role_, class_set_, std::move(samples), std::move(hidden));
}

// ---------------------------------------------------------------------------
// Image folders

namespace {

bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".ppm" || ext == ".pgm" ||
         ext == ".tif" || ext == ".tiff" || ext == ".webp";
}

Tensor decode_image(const std::filesystem::path& file, int side) {
  cv::Mat raw = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (raw.empty()) throw IoError("cannot decode image " + file.string());
  cv::Mat rgb, resized;
  cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
  cv::resize(rgb, resized, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
  Tensor image({3, side, side});
  for (int y = 0; y < side; ++y) {
    const auto* px = resized.ptr<cv::Vec3b>(y);
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c)
        image[(static_cast<std::size_t>(c) * side + y) * side + x] = px[x][c] / 255.0;
  }
  return image;
}

}  // namespace

LabeledDataset load_image_folder(const std::filesystem::path& root, DomainRole role, int image_side) {
  namespace fs = std::filesystem;
  if (image_side <= 0) throw ValidationError("image side must be positive");
  if (!fs::exists(root)) throw IoError("no such directory: " + root.string());
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root.string());

  std::vector<std::string> classes;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) classes.push_back(entry.path().filename().string());
  }
  if (classes.empty()) throw ValidationError("no class directories under " + root.string());
  std::sort(classes.begin(), classes.end());

  std::vector<Sample> samples;
  std::vector<int> hidden;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(root / classes[c])) {
      if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
    }
    if (files.empty()) throw ValidationError("class directory '" + classes[c] + "' holds no images");
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Sample s{decode_image(f, image_side), std::nullopt, role};
      if (role == DomainRole::target) {
        hidden.push_back(static_cast<int>(c));
      } else {
        s.label = static_cast<int>(c);
      }
      samples.push_back(std::move(s));
    }
  }
  return LabeledDataset(role, std::move(classes), std::move(samples), std::move(hidden));
}

void save_image_folder(const LabeledDataset& dataset, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const std::vector<int> labels = dataset.ground_truth();
  if (labels.size() != dataset.size()) throw ValidationError("save_image_folder needs labels for every sample");
  for (const auto& name : dataset.class_set()) fs::create_directories(root / name);
  std::vector<int> counters(dataset.class_set().size(), 0);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Tensor& img = dataset[i].image;
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    cv::Mat mat(h, w, c == 1 ? CV_8UC1 : CV_8UC3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto px = [&](int ch) {
          return static_cast<unsigned char>(std::lround(img[(static_cast<std::size_t>(ch) * h + y) * w + x] * 255.0));
        };
        if (c == 1) {
          mat.at<unsigned char>(y, x) = px(0);
        } else {
          mat.at<cv::Vec3b>(y, x) = cv::Vec3b(px(2), px(1), px(0));
        }
      }
    const int label = labels[i];
    char name[32];
    std::snprintf(name, sizeof(name), "%05d.png", counters[static_cast<std::size_t>(label)]++);
    const fs::path file = root / dataset.class_set()[static_cast<std::size_t>(label)] / name;
    if (!cv::imwrite(file.string(), mat)) throw IoError("cannot write " + file.string());
  }
}

// ---------------------------------------------------------------------------
// Toy benchmark

namespace {

const std::array<ToyShape, 12> kShapes = {{
    {"circle", "round"},
    {"square", "polygon"},
    {"triangle", "polygon"},
    {"cross", "stroke"},
    {"ring", "round"},
    {"diamond", "polygon"},
    {"ellipse", "round"},
    {"x_mark", "stroke"},
    {"hexagon", "polygon"},
    {"hbar", "stroke"},
    {"semicircle", "round"},
    {"frame", "polygon"},
}};

bool inside(int shape, double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y);
  const double r2 = x * x + y * y;
  switch (shape) {
    case 0: return r2 < 1.0;
    case 1: return std::max(ax, ay) < 0.82;
    case 2: return y > -0.75 && y < 0.95 - 1.9 * ax;
    case 3: return (ax < 0.28 && ay < 0.95) || (ay < 0.28 && ax < 0.95);
    case 4: return r2 < 1.0 && r2 > 0.3;
    case 5: return ax + ay < 1.0;
    case 6: return x * x + (y / 0.5) * (y / 0.5) < 1.0;
    case 7: {
      const double u = std::abs(x + y) / std::numbers::sqrt2, v = std::abs(x - y) / std::numbers::sqrt2;
      return (u < 0.26 && v < 0.95) || (v < 0.26 && u < 0.95);
    }
    case 8: return ay < 0.866 && std::numbers::sqrt3 * ax + ay < std::numbers::sqrt3;
    case 9: return ay < 0.3 && ax < 0.95;
    case 10: return x * x + (y + 0.4) * (y + 0.4) < 1.0 && y > -0.4;
    case 11: return std::max(ax, ay) < 0.85 && std::max(ax, ay) > 0.5;
    default: return false;
  }
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Tensor render_shape(int shape, int side, const DomainAppearance& look, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const double scale = between(0.55, 0.75);
  const double tx = between(-0.15, 0.15), ty = between(-0.15, 0.15);
  const double angle = between(-0.2, 0.2);
  const double hue = look.hue_center + between(-look.hue_spread, look.hue_spread);
  const auto fg = hsv_to_rgb(hue, look.saturation, look.foreground_value);
  const double bg_level = between(look.background_min, look.background_max);
  const auto bg = hsv_to_rgb(unit(rng), 0.2, bg_level);
  const double texture = between(look.texture_min, look.texture_max);
  const double freq = between(2.0, 5.0);
  const double phi = between(0.0, std::numbers::pi);
  const double phase = between(0.0, 2.0 * std::numbers::pi);
  const double noise = between(look.noise_min, look.noise_max);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double ca = std::cos(angle), sa = std::sin(angle);
  constexpr int kSuper = 3;
  Tensor image({3, side, side});
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      int hits = 0;
      for (int si = 0; si < kSuper; ++si)
        for (int sj = 0; sj < kSuper; ++sj) {
          const double px = (j + (sj + 0.5) / kSuper) / side * 2.0 - 1.0;
          const double py = 1.0 - (i + (si + 0.5) / kSuper) / side * 2.0;
          const double dx = px - tx, dy = py - ty;
          const double x = (ca * dx + sa * dy) / scale;
          const double y = (-sa * dx + ca * dy) / scale;
          hits += inside(shape, x, y) ? 1 : 0;
        }
      const double coverage = static_cast<double>(hits) / (kSuper * kSuper);
      const double px = (j + 0.5) / side * 2.0 - 1.0, py = 1.0 - (i + 0.5) / side * 2.0;
      const double stripe =
          1.0 + texture * std::sin(2.0 * std::numbers::pi * freq * 0.5 * (px * std::cos(phi) + py * std::sin(phi)) + phase);
      for (int c = 0; c < 3; ++c) {
        const double value = coverage * fg[static_cast<std::size_t>(c)] +
                             (1.0 - coverage) * bg[static_cast<std::size_t>(c)] * stripe + noise * gauss(rng);
        image[(static_cast<std::size_t>(c) * side + i) * side + j] = std::clamp(value, 0.0, 1.0);
      }
    }
  }
  return image;
}

LabeledDataset render_domain(DomainRole role, int n_classes, const ToyBenchmarkSpec& spec, const DomainAppearance& look) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(role) + 101u};
  std::mt19937_64 rng(seq);
  std::vector<std::string> classes;
  std::vector<Sample> samples;
  std::vector<int> hidden;
  for (int c = 0; c < n_classes; ++c) {
    classes.push_back(kShapes[static_cast<std::size_t>(c)].name);
    for (int k = 0; k < spec.samples_per_class_per_domain; ++k) {
      Sample s{render_shape(c, spec.image_side, look, rng), std::nullopt, role};
      if (role == DomainRole::target) {
        hidden.push_back(c);
      } else {
        s.label = c;
      }
      samples.push_back(std::move(s));
    }
  }
  return LabeledDataset(role, std::move(classes), std::move(samples), std::move(hidden));
}

}  // namespace

std::span<const ToyShape> toy_shape_catalog() { return kShapes; }

DomainAppearance DomainShift::source_appearance() const {
  DomainAppearance a;
  a.hue_center = 0.02;
  a.hue_spread = 0.06;
  a.saturation = 0.85;
  a.foreground_value = 0.95;
  a.background_min = 0.05;
  a.background_max = 0.2;
  a.noise_min = a.noise_max = 0.03;
  return a;
}

DomainAppearance DomainShift::target_appearance() const {
  DomainAppearance a = source_appearance();
  a.hue_center += hue_shift;
  a.background_min = std::max(0.0, background_level - 0.1);
  a.background_max = std::min(1.0, background_level + 0.1);
  a.texture_min = 0.5 * texture_amplitude;
  a.texture_max = texture_amplitude;
  a.noise_min = a.noise_max = noise;
  return a;
}

DomainAppearance DomainShift::pretrain_appearance() const {
  DomainAppearance a;
  a.hue_center = 0.5;
  a.hue_spread = 0.5;
  a.saturation = 0.85;
  a.foreground_value = 0.95;
  a.background_min = 0.0;
  a.background_max = 0.6;
  a.texture_min = 0.0;
  a.texture_max = 0.3;
  a.noise_min = 0.02;
  a.noise_max = 0.08;
  return a;
}

void ToyBenchmarkSpec::validate() const {
  if (n_classes_task <= 0) throw ValidationError("n_classes_task must be positive");
  if (n_classes_pretrain < n_classes_task) {
    throw ValidationError("n_classes_pretrain (" + std::to_string(n_classes_pretrain) + ") < n_classes_task (" +
                          std::to_string(n_classes_task) + ")");
  }
  if (n_classes_pretrain > static_cast<int>(kShapes.size())) {
    throw ValidationError("at most " + std::to_string(kShapes.size()) + " toy shapes are available");
  }
  if (image_side < 8) throw ValidationError("image_side must be at least 8");
  if (samples_per_class_per_domain <= 0) throw ValidationError("samples_per_class_per_domain must be positive");
}

ToyBenchmark generate_toy_benchmark(const ToyBenchmarkSpec& spec) {
  spec.validate();
  const DomainShift& shift = spec.domain_shift;
  return {render_domain(DomainRole::source, spec.n_classes_task, spec, shift.source_appearance()),
          render_domain(DomainRole::target, spec.n_classes_task, spec, shift.target_appearance()),
          render_domain(DomainRole::pretrain, spec.n_classes_pretrain, spec, shift.pretrain_appearance())};
}

namespace {

void write_domain(const LabeledDataset& d, const std::filesystem::path& dir) {
  const std::string role = to_string(d.role());
  std::ofstream img(dir / (role + ".images.f64"), std::ios::binary);
  std::ofstream lab(dir / (role + ".labels.i32"), std::ios::binary);
  if (!img || !lab) throw IoError("cannot write benchmark files in " + dir.string());
  const std::vector<int> truth = d.ground_truth();
  for (std::size_t i = 0; i < d.size(); ++i) {
    img.write(reinterpret_cast<const char*>(d[i].image.data()), static_cast<std::streamsize>(d[i].image.size() * sizeof(double)));
    const std::int32_t y = truth.empty() ? -1 : truth[i];
    lab.write(reinterpret_cast<const char*>(&y), sizeof(y));
  }
}

LabeledDataset read_domain(DomainRole role, const std::filesystem::path& dir, std::vector<std::string> classes,
                           std::size_t count, const Shape& shape) {
  const std::string name = to_string(role);
  std::ifstream img(dir / (name + ".images.f64"), std::ios::binary);
  std::ifstream lab(dir / (name + ".labels.i32"), std::ios::binary);
  if (!img || !lab) throw IoError("missing tensor files for the " + name + " domain in " + dir.string());
  std::vector<Sample> samples;
  std::vector<int> hidden;
  const std::size_t each = shape_size(shape);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> values(each);
    std::int32_t y = -1;
    img.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(each * sizeof(double)));
    lab.read(reinterpret_cast<char*>(&y), sizeof(y));
    if (!img || !lab) throw IoError("truncated tensor file for the " + name + " domain");
    Sample s{Tensor(shape, std::move(values)), std::nullopt, role};
    if (y >= 0) {
      if (role == DomainRole::target) {
        hidden.push_back(y);
      } else {
        s.label = y;
      }
    }
    samples.push_back(std::move(s));
  }
  return LabeledDataset(role, std::move(classes), std::move(samples), std::move(hidden));
}

}  // namespace

void save_toy_benchmark(const ToyBenchmark& bench, const ToyBenchmarkSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  KeyValueFile manifest;
  manifest.set("format", "trida-toy-benchmark");
  manifest.set("version", 1);
  manifest.set("seed", static_cast<long long>(spec.seed));
  manifest.set("n_classes_task", spec.n_classes_task);
  manifest.set("n_classes_pretrain", spec.n_classes_pretrain);
  manifest.set("image_side", spec.image_side);
  manifest.set("channels", 3);
  manifest.set("samples_per_class_per_domain", spec.samples_per_class_per_domain);
  manifest.set("shift.hue_shift", spec.domain_shift.hue_shift);
  manifest.set("shift.background_level", spec.domain_shift.background_level);
  manifest.set("shift.texture_amplitude", spec.domain_shift.texture_amplitude);
  manifest.set("shift.noise", spec.domain_shift.noise);
  for (const LabeledDataset* d : {&bench.source, &bench.target, &bench.pretrain}) {
    const std::string role = to_string(d->role());
    manifest.set(role + ".count", static_cast<long long>(d->size()));
    manifest.set(role + ".classes", join(d->class_set(), ','));
    write_domain(*d, dir);
  }
  manifest.write(dir / "manifest.txt");
}

ToyBenchmark load_toy_benchmark(const std::filesystem::path& dir, ToyBenchmarkSpec* spec) {
  const KeyValueFile manifest = KeyValueFile::read(dir / "manifest.txt");
  if (manifest.get_or("format", "") != "trida-toy-benchmark") throw ParseError("not a toy benchmark manifest");
  ToyBenchmarkSpec s;
  s.seed = static_cast<std::uint64_t>(manifest.get_int("seed"));
  s.n_classes_task = static_cast<int>(manifest.get_int("n_classes_task"));
  s.n_classes_pretrain = static_cast<int>(manifest.get_int("n_classes_pretrain"));
  s.image_side = static_cast<int>(manifest.get_int("image_side"));
  s.samples_per_class_per_domain = static_cast<int>(manifest.get_int("samples_per_class_per_domain"));
  s.domain_shift.hue_shift = manifest.get_double("shift.hue_shift");
  s.domain_shift.background_level = manifest.get_double("shift.background_level");
  s.domain_shift.texture_amplitude = manifest.get_double("shift.texture_amplitude");
  s.domain_shift.noise = manifest.get_double("shift.noise");
  if (spec) *spec = s;
  const Shape shape{static_cast<int>(manifest.get_int("channels")), s.image_side, s.image_side};
  auto load = [&](DomainRole role) {
    const std::string name = to_string(role);
    return read_domain(role, dir, split(manifest.get(name + ".classes"), ','),
                       static_cast<std::size_t>(manifest.get_int(name + ".count")), shape);
  };
  return {load(DomainRole::source), load(DomainRole::target), load(DomainRole::pretrain)};
}

// ---------------------------------------------------------------------------
// Pairing

PairedBatchStream::PairedBatchStream(std::size_t size_a, std::size_t size_b, int batch_size, std::uint64_t seed)
    : size_a_(size_a), size_b_(size_b), batch_size_(batch_size), rng_(seed) {
  if (batch_size <= 0) throw ValidationError("batch_size must be positive, got " + std::to_string(batch_size));
  if (size_a == 0 || size_b == 0) throw ValidationError("paired batches need two non-empty datasets");
  a_leads_ = size_a >= size_b;
  const std::size_t larger = std::max(size_a, size_b);
  steps_ = static_cast<int>((larger + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

std::vector<int> PairedBatchStream::draw_cycled(std::size_t count) {
  const std::size_t n = a_leads_ ? size_b_ : size_a_;
  std::vector<int> out;
  out.reserve(count);
  while (out.size() < count) {
    if (cycle_pos_ == cycle_.size()) {
      cycle_.resize(n);
      std::iota(cycle_.begin(), cycle_.end(), 0);
      std::shuffle(cycle_.begin(), cycle_.end(), rng_);
      cycle_pos_ = 0;
    }
    out.push_back(cycle_[cycle_pos_++]);
  }
  return out;
}

std::vector<BatchPair> PairedBatchStream::next_epoch() {
  const std::size_t larger = a_leads_ ? size_a_ : size_b_;
  std::vector<int> order(larger);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_);
  std::vector<BatchPair> batches;
  batches.reserve(static_cast<std::size_t>(steps_));
  for (std::size_t begin = 0; begin < larger; begin += static_cast<std::size_t>(batch_size_)) {
    const std::size_t end = std::min(larger, begin + static_cast<std::size_t>(batch_size_));
    std::vector<int> lead(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<int> follow = draw_cycled(lead.size());
    if (a_leads_) {
      batches.push_back({std::move(lead), std::move(follow)});
    } else {
      batches.push_back({std::move(follow), std::move(lead)});
    }
  }
  return batches;
}

CyclicSampler::CyclicSampler(std::size_t size, std::uint64_t seed) : size_(size), rng_(seed) {
  if (size == 0) throw ValidationError("cannot sample from an empty dataset");
}

std::vector<int> CyclicSampler::draw(std::size_t count) {
  std::vector<int> out;
  out.reserve(count);
  while (out.size() < count) {
    if (pos_ == order_.size()) {
      order_.resize(size_);
      std::iota(order_.begin(), order_.end(), 0);
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

std::vector<std::vector<int>> shuffled_batches(std::size_t size, int batch_size, std::uint64_t seed) {
  if (batch_size <= 0) throw ValidationError("batch_size must be positive");
  std::vector<int> order(size);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> out;
  for (std::size_t begin = 0; begin < size; begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(size, begin + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace trida
