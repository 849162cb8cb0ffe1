#include "trida/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "trida/baselines.hpp"
#include "trida/errors.hpp"
#include "trida/kvfile.hpp"
#include "trida/objectives.hpp"

namespace trida {

namespace {

double sorted_w1(const std::vector<double>& a, const std::vector<double>& b) {
  // Walk the merged quantile grid in units of 1 / (n m).
  const long long n = static_cast<long long>(a.size());
  const long long m = static_cast<long long>(b.size());
  long long pos = 0;
  std::size_t i = 0, j = 0;
  double total = 0.0;
  while (pos < n * m) {
    const long long next = std::min(static_cast<long long>(i + 1) * m, static_cast<long long>(j + 1) * n);
    total += static_cast<double>(next - pos) * std::abs(a[i] - b[j]);
    pos = next;
    if (pos == static_cast<long long>(i + 1) * m) ++i;
    if (pos == static_cast<long long>(j + 1) * n) ++j;
  }
  return total / static_cast<double>(n * m);
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

double wasserstein_1d_exact(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ValidationError("wasserstein_1d_exact: empty sample set");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  return sorted_w1(sa, sb);
}

double sliced_wasserstein(const Tensor& a, const Tensor& b, int n_projections, std::uint64_t seed) {
  if (a.rank() != 2 || b.rank() != 2) throw ValidationError("sliced_wasserstein expects N x D feature matrices");
  if (a.rows() == 0 || b.rows() == 0) throw ValidationError("sliced_wasserstein: empty sample set");
  if (a.cols() != b.cols()) {
    throw ValidationError("sliced_wasserstein: dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                          std::to_string(b.cols()) + ")");
  }
  if (n_projections <= 0) throw ValidationError("n_projections must be positive");
  const int d = a.cols();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  RowMatrix dirs(d, n_projections);
  for (int p = 0; p < n_projections; ++p) {
    double norm = 0.0;
    while (norm == 0.0) {
      for (int k = 0; k < d; ++k) dirs(k, p) = normal(rng);
      norm = dirs.col(p).norm();
    }
    dirs.col(p) /= norm;
  }
  const RowMatrix pa = a.matrix() * dirs;
  const RowMatrix pb = b.matrix() * dirs;
  double total = 0.0;
  std::vector<double> ca(static_cast<std::size_t>(pa.rows())), cb(static_cast<std::size_t>(pb.rows()));
  for (int p = 0; p < n_projections; ++p) {
    for (Eigen::Index r = 0; r < pa.rows(); ++r) ca[static_cast<std::size_t>(r)] = pa(r, p);
    for (Eigen::Index r = 0; r < pb.rows(); ++r) cb[static_cast<std::size_t>(r)] = pb(r, p);
    std::sort(ca.begin(), ca.end());
    std::sort(cb.begin(), cb.end());
    total += sorted_w1(ca, cb);
  }
  return total / n_projections;
}

double silhouette_score(const Tensor& features, std::span<const int> labels) {
  if (features.rank() != 2) throw ValidationError("silhouette_score expects an N x D feature matrix");
  const int n = features.rows();
  if (static_cast<int>(labels.size()) != n) throw ValidationError("silhouette_score: label count mismatch");
  std::map<int, int> cluster_of;
  for (int l : labels) cluster_of.emplace(l, 0);
  if (cluster_of.size() < 2) throw ValidationError("silhouette_score needs at least two clusters");
  int next = 0;
  for (auto& [label, id] : cluster_of) id = next++;
  const int k = next;
  std::vector<int> cluster(static_cast<std::size_t>(n));
  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  for (int i = 0; i < n; ++i) {
    cluster[static_cast<std::size_t>(i)] = cluster_of.at(labels[static_cast<std::size_t>(i)]);
    ++sizes[static_cast<std::size_t>(cluster[static_cast<std::size_t>(i)])];
  }

  const ConstMatrixMap x = features.matrix();
  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(k));
  for (int i = 0; i < n; ++i) {
    const int ci = cluster[static_cast<std::size_t>(i)];
    if (sizes[static_cast<std::size_t>(ci)] == 1) continue;
    std::fill(sums.begin(), sums.end(), 0.0);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      sums[static_cast<std::size_t>(cluster[static_cast<std::size_t>(j)])] += (x.row(i) - x.row(j)).norm();
    }
    const double a = sums[static_cast<std::size_t>(ci)] / (sizes[static_cast<std::size_t>(ci)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c != ci) b = std::min(b, sums[static_cast<std::size_t>(c)] / sizes[static_cast<std::size_t>(c)]);
    }
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / n;
}

std::vector<int> evaluation_subset(std::size_t size, int n_eval, std::uint64_t seed) {
  std::vector<int> order(size);
  std::iota(order.begin(), order.end(), 0);
  if (n_eval < 0 || static_cast<std::size_t>(n_eval) >= size) return order;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(n_eval));
  std::sort(order.begin(), order.end());
  return order;
}

Tensor extract_features(const ModelBundle& bundle, const LabeledDataset& dataset, std::span<const int> indices,
                        int batch_size, Tensor* logits) {
  if (batch_size <= 0) throw ValidationError("batch_size must be positive");
  NoGradGuard guard;
  const int n = static_cast<int>(indices.size());
  Tensor features({n, bundle.config().feature_dim()});
  if (logits) *logits = Tensor({n, bundle.config().target_classes});
  for (int begin = 0; begin < n; begin += batch_size) {
    const int end = std::min(n, begin + batch_size);
    const Var f = bundle.eval_features(Var::constant(dataset.images(indices.subspan(begin, end - begin))));
    features.matrix().middleRows(begin, end - begin) = f.value().matrix();
    if (logits) logits->matrix().middleRows(begin, end - begin) = bundle.target_logits(f).value().matrix();
  }
  return features;
}

double accuracy(const ModelBundle& bundle, const LabeledDataset& dataset, int batch_size) {
  const std::vector<int> truth = dataset.ground_truth();
  if (truth.empty() || dataset.num_classes() != bundle.config().target_classes) return kNaN;
  std::vector<int> all(dataset.size());
  std::iota(all.begin(), all.end(), 0);
  Tensor logits;
  extract_features(bundle, dataset, all, batch_size, &logits);
  const std::vector<int> pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == truth[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

DiagnosticsRecord track_epoch(const ModelBundle& bundle, const DomainSets& domains, const DiagnosticsConfig& cfg,
                              int epoch) {
  DiagnosticsRecord rec;
  rec.epoch = epoch;
  auto subset_features = [&](const LabeledDataset* ds, std::uint64_t salt, std::vector<int>* idx_out) -> Tensor {
    if (!ds || ds->empty()) return {};
    std::vector<int> idx = evaluation_subset(ds->size(), cfg.n_eval, cfg.seed + salt);
    Tensor f = extract_features(bundle, *ds, idx, cfg.batch_size);
    if (idx_out) *idx_out = std::move(idx);
    return f;
  };
  std::vector<int> p_idx;
  const Tensor fs = subset_features(domains.source, 1, nullptr);
  const Tensor ft = subset_features(domains.target, 2, nullptr);
  const Tensor fp = subset_features(domains.pretrain, 3, &p_idx);

  auto w = [&](const Tensor& a, const Tensor& b) {
    return a.empty() || b.empty() ? kNaN : sliced_wasserstein(a, b, cfg.n_projections, cfg.seed);
  };
  rec.w_st = w(fs, ft);
  rec.w_sp = w(fs, fp);
  rec.w_tp = w(ft, fp);

  rec.silhouette_pretrain = kNaN;
  if (!fp.empty()) {
    const std::vector<int> truth = domains.pretrain->ground_truth();
    if (!truth.empty()) {
      std::vector<int> labels;
      for (int i : p_idx) labels.push_back(truth[static_cast<std::size_t>(i)]);
      if (std::set<int>(labels.begin(), labels.end()).size() >= 2) rec.silhouette_pretrain = silhouette_score(fp, labels);
    }
  }
  rec.acc_source = domains.source ? accuracy(bundle, *domains.source, cfg.batch_size) : kNaN;
  rec.acc_target = domains.target ? accuracy(bundle, *domains.target, cfg.batch_size) : kNaN;
  return rec;
}

std::vector<int> corrupt_labels(std::span<const int> labels, int num_classes, double fraction, std::uint64_t seed,
                                std::vector<int>* corrupted) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("noise fraction must lie in [0, 1]");
  if (num_classes < 2 && fraction > 0.0) throw ValidationError("label corruption needs at least two classes");
  std::vector<int> out(labels.begin(), labels.end());
  const std::size_t count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(labels.size())));
  std::vector<int> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(count);
  std::sort(order.begin(), order.end());
  std::uniform_int_distribution<int> other(0, num_classes - 2);
  for (int i : order) {
    // uniform over the classes other than the original
    int c = other(rng);
    if (c >= out[static_cast<std::size_t>(i)]) ++c;
    out[static_cast<std::size_t>(i)] = c;
  }
  if (corrupted) *corrupted = std::move(order);
  return out;
}

ProbeResult noisy_label_probe(const ModelBundle& bundle, const LabeledDataset& train, const DomainSets& eval,
                              const ProbeOptions& options) {
  if (options.epochs < 0) throw ValidationError("epochs must be non-negative");
  if (options.batch_size < 2) throw ValidationError("batch_size must be at least 2");
  if (train.num_classes() != bundle.config().target_classes) {
    throw ValidationError("probe dataset has " + std::to_string(train.num_classes()) + " classes, the head " +
                          std::to_string(bundle.config().target_classes));
  }
  const LabeledDataset* pretrain = eval.pretrain;
  if (options.with_pretrain_loss) {
    if (!pretrain || pretrain->ground_truth().empty()) throw ValidationError("L_p arm needs a labelled pre-training set");
    if (!bundle.has_pretrain_head()) throw ValidationError("L_p arm needs a pre-training head");
  }

  ProbeResult result;
  const std::vector<int> noisy =
      corrupt_labels(train.ground_truth(), train.num_classes(), options.noise_fraction, options.seed, &result.corrupted);

  ModelBundle model(bundle);
  model.set_mode(Mode::train);
  Sgd opt = make_optimizer(model, options.sgd);
  const std::vector<int> p_truth = pretrain ? pretrain->ground_truth() : std::vector<int>{};
  CyclicSampler p_sampler(pretrain && !pretrain->empty() ? pretrain->size() : 1, options.seed ^ 0x9e3779b97f4a7c15ULL);

  result.records.push_back(track_epoch(model, eval, options.diag, 0));
  const long steps_per_epoch =
      static_cast<long>((train.size() + static_cast<std::size_t>(options.batch_size) - 1) / options.batch_size);
  const long total = std::max(1L, steps_per_epoch * options.epochs);
  long step = 0;
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    for (const auto& idx : shuffled_batches(train.size(), options.batch_size, options.seed * 1000003ULL + epoch)) {
      if (idx.size() < 2) continue;
      std::vector<int> y;
      for (int i : idx) y.push_back(noisy[static_cast<std::size_t>(i)]);
      opt.zero_grad();
      Var loss = loss_source(model, train.images(idx), y, options.smoothing);
      if (options.with_pretrain_loss) {
        const std::vector<int> pidx = p_sampler.draw(idx.size());
        std::vector<int> yp;
        for (int i : pidx) yp.push_back(p_truth[static_cast<std::size_t>(i)]);
        loss = loss + loss_pretrain(model, pretrain->images(pidx), yp);
      }
      if (!std::isfinite(loss.item())) throw RunError("non-finite loss in noisy-label probe");
      loss.backward();
      opt.step(step++, total);
    }
    result.records.push_back(track_epoch(model, eval, options.diag, epoch));
  }
  return result;
}

void write_diagnostics_csv(std::span<const DiagnosticsRecord> records, std::ostream& out) {
  out << "epoch,w_st,w_sp,w_tp,silhouette_pretrain,acc_source,acc_target\n";
  for (const auto& r : records) {
    out << r.epoch << ',' << format_double(r.w_st) << ',' << format_double(r.w_sp) << ',' << format_double(r.w_tp)
        << ',' << format_double(r.silhouette_pretrain) << ',' << format_double(r.acc_source) << ','
        << format_double(r.acc_target) << '\n';
  }
}

std::filesystem::path write_diagnostics_csv(std::span<const DiagnosticsRecord> records,
                                            const std::filesystem::path& dir, const std::string& run_id) {
  std::filesystem::create_directories(dir);
  const auto path = dir / ("diag_" + run_id + ".csv");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_diagnostics_csv(records, out);
  return path;
}

void write_line_chart_svg(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                          std::span<const ChartSeries> series) {
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  constexpr double W = 640, H = 400, L = 60, R = 150, T = 40, B = 50;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.y.size());
    for (double v : s.y) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi == lo) hi = lo + 1.0;
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto px = [&](std::size_t i) { return L + (n > 1 ? (W - L - R) * static_cast<double>(i) / (n - 1) : 0.0); };
  auto py = [&](double v) { return T + (H - T - B) * (hi - v) / (hi - lo); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
      << title << "</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << x_label << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    svg << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" << format_double(std::round(v * 1e4) / 1e4)
        << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % std::size(kColors)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].y.size(); ++i) {
      if (std::isfinite(series[s].y[i])) svg << px(i) << ',' << py(series[s].y[i]) << ' ';
    }
    svg << "\"/>\n<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (s + 1) << "\" fill=\"" << color
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << series[s].label << "</text>\n";
  }
  svg << "</svg>\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << svg.str();
}

}  // namespace trida
