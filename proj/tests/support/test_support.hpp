#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "trida/autograd.hpp"
#include "trida/model.hpp"
#include "trida/tensor.hpp"

namespace trida::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> out(n);
  for (int& v : out) v = u(rng);
  return out;
}

/// Conv bundle small enough for finite differences: one 1->2 channel
/// block on 4x4 images, an 8-wide bottleneck and both heads (~200
/// parameters).
inline ModelConfig probe_config(int target_classes = 3, int pretrain_classes = 4) {
  ModelConfig c;
  c.backbone = BackboneKind::conv;
  c.in_channels = 1;
  c.image_side = 4;
  c.conv_channels = {2};
  c.bottleneck_width = 8;
  c.target_classes = target_classes;
  c.pretrain_classes = pretrain_classes;
  return c;
}

inline ModelBundle probe_bundle(std::uint64_t seed = 7) { return ModelBundle(probe_config(), seed); }

struct GradCheckResult {
  double worst_relative_error = 0.0;
  int directions = 0;
};

/// Compares the analytic directional derivative of `loss` along random
/// unit directions in the space of `params` against a central difference.
/// `loss` must rebuild the graph from the current parameter values.
inline GradCheckResult check_gradients(const std::function<Var()>& loss, std::vector<Var> params, int directions,
                                       std::uint64_t seed, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  loss().backward();
  std::vector<Tensor> analytic;
  for (auto& p : params) analytic.push_back(p.has_grad() ? p.grad() : Tensor(p.shape(), 0.0));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  GradCheckResult result;
  for (int d = 0; d < directions; ++d) {
    std::vector<Tensor> dir;
    double norm = 0.0;
    for (auto& p : params) {
      Tensor t(p.shape());
      for (double& v : t.values()) {
        v = g(rng);
        norm += v * v;
      }
      dir.push_back(std::move(t));
    }
    norm = std::sqrt(norm);
    double directional = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t k = 0; k < dir[i].size(); ++k) {
        dir[i][k] /= norm;
        directional += analytic[i][k] * dir[i][k];
      }
    }
    auto shift = [&](double eps) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t k = 0; k < dir[i].size(); ++k) params[i].mutable_value()[k] += eps * dir[i][k];
      }
    };
    double plus = 0.0, minus = 0.0;
    {
      NoGradGuard guard;
      shift(h);
      plus = loss().item();
      shift(-2.0 * h);
      minus = loss().item();
      shift(h);
    }
    const double numeric = (plus - minus) / (2.0 * h);
    const double scale = std::max({std::abs(directional), std::abs(numeric), 1e-7});
    result.worst_relative_error = std::max(result.worst_relative_error, std::abs(directional - numeric) / scale);
    ++result.directions;
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

inline std::vector<Var> parameters_of(const ModelBundle& bundle) {
  std::vector<Var> out;
  for (const auto& [name, p] : bundle.named_parameters()) out.push_back(p);
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("trida_test_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace trida::testing
