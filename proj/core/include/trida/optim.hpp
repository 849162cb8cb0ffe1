#pragma once

#include <span>
#include <string>
#include <vector>

#include "trida/autograd.hpp"
#include "trida/model.hpp"

namespace trida {

enum class LrSchedule { poly, constant };

LrSchedule parse_lr_schedule(const std::string& text);
std::string to_string(LrSchedule schedule);

/// base_lr * (1 + 10 p)^(-0.75) with p = step / total_steps (poly), or
/// base_lr (constant).
double learning_rate_schedule(double base_lr, long step, long total_steps, LrSchedule schedule = LrSchedule::poly);

struct SgdConfig {
  double lr_backbone = 1e-3;
  double lr_new = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  LrSchedule schedule = LrSchedule::poly;

  /// Every rate at 1e-3, as used for the VisDA-C benchmark.
  static SgdConfig visda_preset();
  void validate() const;
};

/// Mini-batch SGD with heavy-ball momentum and L2 weight decay over
/// parameter groups with their own base rates.
class Sgd {
 public:
  struct Group {
    std::vector<Var> params;
    double base_lr = 0.0;
  };

  Sgd(std::vector<Group> groups, double momentum, double weight_decay, LrSchedule schedule);

  void zero_grad();
  /// Applies one update at learning rate schedule(base_lr, step, total).
  /// Parameters that received no gradient are left alone.
  void step(long step, long total_steps);

  const std::vector<Group>& groups() const { return groups_; }

 private:
  std::vector<Group> groups_;
  std::vector<std::vector<Tensor>> velocity_;
  double momentum_;
  double weight_decay_;
  LrSchedule schedule_;
};

/// Optimizer over the bundle's parameter groups (backbone at lr_backbone,
/// new layers at lr_new) plus auxiliary parameters at lr_new. Parameters
/// whose name starts with one of `frozen_prefixes` are left out.
Sgd make_optimizer(const ModelBundle& bundle, const SgdConfig& cfg, std::span<const Var> auxiliary = {},
                   std::span<const std::string> frozen_prefixes = {});

}  // namespace trida
