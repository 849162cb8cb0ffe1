#include "trida/optim.hpp"

#include <cmath>
#include <set>

#include "trida/errors.hpp"

namespace trida {

LrSchedule parse_lr_schedule(const std::string& text) {
  if (text == "poly") return LrSchedule::poly;
  if (text == "constant") return LrSchedule::constant;
  throw ValidationError("unknown learning-rate schedule '" + text + "' (expected poly or constant)");
}

std::string to_string(LrSchedule schedule) { return schedule == LrSchedule::poly ? "poly" : "constant"; }

double learning_rate_schedule(double base_lr, long step, long total_steps, LrSchedule schedule) {
  if (schedule == LrSchedule::constant) return base_lr;
  if (total_steps <= 0) throw ValidationError("total_steps must be positive");
  const double p = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * std::pow(1.0 + 10.0 * p, -0.75);
}

SgdConfig SgdConfig::visda_preset() {
  SgdConfig cfg;
  cfg.lr_backbone = 1e-3;
  cfg.lr_new = 1e-3;
  return cfg;
}

void SgdConfig::validate() const {
  if (!(lr_backbone > 0.0) || !(lr_new > 0.0)) throw ValidationError("learning rates must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be non-negative");
}

Sgd::Sgd(std::vector<Group> groups, double momentum, double weight_decay, LrSchedule schedule)
    : groups_(std::move(groups)), momentum_(momentum), weight_decay_(weight_decay), schedule_(schedule) {
  velocity_.resize(groups_.size());
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    for (const Var& p : groups_[g].params) velocity_[g].emplace_back(p.shape(), 0.0);
  }
}

void Sgd::zero_grad() {
  for (auto& group : groups_) {
    for (auto& p : group.params) p.zero_grad();
  }
}

void Sgd::step(long step, long total_steps) {
  for (std::size_t g = 0; g < groups_.size(); ++g) {
    const double lr = learning_rate_schedule(groups_[g].base_lr, step, total_steps, schedule_);
    for (std::size_t i = 0; i < groups_[g].params.size(); ++i) {
      Var& p = groups_[g].params[i];
      if (!p.has_grad()) continue;
      Tensor& value = p.mutable_value();
      const Tensor& grad = p.grad();
      Tensor& v = velocity_[g][i];
      for (std::size_t k = 0; k < value.size(); ++k) {
        const double d = grad[k] + weight_decay_ * value[k];
        v[k] = momentum_ * v[k] + d;
        value[k] -= lr * v[k];
      }
    }
  }
}

Sgd make_optimizer(const ModelBundle& bundle, const SgdConfig& cfg, std::span<const Var> auxiliary,
                   std::span<const std::string> frozen_prefixes) {
  cfg.validate();
  std::set<const Node*> frozen;
  for (const auto& [name, p] : bundle.named_parameters()) {
    for (const auto& prefix : frozen_prefixes) {
      if (name.starts_with(prefix)) frozen.insert(p.node().get());
    }
  }
  auto keep = [&](const std::vector<Var>& params) {
    std::vector<Var> out;
    for (const Var& p : params) {
      if (!frozen.count(p.node().get())) out.push_back(p);
    }
    return out;
  };
  const ParameterGroups groups = bundle.parameter_groups();
  std::vector<Sgd::Group> sgd_groups;
  sgd_groups.push_back({keep(groups.backbone), cfg.lr_backbone});
  std::vector<Var> fresh = keep(groups.new_layers);
  fresh.insert(fresh.end(), auxiliary.begin(), auxiliary.end());
  sgd_groups.push_back({std::move(fresh), cfg.lr_new});
  return Sgd(std::move(sgd_groups), cfg.momentum, cfg.weight_decay, cfg.schedule);
}

}  // namespace trida
