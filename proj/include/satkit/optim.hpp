#pragma once

// SGD with momentum and plateau halving, and the warmup ("noam") schedule
// driving either an adaptive-moment update or a plain gradient step.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "satkit/params.hpp"

namespace satkit {

enum class OptimizerKind { kSgdMomentum, kNoamWarmup };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kNoamWarmup;
  // sgd-momentum
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int halving_patience = 1;
  double min_lr = 1e-6;
  // noam-warmup
  double lr_factor = 0.5;
  int warmup_steps = 8000;
  int model_dim = 512;
  bool adaptive_moments = true;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
};

inline std::string to_string(OptimizerKind k) {
  return k == OptimizerKind::kSgdMomentum ? "sgd-momentum" : "noam-warmup";
}

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd-momentum" || s == "sgd") return OptimizerKind::kSgdMomentum;
  if (s == "noam-warmup" || s == "noam") return OptimizerKind::kNoamWarmup;
  throw Error("unknown optimizer kind: " + s);
}

// lr(t) = factor * d_m^-0.5 * min(t^-0.5, t * warmup^-1.5), t >= 1
inline double noam_lr(double factor, int model_dim, int warmup, long step) {
  if (step < 1) throw Error("noam_lr: step must be >= 1, got " + std::to_string(step));
  if (warmup < 1 || model_dim < 1) throw Error("noam_lr: warmup and model_dim must be positive");
  const double t = static_cast<double>(step);
  return factor / std::sqrt(static_cast<double>(model_dim)) *
         std::min(1.0 / std::sqrt(t), t * std::pow(static_cast<double>(warmup), -1.5));
}

// Halves the SGD learning rate after `patience` epochs without improvement.
// Never goes below min_lr; once the floor is hit, stop() turns true.
class LrHalving {
 public:
  LrHalving(double lr, int patience, double min_lr) : lr_(lr), patience_(patience), min_lr_(min_lr) {
    if (patience < 1) throw Error("halving patience must be >= 1");
    lr_ = std::max(lr_, min_lr_);
  }

  // Returns the learning rate to use for the next epoch.
  double report(double dev_metric) {
    if (!has_best_ || dev_metric < best_) {
      best_ = dev_metric;
      has_best_ = true;
      bad_epochs_ = 0;
      return lr_;
    }
    if (++bad_epochs_ >= patience_) {
      bad_epochs_ = 0;
      const double halved = lr_ / 2;
      if (halved < min_lr_) {
        lr_ = min_lr_;
        floor_hit_ = true;
      } else {
        lr_ = halved;
      }
      ++halvings_;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  bool stop() const { return floor_hit_; }
  int halvings() const { return halvings_; }

 private:
  double lr_;
  int patience_;
  double min_lr_;
  double best_ = 0;
  bool has_best_ = false;
  int bad_epochs_ = 0;
  int halvings_ = 0;
  bool floor_hit_ = false;
};

template <class Real = double>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg), sgd_lr_(cfg.learning_rate) {}

  const OptimizerConfig& config() const { return cfg_; }

  // Learning rate used for `step` (1-based).
  double lr_at(long step) const {
    if (cfg_.kind == OptimizerKind::kNoamWarmup)
      return noam_lr(cfg_.lr_factor, cfg_.model_dim, cfg_.warmup_steps, step);
    return sgd_lr_;
  }
  void set_sgd_lr(double lr) { sgd_lr_ = lr; }
  double sgd_lr() const { return sgd_lr_; }

  // Applies one update using the grads currently held by `params`. Returns lr.
  double step(ParameterStore<Real>& params, long step) {
    if (cfg_.kind == OptimizerKind::kNoamWarmup && step < 1)
      throw Error("optimizer_step: noam step must be >= 1, got " + std::to_string(step));
    const double lr = lr_at(std::max(step, 1L));
    ensure_state(params);
    auto& entries = params.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto w = entries[i].tensor.data();
      auto g = entries[i].tensor.grad();
      auto& m = first_[i];
      if (cfg_.kind == OptimizerKind::kSgdMomentum) {
        for (std::size_t j = 0; j < w.size(); ++j) {
          m[j] = static_cast<Real>(cfg_.momentum) * m[j] + g[j];
          w[j] -= static_cast<Real>(lr) * m[j];
        }
      } else if (cfg_.adaptive_moments) {
        auto& v = second_[i];
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
        for (std::size_t j = 0; j < w.size(); ++j) {
          m[j] = static_cast<Real>(b1 * m[j] + (1 - b1) * g[j]);
          v[j] = static_cast<Real>(b2 * v[j] + (1 - b2) * g[j] * g[j]);
          const double mh = m[j] / c1, vh = v[j] / c2;
          w[j] -= static_cast<Real>(lr * mh / (std::sqrt(vh) + cfg_.adam_eps));
        }
      } else {
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= static_cast<Real>(lr) * g[j];
      }
    }
    return lr;
  }

  // Moment buffers, for checkpointing. Empty until the first step.
  std::vector<std::vector<Real>>& first_moments() { return first_; }
  std::vector<std::vector<Real>>& second_moments() { return second_; }

  void ensure_state(const ParameterStore<Real>& params) {
    if (first_.size() == params.size()) return;
    first_.clear();
    second_.clear();
    for (const auto& e : params.entries()) {
      first_.emplace_back(e.tensor.numel(), Real(0));
      second_.emplace_back(e.tensor.numel(), Real(0));
    }
  }

 private:
  OptimizerConfig cfg_;
  double sgd_lr_;
  std::vector<std::vector<Real>> first_, second_;
};

}  // namespace satkit
