#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "satkit/satkit.hpp"

namespace satkit::testing {

// |a - n| / max(|a|, |n|, floor): relative, with a floor so that
// near-zero entries are compared on an absolute scale.
inline double rel_err(double a, double n, double floor = 1e-2) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Worst relative error between backprop gradients and central differences
// for a scalar function of `inputs`.
inline double gradcheck(const std::function<TensorD(std::vector<TensorD>&)>& f, std::vector<TensorD>& inputs,
                        double eps = 1e-6, double floor = 1e-2) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  f(inputs).backward();
  std::vector<std::vector<double>> analytic;
  for (auto& x : inputs) analytic.emplace_back(x.grad().begin(), x.grad().end());
  double worst = 0;
  NoGradGuard ng;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& v = inputs[i].mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double keep = v[j];
      v[j] = keep + eps;
      const double up = f(inputs).item();
      v[j] = keep - eps;
      const double down = f(inputs).item();
      v[j] = keep;
      worst = std::max(worst, rel_err(analytic[i][j], (up - down) / (2 * eps), floor));
    }
  }
  return worst;
}

inline TensorD random_tensor(std::mt19937_64& rng, Shape shape, double lo = -2, double hi = 2) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return TensorD(std::move(shape), std::move(v));
}

// Random normalized lattice over K outputs; targets avoid blank and sos.
inline PosteriorLattice<double> random_lattice(std::mt19937_64& rng, std::size_t T, std::size_t U, std::size_t K,
                                               double spread = 3.0) {
  std::uniform_int_distribution<int> tok(Vocab::kSos + 1, static_cast<int>(K) - 1);
  std::vector<int> targets(U);
  for (auto& t : targets) t = tok(rng);
  auto logits = random_tensor(rng, {T, U + 1, K}, -spread, spread);
  NoGradGuard ng;
  auto lp = log_softmax_lastdim(logits);
  return PosteriorLattice<double>::from_values(T, targets, K, lp.values());
}

inline ModelConfig tiny_config(int labels = 4, int d_m = 8, int blocks = 1) {
  ModelConfig c;
  c.d_in = 5;
  c.attn.d_m = d_m;
  c.attn.n_h = 2;
  c.attn.d_ff = 2 * d_m;
  c.attn.n_enc_blocks = blocks;
  c.attn.n_pred_blocks = blocks;
  c.attn.dropout_rate = 0.0;
  c.d_joint = d_m;
  c.labels = ModelConfig::synthetic_labels(labels);
  return c;
}

}  // namespace satkit::testing
