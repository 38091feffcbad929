#pragma once

// Transducer output lattice: the joint network that fills it, the
// forward-backward negative log-likelihood with its analytic gradient, and a
// path-enumeration reference.
//
// Node (t, u) holds log p(k | t, u). From (t, u) a blank moves to (t+1, u) and
// the label l_u moves to (t, u+1). Every complete path ends with the blank
// emitted at (T-1, U).

#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "satkit/nnet.hpp"
#include "satkit/ops.hpp"
#include "satkit/vocab.hpp"

namespace satkit {

// Log-space zero. Anything at or below half of it is treated as zero.
inline constexpr double kLogZero = -1e30;

inline bool is_log_zero(double v) { return v <= kLogZero / 2; }

inline double log_add(double a, double b) {
  if (is_log_zero(a)) return is_log_zero(b) ? kLogZero : b;
  if (is_log_zero(b)) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

template <class Real>
constexpr double normalization_tolerance() {
  return sizeof(Real) >= 8 ? 1e-10 : 1e-4;
}

template <class Real = double>
struct PosteriorLattice {
  std::size_t T = 0;
  std::size_t U = 0;
  std::size_t K = 0;
  std::vector<int> targets;
  Tensor<Real> log_probs;  // {T, U+1, K}

  std::size_t index(std::size_t t, std::size_t u, std::size_t k) const { return (t * (U + 1) + u) * K + k; }
  Real logp(std::size_t t, std::size_t u, int k) const {
    return log_probs[index(t, u, static_cast<std::size_t>(k))];
  }

  static PosteriorLattice from_values(std::size_t T, std::vector<int> targets, std::size_t K,
                                      std::vector<Real> log_probs) {
    PosteriorLattice lat;
    lat.T = T;
    lat.U = targets.size();
    lat.K = K;
    lat.targets = std::move(targets);
    lat.log_probs = Tensor<Real>({T, lat.U + 1, K}, std::move(log_probs));
    return lat;
  }

  // Shape, target alphabet and per-row normalization checks.
  void validate() const {
    if (T == 0) throw Error(U > 0 ? "lattice: U > 0 with T = 0" : "lattice: T must be >= 1");
    if (K < 2) throw Error("lattice: vocabulary size must be >= 2");
    if (targets.size() != U) throw Error("lattice: target length does not match U");
    if (!log_probs.defined() || log_probs.shape() != Shape{T, U + 1, K})
      throw ShapeError("lattice: log_probs shape " +
                       (log_probs.defined() ? shape_str(log_probs.shape()) : std::string("<none>")) +
                       " vs " + shape_str({T, U + 1, K}));
    for (int l : targets)
      if (l == Vocab::kBlank || l == Vocab::kSos || l < 0 || static_cast<std::size_t>(l) >= K)
        throw Error("lattice: invalid target token " + std::to_string(l));
    const double tol = normalization_tolerance<Real>();
    const auto& v = log_probs.values();
    for (std::size_t r = 0; r < T * (U + 1); ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(v[r * K + k]));
      if (!std::isfinite(mx)) throw Error("lattice: row " + std::to_string(r) + " is not finite");
      double z = 0;
      for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(v[r * K + k]) - mx);
      if (std::abs(mx + std::log(z)) > tol)
        throw Error("lattice: row " + std::to_string(r) + " is not normalized");
    }
  }
};

enum class JointMode { kConcatTanh, kAdditiveTanh };

inline std::string to_string(JointMode m) { return m == JointMode::kConcatTanh ? "concat" : "additive"; }
inline JointMode joint_mode_from_string(const std::string& s) {
  if (s == "concat") return JointMode::kConcatTanh;
  if (s == "additive") return JointMode::kAdditiveTanh;
  throw Error("unknown joint mode: " + s);
}

// m_{t,u} = W_out tanh(W_in [f_t; g_u] + b_in) + b_out. The additive variant
// feeds f_t and g_u through one shared input projection instead.
template <class Real = double>
struct JointNetwork {
  Tensor<Real> w_in, b_in, w_out, b_out;
  JointMode mode = JointMode::kConcatTanh;
  std::size_t d_m = 0;

  template <class Rng>
  static JointNetwork create(ParameterStore<Real>& store, std::size_t d_m, std::size_t d_joint, std::size_t K,
                             JointMode mode, Rng& rng) {
    const std::size_t in = mode == JointMode::kConcatTanh ? 2 * d_m : d_m;
    store.add_matrix("joint.w_in", in, d_joint, rng);
    store.add_vector("joint.b_in", d_joint, Real(0));
    store.add_matrix("joint.w_out", d_joint, K, rng);
    store.add_vector("joint.b_out", K, Real(0));
    return bind(store, d_m, mode);
  }
  static JointNetwork bind(ParameterStore<Real>& store, std::size_t d_m, JointMode mode) {
    return {store.get("joint.w_in"), store.get("joint.b_in"), store.get("joint.w_out"),
            store.get("joint.b_out"), mode, d_m};
  }

  // f rows projected into the joint space (no bias).
  Tensor<Real> project_frames(const Tensor<Real>& f) const {
    if (f.rank() != 2 || f.dim(1) != d_m) shape_mismatch("joint", f.shape(), {f.rows(), d_m});
    return matmul(f, mode == JointMode::kConcatTanh ? slice(w_in, 0, 0, d_m) : w_in);
  }
  // g rows projected into the joint space, bias included.
  Tensor<Real> project_labels(const Tensor<Real>& g) const {
    if (g.rank() != 2 || g.dim(1) != d_m) shape_mismatch("joint", g.shape(), {g.rows(), d_m});
    return add_bias(matmul(g, mode == JointMode::kConcatTanh ? slice(w_in, 0, d_m, 2 * d_m) : w_in), b_in);
  }
  // log p(.|t,u) for every pairing of projected frame rows and label rows,
  // row-major over (frame, label).
  Tensor<Real> log_probs(const Tensor<Real>& proj_f, const Tensor<Real>& proj_g) const {
    return log_softmax_lastdim(add_bias(matmul(tanh(pair_add(proj_f, proj_g)), w_out), b_out));
  }
};

// Fills the lattice for f (T x d_m) and g ((U+1) x d_m).
template <class Real>
PosteriorLattice<Real> joint(const Tensor<Real>& f, const Tensor<Real>& g, const JointNetwork<Real>& net,
                             const std::vector<int>& targets) {
  if (f.rank() != 2 || g.rank() != 2 || f.dim(1) != g.dim(1)) shape_mismatch("joint", f.shape(), g.shape());
  if (g.dim(0) != targets.size() + 1)
    throw ShapeError("joint: g has " + std::to_string(g.dim(0)) + " rows for " +
                     std::to_string(targets.size()) + " targets");
  PosteriorLattice<Real> lat;
  lat.T = f.dim(0);
  lat.U = targets.size();
  lat.targets = targets;
  auto lp = net.log_probs(net.project_frames(f), net.project_labels(g));
  lat.K = lp.dim(1);
  lat.log_probs = reshape(lp, {lat.T, lat.U + 1, lat.K});
  return lat;
}

struct ForwardBackward {
  std::size_t T = 0, U = 0;
  std::vector<double> alpha;  // T x (U+1)
  std::vector<double> beta;   // T x (U+1)
  double log_likelihood = 0;  // beta(0,0)
  double alpha_terminal = 0;  // alpha(T-1,U) + log p(blank|T-1,U)

  double a(std::size_t t, std::size_t u) const { return alpha[t * (U + 1) + u]; }
  double b(std::size_t t, std::size_t u) const { return beta[t * (U + 1) + u]; }
};

// Recursions without the normalization check, for lattices whose rows are
// deliberately perturbed (finite-difference probes).
template <class Real>
ForwardBackward forward_backward_unchecked(const PosteriorLattice<Real>& lat) {
  const std::size_t T = lat.T, U = lat.U, W = U + 1;
  constexpr int kB = Vocab::kBlank;
  auto lp = [&](std::size_t t, std::size_t u, int k) { return static_cast<double>(lat.logp(t, u, k)); };
  ForwardBackward fb;
  fb.T = T;
  fb.U = U;
  fb.alpha.assign(T * W, kLogZero);
  fb.beta.assign(T * W, kLogZero);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      if (t == 0 && u == 0) {
        fb.alpha[0] = 0;
        continue;
      }
      double v = kLogZero;
      if (t > 0) v = log_add(v, fb.alpha[(t - 1) * W + u] + lp(t - 1, u, kB));
      if (u > 0) v = log_add(v, fb.alpha[t * W + u - 1] + lp(t, u - 1, lat.targets[u - 1]));
      fb.alpha[t * W + u] = v;
    }
  for (std::size_t t = T; t-- > 0;)
    for (std::size_t u = W; u-- > 0;) {
      if (t == T - 1 && u == U) {
        fb.beta[t * W + u] = lp(t, u, kB);
        continue;
      }
      double v = kLogZero;
      if (t + 1 < T) v = log_add(v, fb.beta[(t + 1) * W + u] + lp(t, u, kB));
      if (u < U) v = log_add(v, fb.beta[t * W + u + 1] + lp(t, u, lat.targets[u]));
      fb.beta[t * W + u] = v;
    }
  fb.log_likelihood = fb.beta[0];
  fb.alpha_terminal = fb.alpha[(T - 1) * W + U] + lp(T - 1, U, kB);
  return fb;
}

template <class Real>
ForwardBackward forward_backward(const PosteriorLattice<Real>& lat) {
  lat.validate();
  return forward_backward_unchecked(lat);
}

template <class Real = double>
struct TransducerLoss {
  double loss = 0;
  std::vector<Real> grad;  // d loss / d log p(k|t,u), same layout as log_probs
};

// -ln P(y*|x) and its gradient with respect to the lattice log-probabilities.
template <class Real>
TransducerLoss<Real> transducer_loss(const PosteriorLattice<Real>& lat) {
  const auto fb = forward_backward(lat);
  const std::size_t T = lat.T, U = lat.U;
  const double logP = fb.log_likelihood;
  if (is_log_zero(logP)) throw Error("transducer_loss: target sequence has zero probability");
  TransducerLoss<Real> out;
  out.loss = -logP;
  out.grad.assign(lat.log_probs.numel(), Real(0));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      const double a = fb.a(t, u);
      if (is_log_zero(a)) continue;
      double blank_next = kLogZero;
      if (t + 1 < T)
        blank_next = fb.b(t + 1, u);
      else if (u == U)
        blank_next = 0;
      if (!is_log_zero(blank_next))
        out.grad[lat.index(t, u, Vocab::kBlank)] -=
            static_cast<Real>(std::exp(a + lat.logp(t, u, Vocab::kBlank) + blank_next - logP));
      if (u < U) {
        const int l = lat.targets[u];
        out.grad[lat.index(t, u, static_cast<std::size_t>(l))] -=
            static_cast<Real>(std::exp(a + lat.logp(t, u, l) + fb.b(t, u + 1) - logP));
      }
    }
  return out;
}

// Graph-connected loss: backward pushes the analytic gradient into log_probs.
template <class Real>
Tensor<Real> transducer_loss_tensor(const PosteriorLattice<Real>& lat) {
  auto res = transducer_loss(lat);
  return make_op<Real>("transducer_loss", Shape{}, std::vector<Real>{static_cast<Real>(res.loss)},
                       {&lat.log_probs}, [grad = std::move(res.grad)](Node<Real>& self) {
                         auto* g = detail::grad_of(self, 0);
                         if (!g) return;
                         const Real s = self.grad[0];
                         for (std::size_t i = 0; i < grad.size(); ++i) (*g)[i] += s * grad[i];
                       });
}

inline constexpr std::size_t kBruteForceMaxSteps = 20;

// Enumerates every monotone path (T-1 blank moves and U label moves in any
// order, then the terminal blank) and sums path probabilities in linear space.
template <class Real>
double brute_force_loss(const PosteriorLattice<Real>& lat, std::size_t* path_count = nullptr) {
  lat.validate();
  if (lat.T - 1 + lat.U > kBruteForceMaxSteps)
    throw Error("brute_force_loss: T-1+U = " + std::to_string(lat.T - 1 + lat.U) + " exceeds " +
                std::to_string(kBruteForceMaxSteps));
  double total = 0;
  std::size_t count = 0;
  auto p = [&](std::size_t t, std::size_t u, int k) { return std::exp(static_cast<double>(lat.logp(t, u, k))); };
  auto walk = [&](auto&& self, std::size_t t, std::size_t u, double prob) -> void {
    if (t == lat.T - 1 && u == lat.U) {
      total += prob * p(t, u, Vocab::kBlank);
      ++count;
      return;
    }
    if (t + 1 < lat.T) self(self, t + 1, u, prob * p(t, u, Vocab::kBlank));
    if (u < lat.U) self(self, t, u + 1, prob * p(t, u, lat.targets[u]));
  };
  walk(walk, 0, 0, 1.0);
  if (path_count) *path_count = count;
  return -std::log(total);
}

// Plain-text dump: "T U K" then T*(U+1) rows of K log-probabilities, t-major.
struct LatticeDump {
  std::size_t T = 0, U = 0, K = 0;
  std::vector<double> log_probs;
  double logp(std::size_t t, std::size_t u, std::size_t k) const { return log_probs[(t * (U + 1) + u) * K + k]; }
};

template <class Real>
void write_lattice_dump(std::ostream& os, const PosteriorLattice<Real>& lat) {
  os << lat.T << ' ' << lat.U << ' ' << lat.K << '\n';
  os.precision(17);
  const auto& v = lat.log_probs.values();
  for (std::size_t r = 0; r < lat.T * (lat.U + 1); ++r) {
    for (std::size_t k = 0; k < lat.K; ++k) os << (k ? " " : "") << static_cast<double>(v[r * lat.K + k]);
    os << '\n';
  }
}

inline LatticeDump read_lattice_dump(std::istream& is) {
  LatticeDump d;
  if (!(is >> d.T >> d.U >> d.K) || d.T == 0 || d.K < 2) throw Error("lattice dump: bad header");
  d.log_probs.resize(d.T * (d.U + 1) * d.K);
  for (auto& v : d.log_probs)
    if (!(is >> v)) throw Error("lattice dump: truncated body");
  return d;
}

}  // namespace satkit
