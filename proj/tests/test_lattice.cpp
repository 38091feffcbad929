#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace satkit;
using satkit::testing::random_lattice;
using satkit::testing::random_tensor;
using satkit::testing::rel_err;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// K = 4 rows that put probability 1/2 on blank and on token 3, zero elsewhere.
PosteriorLattice<double> two_token_uniform(std::size_t T, std::vector<int> targets) {
  const std::size_t U = targets.size();
  std::vector<double> v;
  for (std::size_t r = 0; r < T * (U + 1); ++r) {
    v.insert(v.end(), {std::log(0.5), kNegInf, kNegInf, std::log(0.5)});
  }
  return PosteriorLattice<double>::from_values(T, std::move(targets), 4, std::move(v));
}

// Transducer loss recomputed by running the alpha recursion through the
// autodiff graph, one logsumexp per node.
TensorD autodiff_loss(const TensorD& logits, std::size_t T, const std::vector<int>& targets) {
  const std::size_t U = targets.size(), K = logits.dim(2);
  const auto lp = log_softmax_lastdim(logits);
  auto at = [&](std::size_t t, std::size_t u, int k) {
    return reshape(slice(reshape(lp, {T * (U + 1) * K}), 0, (t * (U + 1) + u) * K + static_cast<std::size_t>(k),
                         (t * (U + 1) + u) * K + static_cast<std::size_t>(k) + 1),
                   {1});
  };
  std::vector<TensorD> alpha(T * (U + 1));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u <= U; ++u) {
      std::vector<TensorD> terms;
      if (t == 0 && u == 0) {
        alpha[0] = TensorD::zeros({1});
        continue;
      }
      if (t > 0) terms.push_back(add(alpha[(t - 1) * (U + 1) + u], at(t - 1, u, Vocab::kBlank)));
      if (u > 0) terms.push_back(add(alpha[t * (U + 1) + u - 1], at(t, u - 1, targets[u - 1])));
      alpha[t * (U + 1) + u] =
          terms.size() == 1 ? terms[0] : reshape(logsumexp_lastdim(concat(terms, 0)), {1});
    }
  return scale(sum(add(alpha[(T - 1) * (U + 1) + U], at(T - 1, U, Vocab::kBlank))), -1.0);
}

}  // namespace

TEST(Loss, SingleBlankIsLn2) {
  auto lat = PosteriorLattice<double>::from_values(1, {}, 2, {std::log(0.5), std::log(0.5)});
  EXPECT_NEAR(transducer_loss(lat).loss, std::log(2.0), 1e-15);
}

TEST(Loss, TwoPathLatticeIsLn4) {
  const auto lat = two_token_uniform(2, {3});
  std::size_t paths = 0;
  EXPECT_NEAR(transducer_loss(lat).loss, std::log(4.0), 1e-15);
  EXPECT_NEAR(brute_force_loss(lat, &paths), std::log(4.0), 1e-15);
  EXPECT_EQ(paths, 2u);
}

TEST(BruteForce, PathCountIsBinomial) {
  std::mt19937_64 rng(1);
  std::size_t paths = 0;
  brute_force_loss(random_lattice(rng, 3, 2, 5), &paths);
  EXPECT_EQ(paths, 6u);
  brute_force_loss(random_lattice(rng, 5, 3, 5), &paths);
  EXPECT_EQ(paths, 35u);
}

TEST(BruteForce, GuardRejectsLargeLattices) {
  std::mt19937_64 rng(2);
  EXPECT_THROW(brute_force_loss(random_lattice(rng, 15, 7, 4)), Error);
}

TEST(Loss, MatchesBruteForceOnRandomLattices) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::size_t T = 1 + rng() % 5, U = rng() % 4, K = 4 + rng() % 3;
    const auto lat = random_lattice(rng, T, U, K);
    const double a = transducer_loss(lat).loss, b = brute_force_loss(lat);
    EXPECT_LE(std::abs(a - b) / std::abs(b), 1e-10) << "T=" << T << " U=" << U;
  }
}

TEST(Loss, ValidationErrors) {
  std::mt19937_64 rng(4);
  auto lat = random_lattice(rng, 2, 1, 4);
  lat.log_probs.mutable_values()[0] += 0.1;
  EXPECT_THROW(transducer_loss(lat), Error);
  auto empty = PosteriorLattice<double>::from_values(0, {3}, 4, {});
  try {
    transducer_loss(empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("T = 0"), std::string::npos);
  }
  auto bad_target = random_lattice(rng, 2, 1, 4);
  bad_target.targets[0] = Vocab::kBlank;
  EXPECT_THROW(transducer_loss(bad_target), Error);
}

TEST(ForwardBackward, AntiDiagonalsConserveMass) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    const std::size_t T = 1 + rng() % 6, U = rng() % 5;
    const auto lat = random_lattice(rng, T, U, 6);
    const auto fb = forward_backward(lat);
    EXPECT_NEAR(fb.alpha_terminal, fb.log_likelihood, 1e-10);
    for (std::size_t n = 0; n <= T - 1 + U; ++n) {
      double acc = kLogZero;
      for (std::size_t t = 0; t < T; ++t)
        if (n >= t && n - t <= U) acc = log_add(acc, fb.a(t, n - t) + fb.b(t, n - t));
      EXPECT_NEAR(acc, fb.log_likelihood, 1e-9);
    }
  }
}

TEST(Gradient, OccupancyPerAntiDiagonalIsOne) {
  std::mt19937_64 rng(6);
  const auto lat = random_lattice(rng, 4, 3, 5);
  const auto res = transducer_loss(lat);
  for (std::size_t n = 0; n <= lat.T - 1 + lat.U; ++n) {
    double occ = 0;
    for (std::size_t t = 0; t < lat.T; ++t) {
      if (n < t || n - t > lat.U) continue;
      for (std::size_t k = 0; k < lat.K; ++k) occ += res.grad[lat.index(t, n - t, k)];
    }
    EXPECT_NEAR(occ, -1.0, 1e-12);
  }
}

TEST(Gradient, MatchesFiniteDifferencesOfBruteForce) {
  std::mt19937_64 rng(7);
  const double eps = 1e-6;
  for (int i = 0; i < 20; ++i) {
    const std::size_t T = 1 + rng() % 4, U = rng() % 3;
    auto lat = random_lattice(rng, T, U, 4);
    const auto res = transducer_loss(lat);
    auto& v = lat.log_probs.mutable_values();
    // Brute force sums path products directly, so unnormalized probes are fine
    // once validation is bypassed; reuse the unchecked recursion's enumeration.
    auto brute = [&] {
      double total = 0;
      auto walk = [&](auto&& self, std::size_t t, std::size_t u, double lp) -> void {
        if (t == T - 1 && u == U) {
          total += std::exp(lp + v[lat.index(t, u, 0)]);
          return;
        }
        if (t + 1 < T) self(self, t + 1, u, lp + v[lat.index(t, u, 0)]);
        if (u < U) self(self, t, u + 1, lp + v[lat.index(t, u, static_cast<std::size_t>(lat.targets[u]))]);
      };
      walk(walk, 0, 0, 0.0);
      return -std::log(total);
    };
    double worst = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double keep = v[j];
      v[j] = keep + eps;
      const double up = brute();
      v[j] = keep - eps;
      const double down = brute();
      v[j] = keep;
      worst = std::max(worst, rel_err(res.grad[j], (up - down) / (2 * eps)));
    }
    EXPECT_LT(worst, 1e-6);
  }
}

TEST(Gradient, AnalyticMatchesAutodiffThroughRecursion) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10; ++i) {
    const std::size_t T = 1 + rng() % 4, U = rng() % 3, K = 5;
    std::vector<int> targets(U);
    for (auto& t : targets) t = 2 + static_cast<int>(rng() % 3);
    auto a = random_tensor(rng, {T, U + 1, K});
    auto b = TensorD(a.shape(), a.values());
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    PosteriorLattice<double> lat;
    lat.T = T;
    lat.U = U;
    lat.K = K;
    lat.targets = targets;
    lat.log_probs = log_softmax_lastdim(a);
    auto l1 = transducer_loss_tensor(lat);
    l1.backward();
    auto l2 = autodiff_loss(b, T, targets);
    l2.backward();
    EXPECT_NEAR(l1.item(), l2.item(), 1e-12);
    for (std::size_t j = 0; j < a.numel(); ++j) EXPECT_NEAR(a.grad()[j], b.grad()[j], 1e-10);
  }
}

// Mass is moved onto one transition from tokens the lattice never uses at
// that node, so the other outgoing transition keeps its probability.
TEST(Loss, MoreMassOnTargetTransitionNeverHurts) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    auto lat = random_lattice(rng, 3, 2, 6);
    const double before = transducer_loss(lat).loss;
    const std::size_t t = rng() % 3, u = rng() % 3;
    const bool label = u < 2 && rng() % 2;
    const std::size_t k = label ? static_cast<std::size_t>(lat.targets[u]) : 0;
    auto& v = lat.log_probs.mutable_values();
    double moved = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      const bool used = j == 0 || (u < 2 && j == static_cast<std::size_t>(lat.targets[u]));
      if (used) continue;
      moved += 0.5 * std::exp(v[lat.index(t, u, j)]);
      v[lat.index(t, u, j)] += std::log(0.5);
    }
    v[lat.index(t, u, k)] = std::log(std::exp(v[lat.index(t, u, k)]) + moved);
    EXPECT_LE(transducer_loss(lat).loss, before + 1e-12);
  }
}

// Renormalizing the whole row is not monotone: boosting blank also takes
// mass from the label transition at the same node.
TEST(Loss, FullRowRenormalizationCanIncreaseLoss) {
  // T=2, U=1 with the label strongly preferred at (0,0).
  std::vector<double> p{0.1, 0.0, 0.0, 0.9, 0.5, 0.0, 0.0, 0.5, 0.9, 0.0, 0.0, 0.1, 0.9, 0.0, 0.0, 0.1};
  auto make = [&](const std::vector<double>& probs) {
    std::vector<double> lp;
    for (double x : probs) lp.push_back(x > 0 ? std::log(x) : kNegInf);
    return PosteriorLattice<double>::from_values(2, {3}, 4, lp);
  };
  const double before = transducer_loss(make(p)).loss;
  p[0] = 0.9;
  p[3] = 0.1;
  EXPECT_GT(transducer_loss(make(p)).loss, before);
}

TEST(Loss, InvariantToPermutingUnusedTokens) {
  std::mt19937_64 rng(10);
  auto lat = random_lattice(rng, 4, 2, 7);
  lat.targets = {3, 4};
  const double before = transducer_loss(lat).loss;
  auto& v = lat.log_probs.mutable_values();
  for (std::size_t r = 0; r < lat.T * (lat.U + 1); ++r) std::swap(v[r * 7 + 5], v[r * 7 + 6]);
  EXPECT_EQ(transducer_loss(lat).loss, before);
}

TEST(Loss, Deterministic) {
  std::mt19937_64 rng(11);
  const auto lat = random_lattice(rng, 6, 4, 6);
  EXPECT_EQ(transducer_loss(lat).loss, transducer_loss(lat).loss);
}

TEST(Joint, MinimalLatticeHasOneRow) {
  std::mt19937_64 rng(12);
  ParameterStore<double> store;
  const auto net = JointNetwork<double>::create(store, 4, 6, 5, JointMode::kConcatTanh, rng);
  const auto lat = joint(random_tensor(rng, {1, 4}), random_tensor(rng, {1, 4}), net, {});
  EXPECT_EQ(lat.log_probs.shape(), (Shape{1, 1, 5}));
  EXPECT_NO_THROW(lat.validate());
}

TEST(Joint, MatchesFormulaAndRowsDependOnOwnInputs) {
  std::mt19937_64 rng(13);
  ParameterStore<double> store;
  const auto net = JointNetwork<double>::create(store, 3, 4, 5, JointMode::kConcatTanh, rng);
  for (auto b = store.get("joint.b_in"); auto& x : b.mutable_values()) x = 0.1;
  for (auto b = store.get("joint.b_out"); auto& x : b.mutable_values()) x = -0.3;
  const auto f = random_tensor(rng, {3, 3}), g = random_tensor(rng, {2, 3});
  const auto lat = joint(f, g, net, {4});
  const auto& Win = net.w_in;
  const auto& Wout = net.w_out;
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t u = 0; u < 2; ++u) {
      std::vector<double> m(5, -0.3);
      for (std::size_t h = 0; h < 4; ++h) {
        double pre = 0.1;
        for (std::size_t i = 0; i < 3; ++i) pre += f.at(t, i) * Win.at(i, h) + g.at(u, i) * Win.at(3 + i, h);
        for (std::size_t k = 0; k < 5; ++k) m[k] += std::tanh(pre) * Wout.at(h, k);
      }
      double z = kLogZero;
      for (double x : m) z = log_add(z, x);
      for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(lat.logp(t, u, static_cast<int>(k)), m[k] - z, 1e-12);
    }
  // Perturbing frame 0 leaves rows of frames 1, 2 untouched.
  auto f2 = TensorD(f.shape(), f.values());
  f2.mutable_values()[0] += 1.0;
  const auto lat2 = joint(f2, g, net, {4});
  for (std::size_t t = 1; t < 3; ++t)
    for (std::size_t u = 0; u < 2; ++u)
      for (int k = 0; k < 5; ++k) EXPECT_EQ(lat.logp(t, u, k), lat2.logp(t, u, k));
  EXPECT_THROW(joint(random_tensor(rng, {3, 4}), g, net, {4}), ShapeError);
}

TEST(Joint, AdditiveModeProducesNormalizedRows) {
  std::mt19937_64 rng(14);
  ParameterStore<double> store;
  const auto net = JointNetwork<double>::create(store, 3, 4, 5, JointMode::kAdditiveTanh, rng);
  const auto lat = joint(random_tensor(rng, {2, 3}), random_tensor(rng, {3, 3}), net, {3, 4});
  EXPECT_NO_THROW(lat.validate());
}

TEST(Dump, RoundTrip) {
  std::mt19937_64 rng(15);
  const auto lat = random_lattice(rng, 3, 2, 4);
  std::stringstream ss;
  write_lattice_dump(ss, lat);
  const auto d = read_lattice_dump(ss);
  EXPECT_EQ(d.T, 3u);
  EXPECT_EQ(d.U, 2u);
  EXPECT_EQ(d.K, 4u);
  for (std::size_t i = 0; i < d.log_probs.size(); ++i) EXPECT_EQ(d.log_probs[i], lat.log_probs[i]);
}
