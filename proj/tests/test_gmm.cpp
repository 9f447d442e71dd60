#include <catch2/catch_amalgamated.hpp>

#include "test_helpers.hpp"

using namespace musle;
using ad::Tensor;

namespace {

Tensor random_tensor(int r, int c, Rng& rng, double s = 1.0) {
  Tensor t(r, c);
  for (auto& x : t.v) x = rng.normal(0.0, s);
  return t;
}

// random rows on the simplex
Tensor random_memberships(int n, int k, Rng& rng) {
  Tensor g(n, k);
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      g.at(i, j) = rng.uniform(0.001, 1.0);
      sum += g.at(i, j);
    }
    for (int j = 0; j < k; ++j) g.at(i, j) /= sum;
  }
  return g;
}

// independent naive triple-loop estimator (the AC-2 oracle)
struct NaiveMix {
  std::vector<double> phi, mu, var;
};

NaiveMix naive_estimate(const Tensor& X, const Tensor& G, double floor_v) {
  const int N = X.rows, D = X.cols, K = G.cols;
  NaiveMix m;
  m.phi.assign(static_cast<std::size_t>(K), 0.0);
  m.mu.assign(static_cast<std::size_t>(K) * D, 0.0);
  m.var.assign(static_cast<std::size_t>(K) * D, 0.0);
  for (int k = 0; k < K; ++k) {
    double s = 0.0;
    for (int n = 0; n < N; ++n) s += G.at(n, k);
    m.phi[static_cast<std::size_t>(k)] = s / N;
    for (int i = 0; i < D; ++i) {
      double num = 0.0;
      for (int n = 0; n < N; ++n) num += G.at(n, k) * X.at(n, i);
      m.mu[static_cast<std::size_t>(k * D + i)] = num / s;
    }
    for (int i = 0; i < D; ++i) {
      double num = 0.0;
      for (int n = 0; n < N; ++n) {
        const double d = X.at(n, i) - m.mu[static_cast<std::size_t>(k * D + i)];
        num += G.at(n, k) * d * d;
      }
      m.var[static_cast<std::size_t>(k * D + i)] = std::max(num / s, floor_v);
    }
  }
  return m;
}

}  // namespace

TEST_CASE("membership: zero final layer is uniform; K=1 is certain") {
  ad::ParamStore store;
  const MembershipNetRef net4 = make_membership_net(store, 0, 3, 6, 5, 4, 11);
  std::fill(store.value(net4.w2).v.begin(), store.value(net4.w2).v.end(), 0.0);
  Rng rng(3);
  const Tensor X = random_tensor(3, 6, rng);
  const Tensor G = predict_membership(X, net4, store);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 4; ++j) REQUIRE(G.at(i, j) == Catch::Approx(0.25).epsilon(1e-14));
  }

  const MembershipNetRef net1 = make_membership_net(store, 1, 3, 6, 5, 1, 12);
  const Tensor G1 = predict_membership(X, net1, store);
  for (int i = 0; i < 3; ++i) REQUIRE(G1.at(i, 0) == 1.0);
}

TEST_CASE("membership matches a straight-line recomputation") {
  ad::ParamStore store;
  const MembershipNetRef net = make_membership_net(store, 0, 4, 5, 6, 3, 21);
  Rng rng(9);
  const Tensor X = random_tensor(2, 5, rng);
  const Tensor G = predict_membership(X, net, store);

  const auto& W1 = store.value(net.w1);
  const auto& b1 = store.value(net.b1);
  const auto& W2 = store.value(net.w2);
  const auto& b2 = store.value(net.b2);
  for (int i = 0; i < 2; ++i) {
    std::vector<double> h(6);
    for (int j = 0; j < 6; ++j) {
      double acc = b1.at(0, j);
      for (int k = 0; k < 5; ++k) acc += X.at(i, k) * W1.at(j, k);
      h[static_cast<std::size_t>(j)] = std::max(0.0, acc);
    }
    std::vector<double> logits(3);
    double mx = -1e300;
    for (int o = 0; o < 3; ++o) {
      double acc = b2.at(0, o);
      for (int j = 0; j < 6; ++j) acc += h[static_cast<std::size_t>(j)] * W2.at(o, j);
      logits[static_cast<std::size_t>(o)] = acc;
      mx = std::max(mx, acc);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    for (int o = 0; o < 3; ++o) {
      REQUIRE(G.at(i, o) == Catch::Approx(std::exp(logits[static_cast<std::size_t>(o)] - mx) / z).epsilon(1e-13));
    }
  }
}

TEST_CASE("estimate_mixture: hand example N=2, K=1, xs={0,2}") {
  Tensor X(2, 1);
  X.at(0, 0) = 0.0;
  X.at(1, 0) = 2.0;
  Tensor G(2, 1, 1.0);
  const EstimationResult r = estimate_mixture(X, G, 1e-6);
  REQUIRE(r.mix.weights[0] == Catch::Approx(1.0).epsilon(1e-15));
  REQUIRE(r.mix.means[0] == Catch::Approx(1.0).epsilon(1e-15));
  REQUIRE(r.mix.vars[0] == Catch::Approx(1.0).epsilon(1e-15));
  REQUIRE(r.degenerate[0] == 0);
}

TEST_CASE("estimate_mixture: one-hot memberships reduce to group means") {
  Rng rng(5);
  Tensor X = random_tensor(6, 3, rng);
  Tensor G(6, 2);
  for (int n = 0; n < 6; ++n) G.at(n, n < 4 ? 0 : 1) = 1.0;
  const EstimationResult r = estimate_mixture(X, G, 1e-9);
  for (int i = 0; i < 3; ++i) {
    double m0 = 0.0, m1 = 0.0;
    for (int n = 0; n < 4; ++n) m0 += X.at(n, i) / 4;
    for (int n = 4; n < 6; ++n) m1 += X.at(n, i) / 2;
    REQUIRE(r.mix.means[static_cast<std::size_t>(i)] == Catch::Approx(m0).margin(1e-14));
    REQUIRE(r.mix.means[static_cast<std::size_t>(3 + i)] == Catch::Approx(m1).margin(1e-14));
  }
  REQUIRE(r.mix.weights[0] == Catch::Approx(4.0 / 6).epsilon(1e-14));
}

TEST_CASE("estimate_mixture equals the naive triple-loop oracle to 1e-10") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int N = 1 + static_cast<int>(rng.below(64));
    const int K = 1 + static_cast<int>(rng.below(6));
    const int D = 1 + static_cast<int>(rng.below(32));
    const Tensor X = random_tensor(N, D, rng, 2.0);
    const Tensor G = random_memberships(N, K, rng);
    const EstimationResult got = estimate_mixture(X, G, 1e-6);
    const NaiveMix want = naive_estimate(X, G, 1e-6);
    for (std::size_t i = 0; i < want.phi.size(); ++i) {
      REQUIRE(std::abs(got.mix.weights[i] - want.phi[i]) < 1e-10);
    }
    for (std::size_t i = 0; i < want.mu.size(); ++i) {
      REQUIRE(std::abs(got.mix.means[i] - want.mu[i]) < 1e-10);
    }
    for (std::size_t i = 0; i < want.var.size(); ++i) {
      REQUIRE(std::abs(got.mix.vars[i] - want.var[i]) < 1e-10);
    }
  }
}

TEST_CASE("estimate_mixture flags kernels with vanishing membership") {
  Tensor X(3, 2);
  Tensor G(3, 2);
  for (int n = 0; n < 3; ++n) {
    G.at(n, 0) = 1.0;
    G.at(n, 1) = 0.0;
  }
  const EstimationResult r = estimate_mixture(X, G, 1e-6);
  REQUIRE(r.degenerate[0] == 0);
  REQUIRE(r.degenerate[1] == 1);
}

TEST_CASE("simplex and shift-covariance properties of the estimator") {
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const int N = 2 + static_cast<int>(rng.below(20));
    const int K = 1 + static_cast<int>(rng.below(4));
    const int D = 1 + static_cast<int>(rng.below(6));
    const Tensor X = random_tensor(N, D, rng);
    const Tensor G = random_memberships(N, K, rng);
    const EstimationResult base = estimate_mixture(X, G, 1e-9);

    double wsum = 0.0;
    for (double w : base.mix.weights) wsum += w;
    REQUIRE(std::abs(wsum - 1.0) < 1e-10);

    std::vector<double> t(static_cast<std::size_t>(D));
    for (auto& x : t) x = rng.uniform(-5.0, 5.0);
    Tensor Xs = X;
    for (int n = 0; n < N; ++n) {
      for (int i = 0; i < D; ++i) Xs.at(n, i) += t[static_cast<std::size_t>(i)];
    }
    const EstimationResult shifted = estimate_mixture(Xs, G, 1e-9);
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < D; ++i) {
        REQUIRE(std::abs(shifted.mix.mean(k)[i] - base.mix.mean(k)[i] - t[static_cast<std::size_t>(i)]) < 1e-10);
        REQUIRE(std::abs(shifted.mix.var(k)[i] - base.mix.var(k)[i]) < 1e-10);
      }
      REQUIRE(std::abs(shifted.mix.weights[static_cast<std::size_t>(k)] -
                       base.mix.weights[static_cast<std::size_t>(k)]) < 1e-12);
    }
  }
}

TEST_CASE("log-likelihood closed forms") {
  SECTION("standard normal at its mean") {
    MixtureParams m = MixtureParams::init(1, 1);
    REQUIRE(log_likelihood({0.0}, m) == Catch::Approx(-0.91893853320467274).epsilon(1e-12));
  }

  SECTION("at the mean the quadratic term vanishes") {
    Rng rng(7);
    MixtureParams m = MixtureParams::init(1, 4);
    for (int i = 0; i < 4; ++i) {
      m.means[static_cast<std::size_t>(i)] = rng.normal();
      m.vars[static_cast<std::size_t>(i)] = rng.uniform(0.2, 3.0);
    }
    double want = 0.0;
    for (int i = 0; i < 4; ++i) {
      want -= 0.5 * std::log(2.0 * 3.14159265358979323846 * m.vars[static_cast<std::size_t>(i)]);
    }
    const std::vector<double> x(m.means.begin(), m.means.end());
    REQUIRE(log_likelihood(x, m) == Catch::Approx(want).epsilon(1e-12));
  }

  SECTION("two-kernel 1-D mixture matches the direct density sum") {
    MixtureParams m = MixtureParams::init(2, 1);
    m.weights = {0.3, 0.7};
    m.means = {-1.0, 2.0};
    m.vars = {0.5, 2.0};
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
      const double x = rng.uniform(-4.0, 5.0);
      double p = 0.0;
      for (int k = 0; k < 2; ++k) {
        const double d = x - m.means[static_cast<std::size_t>(k)];
        p += m.weights[static_cast<std::size_t>(k)] *
             std::exp(-0.5 * d * d / m.vars[static_cast<std::size_t>(k)]) /
             std::sqrt(2.0 * 3.14159265358979323846 * m.vars[static_cast<std::size_t>(k)]);
      }
      REQUIRE(log_likelihood({x}, m) == Catch::Approx(std::log(p)).epsilon(1e-11));
    }
  }

  SECTION("scaling the covariance by c lowers the peak by (D/2) log c") {
    MixtureParams m = MixtureParams::init(1, 3);
    m.means = {0.5, -0.25, 1.0};
    m.vars = {0.4, 0.9, 1.7};
    const std::vector<double> x(m.means.begin(), m.means.end());
    const double base = log_likelihood(x, m);
    const double c = 3.7;
    for (auto& v : m.vars) v *= c;
    REQUIRE(log_likelihood(x, m) == Catch::Approx(base - 1.5 * std::log(c)).epsilon(1e-12));
  }

  SECTION("log-domain safety at huge distances") {
    MixtureParams m = MixtureParams::init(2, 2);
    m.vars.assign(4, 1e-6);
    const double ll = log_likelihood({1e6, -1e6}, m);
    REQUIRE(std::isfinite(ll));
  }
}

TEST_CASE("covariance penalty is the sum of reciprocal diagonals") {
  MixtureParams m = MixtureParams::init(2, 3);
  REQUIRE(covariance_penalty(m) == Catch::Approx(6.0));

  MixtureParams m2 = MixtureParams::init(1, 2);
  m2.vars = {0.5, 0.25};
  REQUIRE(covariance_penalty(m2) == Catch::Approx(6.0));

  Rng rng(5);
  MixtureParams m3 = MixtureParams::init(3, 4);
  for (auto& v : m3.vars) v = rng.uniform(0.1, 2.0);
  double want = 0.0;
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < 4; ++i) want += 1.0 / m3.var(k)[i];
  }
  REQUIRE(covariance_penalty(m3) == Catch::Approx(want).epsilon(1e-13));
}

TEST_CASE("batch loss: identical samples drive variances to the floor") {
  ad::ParamStore store;
  const int D = 4;
  const MembershipNetRef net = make_membership_net(store, 0, 3, D, 5, 1, 3);
  const MixtureParams ema = MixtureParams::init(1, D);

  Rng rng(8);
  Tensor X(6, D);
  for (int i = 0; i < D; ++i) X.at(0, i) = rng.normal();
  for (int n = 1; n < 6; ++n) {
    for (int i = 0; i < D; ++i) X.at(n, i) = X.at(0, i);
  }

  ad::Tape tape;
  const auto res = batch_loss_on_tape(tape, store, net, tape.constant(X), ema, 0.0, 1e-6);
  // all mass on one kernel, zero spread: logp = -0.5 * D * log(2*pi*floor)
  const double want = 0.5 * D * std::log(2.0 * 3.14159265358979323846 * 1e-6);
  REQUIRE(tape.value(res.loss).v[0] == Catch::Approx(want).epsilon(1e-10));
  for (int i = 0; i < D; ++i) REQUIRE(tape.value(res.var).at(0, i) == 1e-6);
}

TEST_CASE("batch-fresh estimates off the tape equal the numeric estimator") {
  ad::ParamStore store;
  const int D = 5, K = 3, N = 12;
  const MembershipNetRef net = make_membership_net(store, 0, 3, D, 6, K, 17);
  const MixtureParams ema = MixtureParams::init(K, D);
  Rng rng(23);
  const Tensor X = random_tensor(N, D, rng);

  ad::Tape tape;
  const auto res = batch_loss_on_tape(tape, store, net, tape.constant(X), ema, 0.05, 1e-6);
  const MixtureParams fresh = fresh_from_batch(tape, res);
  const EstimationResult direct = estimate_mixture(X, tape.value(res.gamma), 1e-6);
  for (std::size_t i = 0; i < fresh.weights.size(); ++i) {
    REQUIRE(fresh.weights[i] == Catch::Approx(direct.mix.weights[i]).margin(1e-12));
  }
  for (std::size_t i = 0; i < fresh.means.size(); ++i) {
    REQUIRE(fresh.means[i] == Catch::Approx(direct.mix.means[i]).margin(1e-10));
  }
  for (std::size_t i = 0; i < fresh.vars.size(); ++i) {
    REQUIRE(fresh.vars[i] == Catch::Approx(direct.mix.vars[i]).margin(1e-10));
  }

  // and the tape logp agrees with the numeric scorer on those estimates
  const MixtureScorer scorer(fresh);
  for (int n = 0; n < N; ++n) {
    std::vector<double> x(D);
    for (int i = 0; i < D; ++i) x[static_cast<std::size_t>(i)] = X.at(n, i);
    REQUIRE(tape.value(res.logp).at(n, 0) == Catch::Approx(scorer.loglik(x.data())).epsilon(1e-11));
  }
}

TEST_CASE("batch loss gradients pass finite differences on a small instance") {
  ad::ParamStore store;
  const int D = 6, K = 2, N = 8;
  const MembershipNetRef net = make_membership_net(store, 0, 3, D, 5, K, 29);
  const MixtureParams ema = MixtureParams::init(K, D);
  Rng rng(31);
  const Tensor X = random_tensor(N, D, rng);
  store.create("Xp", X);  // check gradients w.r.t. inputs too

  auto f = [&](ad::Tape& tape) {
    const auto res = batch_loss_on_tape(tape, store, net, tape.param(store, "Xp"), ema, 0.05, 1e-6);
    return res.loss;
  };
  const auto report = ad::grad_check(f, store, 1e-5, 1e-4);
  INFO("max rel err " << report.max_rel_err);
  REQUIRE(report.pass);
}

TEST_CASE("degenerate kernels fall back to EMA parameters for the batch") {
  ad::ParamStore store;
  const int D = 3, K = 2, N = 5;
  const MembershipNetRef net = make_membership_net(store, 0, 3, D, 4, K, 37);
  // saturate the final layer so kernel 1 gets essentially zero mass
  auto& W2 = store.value(net.w2);
  std::fill(W2.v.begin(), W2.v.end(), 0.0);
  auto& b2 = store.value(net.b2);
  b2.at(0, 0) = 200.0;
  b2.at(0, 1) = -200.0;

  MixtureParams ema = MixtureParams::init(K, D);
  for (int i = 0; i < D; ++i) ema.means[static_cast<std::size_t>(D + i)] = 7.0 + i;

  Rng rng(41);
  const Tensor X = random_tensor(N, D, rng);
  ad::Tape tape;
  const auto res = batch_loss_on_tape(tape, store, net, tape.constant(X), ema, 0.05, 1e-6);
  REQUIRE(res.degenerate[0] == 0);
  REQUIRE(res.degenerate[1] == 1);
  for (int i = 0; i < D; ++i) {
    REQUIRE(tape.value(res.mu).at(1, i) == ema.mean(1)[i]);
    REQUIRE(tape.value(res.var).at(1, i) == ema.var(1)[i]);
  }
  // EMA update with the blended fresh leaves the degenerate kernel's
  // mean/variance unchanged
  MixtureParams after = ema;
  update_ema(after, fresh_from_batch(tape, res), 0.9, 1e-6);
  for (int i = 0; i < D; ++i) {
    REQUIRE(after.mean(1)[i] == Catch::Approx(ema.mean(1)[i]).margin(1e-12));
    REQUIRE(after.var(1)[i] == Catch::Approx(ema.var(1)[i]).margin(1e-12));
  }
}

TEST_CASE("EMA update: decay zero copies, fixed point holds, gap shrinks geometrically") {
  Rng rng(3);
  MixtureParams ema = MixtureParams::init(2, 3);
  MixtureParams fresh = MixtureParams::init(2, 3);
  fresh.weights = {0.25, 0.75};
  for (auto& x : fresh.means) x = rng.normal();
  for (auto& x : fresh.vars) x = rng.uniform(0.5, 2.0);

  SECTION("decay zero replaces everything") {
    MixtureParams m = ema;
    update_ema(m, fresh, 0.0, 1e-6);
    REQUIRE(m.means == fresh.means);
    REQUIRE(m.vars == fresh.vars);
    REQUIRE(m.weights[0] == Catch::Approx(0.25).epsilon(1e-12));
  }

  SECTION("fresh equal to EMA is a fixed point") {
    MixtureParams m = fresh;
    update_ema(m, fresh, 0.9, 1e-6);
    for (std::size_t i = 0; i < m.means.size(); ++i) {
      REQUIRE(m.means[i] == Catch::Approx(fresh.means[i]).margin(1e-14));
    }
  }

  SECTION("constant fresh converges geometrically with rate = decay") {
    MixtureParams m = ema;
    const double d0 = std::abs(m.means[0] - fresh.means[0]);
    double prev = d0;
    for (int t = 0; t < 6; ++t) {
      update_ema(m, fresh, 0.9, 1e-6);
      const double gap = std::abs(m.means[0] - fresh.means[0]);
      REQUIRE(gap == Catch::Approx(prev * 0.9).epsilon(1e-10));
      prev = gap;
    }
  }
}

TEST_CASE("pruning drops light kernels, renormalizes, and shrinks the logit layer") {
  ad::ParamStore store;
  const MembershipNetRef net = make_membership_net(store, 0, 3, 4, 5, 4, 51);
  MixtureParams ema = MixtureParams::init(4, 4);
  ema.weights = {0.5, 0.3, 0.19, 0.01};

  const PruneResult r = prune_kernels(ema, store, net, 0.02);
  REQUIRE(r.changed);
  REQUIRE(ema.K == 3);
  REQUIRE(ema.weights[0] == Catch::Approx(0.5051).margin(1e-4));
  REQUIRE(ema.weights[1] == Catch::Approx(0.3030).margin(1e-4));
  REQUIRE(ema.weights[2] == Catch::Approx(0.1919).margin(1e-4));
  REQUIRE(store.value(net.w2).rows == 3);
  REQUIRE(store.value(net.b2).cols == 3);

  SECTION("all weights above threshold: unchanged") {
    MixtureParams even = MixtureParams::init(3, 4);
    ad::ParamStore store2;
    const MembershipNetRef net2 = make_membership_net(store2, 0, 3, 4, 5, 3, 52);
    const PruneResult r2 = prune_kernels(even, store2, net2, 0.02);
    REQUIRE_FALSE(r2.changed);
    REQUIRE(even.K == 3);
  }

  SECTION("all weights below threshold keeps the single largest") {
    MixtureParams tiny = MixtureParams::init(3, 4);
    tiny.weights = {0.004, 0.01, 0.002};
    ad::ParamStore store3;
    const MembershipNetRef net3 = make_membership_net(store3, 0, 3, 4, 5, 3, 53);
    const PruneResult r3 = prune_kernels(tiny, store3, net3, 0.02);
    REQUIRE(tiny.K == 1);
    REQUIRE(r3.kept == std::vector<int>{1});
    REQUIRE(tiny.weights[0] == Catch::Approx(1.0));
  }
}

TEST_CASE("full covariance: estimation matches a naive oracle and scoring is consistent") {
  Rng rng(61);
  const int N = 24, D = 3, K = 2;
  const Tensor X = random_tensor(N, D, rng);
  const Tensor G = random_memberships(N, K, rng);

  const EstimationResult full = estimate_mixture(X, G, 1e-9, true);
  // naive covariance oracle
  for (int k = 0; k < K; ++k) {
    double s = 0.0;
    for (int n = 0; n < N; ++n) s += G.at(n, k);
    for (int i = 0; i < D; ++i) {
      for (int j = 0; j < D; ++j) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
          acc += G.at(n, k) * (X.at(n, i) - full.mix.mean(k)[i]) * (X.at(n, j) - full.mix.mean(k)[j]);
        }
        acc /= s;
        if (i == j) acc += 1e-9;
        REQUIRE(full.mix.cov_k(k)[i * D + j] == Catch::Approx(acc).margin(1e-10));
      }
    }
  }

  // density against a closed-form 2x2 oracle
  MixtureParams m2 = MixtureParams::init(1, 2, true);
  m2.means = {0.3, -0.2};
  m2.cov = {1.3, 0.4, 0.4, 0.8};
  m2.vars = {1.3, 0.8};
  const double det = 1.3 * 0.8 - 0.16;
  auto oracle = [&](double x0, double x1) {
    const double d0 = x0 - 0.3, d1 = x1 + 0.2;
    const double quad = (0.8 * d0 * d0 - 2 * 0.4 * d0 * d1 + 1.3 * d1 * d1) / det;
    return -0.5 * quad - 0.5 * std::log(4.0 * 3.14159265358979323846 * 3.14159265358979323846 * det);
  };
  for (int trial = 0; trial < 20; ++trial) {
    const double x0 = rng.uniform(-3, 3), x1 = rng.uniform(-3, 3);
    REQUIRE(log_likelihood({x0, x1}, m2) == Catch::Approx(oracle(x0, x1)).epsilon(1e-11));
  }
}
