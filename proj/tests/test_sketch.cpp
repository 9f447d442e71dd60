#include <catch2/catch_amalgamated.hpp>

#include "test_helpers.hpp"

using namespace musle;

TEST_CASE("count sketch: zero input, identity layout, and scatter-loop oracle") {
  SECTION("zero vector maps to zero") {
    const SketchParams p = SketchParams::make(8, 16, 3);
    const auto out = count_sketch(std::vector<double>(8, 0.0), 1, p);
    for (double x : out) REQUIRE(x == 0.0);
  }

  SECTION("identity hash with +1 signs is the identity") {
    SketchParams p = SketchParams::make(6, 6, 4);
    for (int i = 0; i < 6; ++i) {
      p.h1[static_cast<std::size_t>(i)] = i;
      p.s1[static_cast<std::size_t>(i)] = 1.0;
    }
    Rng rng(5);
    std::vector<double> v(6);
    for (auto& x : v) x = rng.normal();
    REQUIRE(count_sketch(v, 1, p) == v);
  }

  SECTION("random vector matches a naive scatter loop") {
    const SketchParams p = SketchParams::make(32, 12, 9);
    Rng rng(10);
    std::vector<double> v(32);
    for (auto& x : v) x = rng.normal();
    const auto got = count_sketch(v, 2, p);
    std::vector<double> want(12, 0.0);
    for (int i = 0; i < 32; ++i) {
      want[static_cast<std::size_t>(p.h2[static_cast<std::size_t>(i)])] +=
          p.s2[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
    }
    REQUIRE(got == want);
  }
}

TEST_CASE("tensor sketch: linearity and the two convolution paths") {
  const SketchParams p = SketchParams::make(24, 32, 17);
  Rng rng(21);
  std::vector<double> v(24);
  for (auto& x : v) x = rng.normal();

  SECTION("zero maps to zero") {
    const auto out = tensor_sketch(std::vector<double>(24, 0.0), p);
    for (double x : out) REQUIRE(x == 0.0);
  }

  SECTION("Phi(a v) = a Phi(v) exactly") {
    const auto base = tensor_sketch(v, p, false);
    std::vector<double> scaled = v;
    for (auto& x : scaled) x *= 2.0;  // power of two keeps fp exact
    const auto out = tensor_sketch(scaled, p, false);
    for (std::size_t i = 0; i < base.size(); ++i) REQUIRE(out[i] == 2.0 * base[i]);
  }

  SECTION("direct and FFT circular convolutions agree to 1e-8") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const SketchParams sp = SketchParams::make(24, 64, seed);
      Rng r2(seed_combine(seed, 2));
      std::vector<double> u(24);
      for (auto& x : u) x = r2.normal();
      const auto direct = tensor_sketch(u, sp, false);
      const auto fft = tensor_sketch(u, sp, true);
      for (std::size_t i = 0; i < direct.size(); ++i) {
        REQUIRE(std::abs(direct[i] - fft[i]) < 1e-8);
      }
    }
  }
}

TEST_CASE("bilinear exact: constant grids, zero grids, brute-force oracle, symmetry") {
  SECTION("constant grids give (v.v)^2") {
    FeatureGrid a = FeatureGrid::zeros(2, 2, 3);
    FeatureGrid b = FeatureGrid::zeros(2, 2, 3);
    const std::vector<double> v = {0.5, -1.0, 2.0};
    for (int i = 0; i < 4; ++i) {
      std::copy(v.begin(), v.end(), a.loc(i));
      std::copy(v.begin(), v.end(), b.loc(i));
    }
    const double vv = 0.25 + 1.0 + 4.0;
    REQUIRE(bilinear_exact(a, b) == Catch::Approx(vv * vv).epsilon(1e-14));
  }

  SECTION("zero second frame gives zero") {
    Rng rng(3);
    FeatureGrid a = FeatureGrid::zeros(3, 3, 4);
    for (auto& x : a.values) x = rng.normal();
    const FeatureGrid z = FeatureGrid::zeros(3, 3, 4);
    REQUIRE(bilinear_exact(a, z) == 0.0);
  }

  SECTION("random grids match a quadruple loop and are symmetric") {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
      FeatureGrid a = FeatureGrid::zeros(3, 3, 5);
      FeatureGrid b = FeatureGrid::zeros(3, 3, 5);
      for (auto& x : a.values) x = rng.normal();
      for (auto& x : b.values) x = rng.normal();

      double acc = 0.0;
      for (int i = 0; i < 9; ++i) {
        for (int j = 0; j < 9; ++j) {
          double dot = 0.0;
          for (int k = 0; k < 5; ++k) dot += a.loc(i)[k] * b.loc(j)[k];
          acc += dot * dot;
        }
      }
      acc /= 81.0;
      REQUIRE(bilinear_exact(a, b) == Catch::Approx(acc).epsilon(1e-13));
      REQUIRE(bilinear_exact(b, a) == Catch::Approx(bilinear_exact(a, b)).epsilon(1e-13));
    }
  }
}

TEST_CASE("bilinear approx: zero grids, pooling linearity") {
  const SketchParams p = SketchParams::make(6, 16, 5);

  SECTION("zero grids give zero everywhere") {
    const FeatureGrid z = FeatureGrid::zeros(2, 2, 6);
    const BilinearApprox out = bilinear_approx(z, z, p);
    REQUIRE(out.value == 0.0);
    for (double x : out.pooled_t) REQUIRE(x == 0.0);
  }

  SECTION("scaling one frame scales the kernel value linearly") {
    Rng rng(11);
    FeatureGrid a = FeatureGrid::zeros(2, 2, 6);
    FeatureGrid b = FeatureGrid::zeros(2, 2, 6);
    for (auto& x : a.values) x = rng.normal();
    for (auto& x : b.values) x = rng.normal();
    const double base = bilinear_approx(a, b, p).value;
    FeatureGrid a2 = a;
    for (auto& x : a2.values) x *= 2.0;
    REQUIRE(bilinear_approx(a2, b, p).value == Catch::Approx(2.0 * base).epsilon(1e-12));
  }
}

TEST_CASE("sketch quality: rmse shrinks with d_sketch and the estimator is unbiased") {
  // reduced-size version of the sketchbench run (the acceptance suite runs
  // the full one)
  const SketchBenchOutcome out = run_sketchbench(40, 300, 7);
  REQUIRE(out.rmse_decreasing);
  REQUIRE(out.unbias_pass);
}

TEST_CASE("movement regressor: zero weights, no-motion overfit, planted shift") {
  const int w = 5, h = 5, d = 16, d_sketch = 64;
  const SketchParams sp = SketchParams::make(d, d_sketch, 31);

  SECTION("zero-weight regressor predicts zero movement") {
    const MovementRegressor reg = MovementRegressor::zeros(d_sketch);
    const std::vector<double> p1(d_sketch, 0.3), p2(d_sketch, -0.7);
    for (double x : reg.predict(p1, p2)) REQUIRE(x == 0.0);
  }

  SECTION("identical grids overfit to near-zero predicted shift") {
    std::vector<MovementSample> samples;
    for (int i = 0; i < 24; ++i) {
      const SceneModel scene = SceneModel::make(w, h, d, seed_combine(5, static_cast<std::uint64_t>(i)));
      const FeatureGrid g = scene.render(0, 0);
      const BilinearApprox ap = bilinear_approx(g, g, sp);
      MovementSample s;
      s.pooled_t = ap.pooled_t;
      s.pooled_t1 = ap.pooled_t1;
      s.target = {0.0, 0.0, 0.0, 0.0};
      samples.push_back(std::move(s));
    }
    MovementRegressor reg = MovementRegressor::zeros(d_sketch);
    const double loss = fit_movement_regressor(reg, samples, 200, 0.05);
    REQUIRE(loss < 1e-3);
  }

  SECTION("one-cell horizontal shifts: positive dcx on at least 95% of held-out pairs") {
    auto make_sample = [&](std::uint64_t seed) {
      const SceneModel scene = SceneModel::make(w, h, d, seed);
      const FeatureGrid a = scene.render(0, 0);
      const FeatureGrid b = scene.render(1, 0);  // content shifted one cell
      const BilinearApprox ap = bilinear_approx(a, b, sp);
      MovementSample s;
      s.pooled_t = ap.pooled_t;
      s.pooled_t1 = ap.pooled_t1;
      s.target = {1.0 / w, 0.0, 0.0, 0.0};
      return s;
    };
    std::vector<MovementSample> train_set, held_out;
    for (int i = 0; i < 60; ++i) train_set.push_back(make_sample(seed_combine(77, static_cast<std::uint64_t>(i))));
    for (int i = 0; i < 40; ++i) held_out.push_back(make_sample(seed_combine(991, static_cast<std::uint64_t>(i))));

    MovementRegressor reg = MovementRegressor::zeros(d_sketch);
    fit_movement_regressor(reg, train_set, 300, 0.05);
    int positive = 0;
    for (const auto& s : held_out) {
      if (reg.predict(s.pooled_t, s.pooled_t1)[0] > 0.0) ++positive;
    }
    INFO("positive dcx on " << positive << "/40 held-out pairs");
    REQUIRE(positive >= 38);
  }
}
