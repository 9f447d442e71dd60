#pragma once

// Bilinear kernel math on two-frame feature grids and its tensor-sketch
// approximation: count sketch, circular convolution (direct and FFT paths),
// exact and sketched bilinear pooling, and a small movement regressor over
// pooled sketch pairs.
//
// Pooling note: with p = (1/S) sum_i Phi(F_i), linearity of Phi gives
// <p_t, p_{t+1}> = (1/S^2) sum_i sum_j <Phi(F_t,i), Phi(F_t+1,j)>, so
// sketch-then-average matches the double average over locations.

#include <complex>

#include "musle/autodiff.hpp"

namespace musle {

struct FeatureGrid {
  int w = 0, h = 0, d = 0;
  std::vector<double> values;  // (w*h) x d, row-major over locations

  int S() const { return w * h; }
  double* loc(int i) { return values.data() + static_cast<std::ptrdiff_t>(i) * d; }
  const double* loc(int i) const { return values.data() + static_cast<std::ptrdiff_t>(i) * d; }

  static FeatureGrid zeros(int w, int h, int d) {
    FeatureGrid g;
    g.w = w;
    g.h = h;
    g.d = d;
    g.values.assign(static_cast<std::size_t>(w) * h * d, 0.0);
    return g;
  }
};

struct SketchParams {
  int d = 0;
  int d_sketch = 0;
  std::uint64_t seed = 0;
  std::vector<int> h1, h2;     // hash tables [d] -> [0, d_sketch)
  std::vector<double> s1, s2;  // sign tables [d] -> {-1, +1}

  static SketchParams make(int d, int d_sketch, std::uint64_t seed) {
    SketchParams p;
    p.d = d;
    p.d_sketch = d_sketch;
    p.seed = seed;
    Rng rng(seed_combine(seed, 0x5CE7C4ULL));
    p.h1.resize(static_cast<std::size_t>(d));
    p.h2.resize(static_cast<std::size_t>(d));
    p.s1.resize(static_cast<std::size_t>(d));
    p.s2.resize(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
      p.h1[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(d_sketch)));
      p.h2[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(d_sketch)));
      p.s1[static_cast<std::size_t>(i)] = (rng.next_u64() & 1) ? 1.0 : -1.0;
      p.s2[static_cast<std::size_t>(i)] = (rng.next_u64() & 1) ? 1.0 : -1.0;
    }
    return p;
  }
};

// out[j] = sum_{i : h_t(i) = j} s_t(i) * v_i
inline std::vector<double> count_sketch(const std::vector<double>& v, int table,
                                        const SketchParams& p) {
  if (static_cast<int>(v.size()) != p.d) throw NumericError("count_sketch: dimension mismatch");
  if (table != 1 && table != 2) throw UsageError("count_sketch: table must be 1 or 2");
  const auto& h = (table == 1) ? p.h1 : p.h2;
  const auto& s = (table == 1) ? p.s1 : p.s2;
  std::vector<double> out(static_cast<std::size_t>(p.d_sketch), 0.0);
  for (int i = 0; i < p.d; ++i) {
    out[static_cast<std::size_t>(h[static_cast<std::size_t>(i)])] += s[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
  }
  return out;
}

namespace fftimpl {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

inline void fft(std::vector<std::complex<double>>& a, bool invert) {
  const int n = static_cast<int>(a.size());
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[static_cast<std::size_t>(i)], a[static_cast<std::size_t>(j)]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * 3.14159265358979323846 / len * (invert ? -1 : 1);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[static_cast<std::size_t>(i + j)];
        const std::complex<double> v = a[static_cast<std::size_t>(i + j + len / 2)] * w;
        a[static_cast<std::size_t>(i + j)] = u + v;
        a[static_cast<std::size_t>(i + j + len / 2)] = u - v;
        w *= wl;
      }
    }
  }
  if (invert) {
    for (auto& x : a) x /= n;
  }
}

}  // namespace fftimpl

inline std::vector<double> circular_convolve_direct(const std::vector<double>& a,
                                                    const std::vector<double>& b) {
  const int n = static_cast<int>(a.size());
  if (static_cast<int>(b.size()) != n) throw NumericError("circular_convolve: size mismatch");
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const double ai = a[static_cast<std::size_t>(i)];
    if (ai == 0.0) continue;
    for (int j = 0; j < n; ++j) {
      out[static_cast<std::size_t>((i + j) % n)] += ai * b[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

inline std::vector<double> circular_convolve_fft(const std::vector<double>& a,
                                                 const std::vector<double>& b) {
  const int n = static_cast<int>(a.size());
  if (static_cast<int>(b.size()) != n) throw NumericError("circular_convolve: size mismatch");
  if (!fftimpl::is_pow2(n)) throw UsageError("circular_convolve_fft: size must be a power of two");
  std::vector<std::complex<double>> fa(a.begin(), a.end());
  std::vector<std::complex<double>> fb(b.begin(), b.end());
  fftimpl::fft(fa, false);
  fftimpl::fft(fb, false);
  for (int i = 0; i < n; ++i) fa[static_cast<std::size_t>(i)] *= fb[static_cast<std::size_t>(i)];
  fftimpl::fft(fa, true);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fa[static_cast<std::size_t>(i)].real();
  return out;
}

// Phi(v): circular convolution of the two count sketches. Linear in v;
// E[<Phi(x), Phi(y)>] over sketch draws equals <x, y>^2.
inline std::vector<double> tensor_sketch(const std::vector<double>& v, const SketchParams& p,
                                         bool use_fft = true) {
  const auto c1 = count_sketch(v, 1, p);
  const auto c2 = count_sketch(v, 2, p);
  if (use_fft && fftimpl::is_pow2(p.d_sketch)) return circular_convolve_fft(c1, c2);
  return circular_convolve_direct(c1, c2);
}

// Exact Eq: (1/S^2) sum_i sum_j (F_t,i . F_t+1,j)^2, O(S^2 d).
inline double bilinear_exact(const FeatureGrid& ft, const FeatureGrid& ft1) {
  if (ft.w != ft1.w || ft.h != ft1.h || ft.d != ft1.d) {
    throw NumericError("bilinear_exact: grid shape mismatch");
  }
  const int S = ft.S();
  double acc = 0.0;
  for (int i = 0; i < S; ++i) {
    const double* a = ft.loc(i);
    for (int j = 0; j < S; ++j) {
      const double* b = ft1.loc(j);
      double dot = 0.0;
      for (int k = 0; k < ft.d; ++k) dot += a[k] * b[k];
      acc += dot * dot;
    }
  }
  return acc / (static_cast<double>(S) * S);
}

struct BilinearApprox {
  double value = 0.0;
  std::vector<double> pooled_t;   // (1/S) sum_i Phi(F_t,i)
  std::vector<double> pooled_t1;  // (1/S) sum_i Phi(F_t+1,i)
};

inline BilinearApprox bilinear_approx(const FeatureGrid& ft, const FeatureGrid& ft1,
                                      const SketchParams& p) {
  if (ft.w != ft1.w || ft.h != ft1.h || ft.d != ft1.d) {
    throw NumericError("bilinear_approx: grid shape mismatch");
  }
  if (ft.d != p.d) throw NumericError("bilinear_approx: sketch dimension mismatch");
  BilinearApprox out;
  out.pooled_t.assign(static_cast<std::size_t>(p.d_sketch), 0.0);
  out.pooled_t1.assign(static_cast<std::size_t>(p.d_sketch), 0.0);
  const int S = ft.S();
  std::vector<double> v(static_cast<std::size_t>(p.d));
  for (int i = 0; i < S; ++i) {
    v.assign(ft.loc(i), ft.loc(i) + p.d);
    const auto phi = tensor_sketch(v, p);
    for (int k = 0; k < p.d_sketch; ++k) out.pooled_t[static_cast<std::size_t>(k)] += phi[static_cast<std::size_t>(k)];
    v.assign(ft1.loc(i), ft1.loc(i) + p.d);
    const auto phi1 = tensor_sketch(v, p);
    for (int k = 0; k < p.d_sketch; ++k) out.pooled_t1[static_cast<std::size_t>(k)] += phi1[static_cast<std::size_t>(k)];
  }
  for (auto& x : out.pooled_t) x /= S;
  for (auto& x : out.pooled_t1) x /= S;
  for (int k = 0; k < p.d_sketch; ++k) {
    out.value += out.pooled_t[static_cast<std::size_t>(k)] * out.pooled_t1[static_cast<std::size_t>(k)];
  }
  return out;
}

// ---- movement regression over pooled sketch pairs ----

// Affine readout over the elementwise product of the pooled sketches,
// predicting (dcx, dcy, dlog w, dlog h).
struct MovementRegressor {
  ad::Tensor W;  // 4 x d_sketch
  ad::Tensor b;  // 1 x 4

  static MovementRegressor zeros(int d_sketch) {
    MovementRegressor r;
    r.W = ad::Tensor(4, d_sketch);
    r.b = ad::Tensor(1, 4);
    return r;
  }

  std::array<double, 4> predict(const std::vector<double>& pt,
                                const std::vector<double>& pt1) const {
    if (static_cast<int>(pt.size()) != W.cols || pt.size() != pt1.size()) {
      throw NumericError("movement_regress: dimension mismatch");
    }
    std::array<double, 4> out{};
    for (int j = 0; j < 4; ++j) {
      double acc = b.v[static_cast<std::size_t>(j)];
      const double* wj = W.row(j);
      for (int k = 0; k < W.cols; ++k) acc += wj[k] * pt[static_cast<std::size_t>(k)] * pt1[static_cast<std::size_t>(k)];
      out[static_cast<std::size_t>(j)] = acc;
    }
    return out;
  }
};

struct MovementSample {
  std::vector<double> pooled_t;
  std::vector<double> pooled_t1;
  std::array<double, 4> target{};
};

// Least-squares fit by SGD on the tape; returns final mean squared error.
inline double fit_movement_regressor(MovementRegressor& reg,
                                     const std::vector<MovementSample>& samples, int epochs,
                                     double lr) {
  if (samples.empty()) throw UsageError("fit_movement_regressor: no samples");
  const int n = static_cast<int>(samples.size());
  const int ds = static_cast<int>(samples.front().pooled_t.size());

  ad::Tensor X(n, ds);
  ad::Tensor Tgt(n, 4);
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    for (int k = 0; k < ds; ++k) {
      X.at(i, k) = s.pooled_t[static_cast<std::size_t>(k)] * s.pooled_t1[static_cast<std::size_t>(k)];
    }
    for (int j = 0; j < 4; ++j) Tgt.at(i, j) = s.target[static_cast<std::size_t>(j)];
  }

  ad::ParamStore store;
  store.create("mvreg/W", reg.W);
  store.create("mvreg/b", reg.b);
  ad::OptimizerConfig opt;
  opt.learning_rate = lr;
  opt.momentum = 0.9;
  opt.weight_decay = 0.0;
  opt.lr_decay_period = 0;

  double last = 0.0;
  for (int e = 0; e < epochs; ++e) {
    ad::Tape tape;
    const ad::Val x = tape.constant(X);
    const ad::Val y = tape.affine(x, tape.param(store, "mvreg/W"), tape.param(store, "mvreg/b"));
    const ad::Val err = tape.sub(y, tape.constant(Tgt));
    const ad::Val loss = tape.mean_all(tape.mul(err, err));
    last = tape.value(loss).v[0];
    tape.backward(loss);
    ad::sgd_step(store, opt, lr);
  }
  reg.W = store.value("mvreg/W");
  reg.b = store.value("mvreg/b");
  return last;
}

// Synthetic grid-pair harness: a smooth per-channel scene (constant +
// linear ramps + cell noise tied to scene coordinates) sampled at integer
// offsets, so a shifted window sees consistently translated content.
struct SceneModel {
  int w = 0, h = 0, d = 0;
  std::uint64_t seed = 0;
  std::vector<double> base, gx, gy;  // per channel
  double noise = 0.05;

  static SceneModel make(int w, int h, int d, std::uint64_t seed) {
    SceneModel s;
    s.w = w;
    s.h = h;
    s.d = d;
    s.seed = seed;
    Rng rng(seed_combine(seed, 0x5CE11EULL));
    s.base.resize(static_cast<std::size_t>(d));
    s.gx.resize(static_cast<std::size_t>(d));
    s.gy.resize(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) {
      s.base[static_cast<std::size_t>(c)] = rng.normal(0.0, 0.5);
      s.gx[static_cast<std::size_t>(c)] = rng.normal(0.0, 0.8);
      s.gy[static_cast<std::size_t>(c)] = rng.normal(0.0, 0.8);
    }
    return s;
  }

  double sample(int x, int y, int c) const {
    Rng cell(seed_combine(seed, static_cast<std::uint64_t>(x) * 73856093ULL ^
                                    static_cast<std::uint64_t>(y) * 19349663ULL,
                          static_cast<std::uint64_t>(c)));
    return base[static_cast<std::size_t>(c)] + gx[static_cast<std::size_t>(c)] * x / w +
           gy[static_cast<std::size_t>(c)] * y / h + noise * cell.normal();
  }

  FeatureGrid render(int off_x, int off_y) const {
    FeatureGrid g = FeatureGrid::zeros(w, h, d);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double* p = g.loc(y * w + x);
        for (int c = 0; c < d; ++c) p[c] = sample(x + off_x, y + off_y, c);
      }
    }
    return g;
  }
};

}  // namespace musle
