#pragma once

// Differentiable Gaussian Mixture Layer: membership prediction, batch
// mixture estimation, log-domain likelihood, covariance regularization,
// EMA persistence and dynamic-K pruning. Training-time likelihoods use
// batch-fresh estimates so gradients flow end to end; inference scores
// against the persisted EMA bank.

#include <cstring>
#include <fstream>

#include "musle/stgraph.hpp"

namespace musle {

struct MixtureParams {
  int K = 0;
  int D = 0;
  bool full = false;
  std::vector<double> weights;  // K, on the simplex
  std::vector<double> means;    // K x D
  std::vector<double> vars;     // K x D diagonal entries (floored)
  std::vector<double> cov;      // K x D x D when full, else empty

  const double* mean(int k) const { return means.data() + static_cast<std::ptrdiff_t>(k) * D; }
  const double* var(int k) const { return vars.data() + static_cast<std::ptrdiff_t>(k) * D; }
  const double* cov_k(int k) const { return cov.data() + static_cast<std::ptrdiff_t>(k) * D * D; }

  static MixtureParams init(int K, int D, bool full = false) {
    MixtureParams m;
    m.K = K;
    m.D = D;
    m.full = full;
    m.weights.assign(static_cast<std::size_t>(K), 1.0 / K);
    m.means.assign(static_cast<std::size_t>(K) * D, 0.0);
    m.vars.assign(static_cast<std::size_t>(K) * D, 1.0);
    if (full) {
      m.cov.assign(static_cast<std::size_t>(K) * D * D, 0.0);
      for (int k = 0; k < K; ++k) {
        for (int i = 0; i < D; ++i) m.cov[static_cast<std::size_t>(k) * D * D + i * D + i] = 1.0;
      }
    }
    return m;
  }
};

constexpr double kDegenerateMass = 1e-12;

namespace chol {

// In-place lower Cholesky of a D x D SPD matrix (row-major). Returns false
// if a pivot is not positive.
inline bool factor(std::vector<double>& a, int D) {
  for (int i = 0; i < D; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = a[static_cast<std::size_t>(i) * D + j];
      for (int k = 0; k < j; ++k) {
        s -= a[static_cast<std::size_t>(i) * D + k] * a[static_cast<std::size_t>(j) * D + k];
      }
      if (i == j) {
        if (s <= 0.0) return false;
        a[static_cast<std::size_t>(i) * D + j] = std::sqrt(s);
      } else {
        a[static_cast<std::size_t>(i) * D + j] = s / a[static_cast<std::size_t>(j) * D + j];
      }
    }
    for (int j = i + 1; j < D; ++j) a[static_cast<std::size_t>(i) * D + j] = 0.0;
  }
  return true;
}

inline double logdet_from_factor(const std::vector<double>& l, int D) {
  double s = 0.0;
  for (int i = 0; i < D; ++i) s += std::log(l[static_cast<std::size_t>(i) * D + i]);
  return 2.0 * s;
}

// Solve L y = b, then L^T z = y; returns z = Sigma^{-1} b.
inline void solve(const std::vector<double>& l, int D, const double* b, double* z) {
  std::vector<double> y(static_cast<std::size_t>(D));
  for (int i = 0; i < D; ++i) {
    double s = b[i];
    for (int k = 0; k < i; ++k) s -= l[static_cast<std::size_t>(i) * D + k] * y[static_cast<std::size_t>(k)];
    y[static_cast<std::size_t>(i)] = s / l[static_cast<std::size_t>(i) * D + i];
  }
  for (int i = D - 1; i >= 0; --i) {
    double s = y[static_cast<std::size_t>(i)];
    for (int k = i + 1; k < D; ++k) s -= l[static_cast<std::size_t>(k) * D + i] * z[k];
    z[i] = s / l[static_cast<std::size_t>(i) * D + i];
  }
}

}  // namespace chol

struct EstimationResult {
  MixtureParams mix;
  std::vector<char> degenerate;  // kernels with total membership < 1e-12
};

// phi_k = mean_n g_nk; mu_k = sum g x / sum g; Sigma_k = weighted second
// moment around mu_k. Diagonal entries are floored at var_floor.
inline EstimationResult estimate_mixture(const ad::Tensor& X, const ad::Tensor& G,
                                         double var_floor, bool full = false) {
  if (X.rows != G.rows || X.rows < 1) throw NumericError("estimate_mixture: shape mismatch");
  const int N = X.rows;
  const int D = X.cols;
  const int K = G.cols;

  EstimationResult res;
  res.mix.K = K;
  res.mix.D = D;
  res.mix.full = full;
  res.mix.weights.assign(static_cast<std::size_t>(K), 0.0);
  res.mix.means.assign(static_cast<std::size_t>(K) * D, 0.0);
  res.mix.vars.assign(static_cast<std::size_t>(K) * D, 0.0);
  res.degenerate.assign(static_cast<std::size_t>(K), 0);

  std::vector<double> s(static_cast<std::size_t>(K), 0.0);
  for (int n = 0; n < N; ++n) {
    const double* gn = G.row(n);
    const double* xn = X.row(n);
    for (int k = 0; k < K; ++k) {
      const double g = gn[k];
      if (g == 0.0) continue;
      s[static_cast<std::size_t>(k)] += g;
      double* mk = res.mix.means.data() + static_cast<std::ptrdiff_t>(k) * D;
      for (int i = 0; i < D; ++i) mk[i] += g * xn[i];
    }
  }
  for (int k = 0; k < K; ++k) {
    res.mix.weights[static_cast<std::size_t>(k)] = s[static_cast<std::size_t>(k)] / N;
    if (s[static_cast<std::size_t>(k)] < kDegenerateMass) {
      res.degenerate[static_cast<std::size_t>(k)] = 1;
      s[static_cast<std::size_t>(k)] = kDegenerateMass;  // keeps the division defined
    }
    double* mk = res.mix.means.data() + static_cast<std::ptrdiff_t>(k) * D;
    for (int i = 0; i < D; ++i) mk[i] /= s[static_cast<std::size_t>(k)];
  }
  for (int n = 0; n < N; ++n) {
    const double* gn = G.row(n);
    const double* xn = X.row(n);
    for (int k = 0; k < K; ++k) {
      const double g = gn[k];
      if (g == 0.0) continue;
      const double* mk = res.mix.means.data() + static_cast<std::ptrdiff_t>(k) * D;
      double* vk = res.mix.vars.data() + static_cast<std::ptrdiff_t>(k) * D;
      for (int i = 0; i < D; ++i) {
        const double d = xn[i] - mk[i];
        vk[i] += g * d * d;
      }
    }
  }
  for (int k = 0; k < K; ++k) {
    double* vk = res.mix.vars.data() + static_cast<std::ptrdiff_t>(k) * D;
    for (int i = 0; i < D; ++i) vk[i] = std::max(vk[i] / s[static_cast<std::size_t>(k)], var_floor);
  }

  if (full) {
    res.mix.cov.assign(static_cast<std::size_t>(K) * D * D, 0.0);
    for (int n = 0; n < N; ++n) {
      const double* gn = G.row(n);
      const double* xn = X.row(n);
      for (int k = 0; k < K; ++k) {
        const double g = gn[k];
        if (g == 0.0) continue;
        const double* mk = res.mix.means.data() + static_cast<std::ptrdiff_t>(k) * D;
        double* ck = res.mix.cov.data() + static_cast<std::ptrdiff_t>(k) * D * D;
        for (int i = 0; i < D; ++i) {
          const double di = xn[i] - mk[i];
          for (int j = 0; j < D; ++j) ck[i * D + j] += g * di * (xn[j] - mk[j]);
        }
      }
    }
    for (int k = 0; k < K; ++k) {
      double* ck = res.mix.cov.data() + static_cast<std::ptrdiff_t>(k) * D * D;
      for (int i = 0; i < D * D; ++i) ck[i] /= s[static_cast<std::size_t>(k)];
      for (int i = 0; i < D; ++i) ck[i * D + i] += var_floor;  // jitter keeps SPD
      for (int i = 0; i < D; ++i) {
        res.mix.vars[static_cast<std::size_t>(k) * D + i] = ck[i * D + i];
      }
    }
  }
  return res;
}

// R(Sigma) = sum_k sum_i 1 / Sigma_kii
inline double covariance_penalty(const MixtureParams& mix) {
  double r = 0.0;
  for (double v : mix.vars) r += 1.0 / v;
  return r;
}

// Prepared scorer for repeated likelihood evaluation against one mixture.
class MixtureScorer {
 public:
  explicit MixtureScorer(const MixtureParams& mix) : mix_(&mix) {
    static constexpr double kLog2Pi = 1.8378770664093454836;
    kconst_.resize(static_cast<std::size_t>(mix.K));
    if (!mix.full) {
      inv_var_.resize(static_cast<std::size_t>(mix.K) * mix.D);
      for (int k = 0; k < mix.K; ++k) {
        double c = std::log(std::max(mix.weights[static_cast<std::size_t>(k)], 1e-300));
        const double* vk = mix.var(k);
        for (int i = 0; i < mix.D; ++i) {
          c -= 0.5 * (kLog2Pi + std::log(vk[i]));
          inv_var_[static_cast<std::size_t>(k) * mix.D + i] = 1.0 / vk[i];
        }
        kconst_[static_cast<std::size_t>(k)] = c;
      }
    } else {
      factors_.resize(static_cast<std::size_t>(mix.K));
      for (int k = 0; k < mix.K; ++k) {
        auto& L = factors_[static_cast<std::size_t>(k)];
        L.assign(mix.cov_k(k), mix.cov_k(k) + mix.D * mix.D);
        if (!chol::factor(L, mix.D)) {
          throw NumericError("MixtureScorer: covariance not positive definite");
        }
        kconst_[static_cast<std::size_t>(k)] =
            std::log(std::max(mix.weights[static_cast<std::size_t>(k)], 1e-300)) -
            0.5 * (mix.D * kLog2Pi + chol::logdet_from_factor(L, mix.D));
      }
    }
  }

  double loglik(const double* x) const {
    const int K = mix_->K;
    const int D = mix_->D;
    double best = -std::numeric_limits<double>::infinity();
    term_buf_.resize(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      double quad = 0.0;
      const double* mk = mix_->mean(k);
      if (!mix_->full) {
        const double* iv = inv_var_.data() + static_cast<std::ptrdiff_t>(k) * D;
        for (int i = 0; i < D; ++i) {
          const double d = x[i] - mk[i];
          quad += d * d * iv[i];
        }
      } else {
        diff_buf_.resize(static_cast<std::size_t>(D));
        solve_buf_.resize(static_cast<std::size_t>(D));
        for (int i = 0; i < D; ++i) diff_buf_[static_cast<std::size_t>(i)] = x[i] - mk[i];
        chol::solve(factors_[static_cast<std::size_t>(k)], D, diff_buf_.data(), solve_buf_.data());
        for (int i = 0; i < D; ++i) quad += diff_buf_[static_cast<std::size_t>(i)] * solve_buf_[static_cast<std::size_t>(i)];
      }
      const double t = kconst_[static_cast<std::size_t>(k)] - 0.5 * quad;
      term_buf_[static_cast<std::size_t>(k)] = t;
      best = std::max(best, t);
    }
    double acc = 0.0;
    for (int k = 0; k < K; ++k) acc += std::exp(term_buf_[static_cast<std::size_t>(k)] - best);
    return best + std::log(acc);
  }

 private:
  const MixtureParams* mix_;
  std::vector<double> inv_var_;
  std::vector<double> kconst_;
  std::vector<std::vector<double>> factors_;
  mutable std::vector<double> term_buf_;
  mutable std::vector<double> diff_buf_;
  mutable std::vector<double> solve_buf_;
};

inline double log_likelihood(const std::vector<double>& x, const MixtureParams& mix) {
  if (static_cast<int>(x.size()) != mix.D) throw NumericError("log_likelihood: dimension mismatch");
  return MixtureScorer(mix).loglik(x.data());
}

// ---- membership network ----

struct MembershipNetRef {
  std::string w1, b1, w2, b2;
  int in_dim = 0;
  int hidden = 0;

  int K(const ad::ParamStore& store) const { return store.value(w2).rows; }
};

inline MembershipNetRef make_membership_net(ad::ParamStore& store, int class_id, int scale,
                                            int in_dim, int hidden, int K, std::uint64_t seed) {
  MembershipNetRef net;
  const std::string base = "memb/c" + std::to_string(class_id) + "/s" + std::to_string(scale);
  net.w1 = base + "/W1";
  net.b1 = base + "/b1";
  net.w2 = base + "/W2";
  net.b2 = base + "/b2";
  net.in_dim = in_dim;
  net.hidden = hidden;
  {
    Rng rng(seed_combine(seed, hash_str(net.w1)));
    store.create(net.w1, ad::uniform_init(hidden, in_dim, rng));
  }
  store.create(net.b1, ad::Tensor(1, hidden));
  {
    Rng rng(seed_combine(seed, hash_str(net.w2)));
    store.create(net.w2, ad::uniform_init(K, hidden, rng));
  }
  store.create(net.b2, ad::Tensor(1, K));
  return net;
}

// Numeric membership prediction (softmax over MLP logits), one row per sample.
inline ad::Tensor predict_membership(const ad::Tensor& X, const MembershipNetRef& net,
                                     const ad::ParamStore& store) {
  if (X.cols != net.in_dim) throw NumericError("predict_membership: dimension mismatch");
  ad::Tensor H;
  numeric::affine(X, store.value(net.w1), store.value(net.b1), H);
  numeric::relu(H);
  ad::Tensor A;
  numeric::affine(H, store.value(net.w2), store.value(net.b2), A);
  for (int i = 0; i < A.rows; ++i) {
    double* ai = A.row(i);
    double mx = ai[0];
    for (int j = 1; j < A.cols; ++j) mx = std::max(mx, ai[j]);
    double sum = 0.0;
    for (int j = 0; j < A.cols; ++j) {
      ai[j] = std::exp(ai[j] - mx);
      sum += ai[j];
    }
    for (int j = 0; j < A.cols; ++j) ai[j] /= sum;
  }
  return A;
}

// ---- batch loss on tape ----

struct BatchLossResult {
  ad::Val loss;
  ad::Val logp;   // [N x 1]
  ad::Val gamma;  // [N x K] memberships
  ad::Val phi;    // [1 x K] batch estimates (EMA-blended on degenerate kernels)
  ad::Val mu;     // [K x D]
  ad::Val var;    // [K x D]
  std::vector<char> degenerate;
};

// loss = -(1/N) sum_n log p(x_n) + lambda * sum_k sum_i 1/Sigma_kii, with
// mixture parameters estimated from this batch. Kernels whose batch mass
// falls below 1e-12 keep their EMA parameters for this batch (constants on
// the tape, so they receive no gradient).
inline BatchLossResult batch_loss_on_tape(ad::Tape& tape, ad::ParamStore& store,
                                          const MembershipNetRef& net, ad::Val X,
                                          const MixtureParams& ema, double lambda,
                                          double var_floor) {
  const int N = tape.value(X).rows;
  const int D = tape.value(X).cols;
  const int K = net.K(store);
  if (N < 1) throw NumericError("batch_loss: empty batch");
  if (D != net.in_dim || ema.K != K || ema.D != D) {
    throw NumericError("batch_loss: dimension mismatch");
  }

  const ad::Val H = tape.relu(tape.affine(X, tape.param(store, net.w1), tape.param(store, net.b1)));
  const ad::Val A = tape.affine(H, tape.param(store, net.w2), tape.param(store, net.b2));
  const ad::Val G = tape.softmax_rows(A);

  const ad::Val s_raw = tape.colsum(G);  // [1 x K]
  BatchLossResult out;
  out.gamma = G;
  out.degenerate.assign(static_cast<std::size_t>(K), 0);
  bool any_degenerate = false;
  for (int k = 0; k < K; ++k) {
    if (tape.value(s_raw).v[static_cast<std::size_t>(k)] < kDegenerateMass) {
      out.degenerate[static_cast<std::size_t>(k)] = 1;
      any_degenerate = true;
    }
  }

  const ad::Val s = tape.clamp_min(s_raw, kDegenerateMass);
  ad::Val phi = tape.scale(s_raw, 1.0 / N);
  const ad::Val M = tape.matmul_tn(G, X);  // [K x D]
  ad::Val mu = tape.rowdiv(M, s);
  const ad::Val XX = tape.mul(X, X);
  const ad::Val B = tape.matmul_tn(G, XX);
  const ad::Val ex2 = tape.rowdiv(B, s);
  ad::Val var = tape.clamp_min(tape.sub(ex2, tape.mul(mu, mu)), var_floor);

  if (any_degenerate) {
    ad::Tensor mask_kd(K, D, 1.0);
    ad::Tensor ema_mu(K, D), ema_var(K, D);
    ad::Tensor mask_k(1, K, 1.0);
    ad::Tensor ema_phi(1, K);
    for (int k = 0; k < K; ++k) {
      if (!out.degenerate[static_cast<std::size_t>(k)]) continue;
      mask_k.v[static_cast<std::size_t>(k)] = 0.0;
      ema_phi.v[static_cast<std::size_t>(k)] = ema.weights[static_cast<std::size_t>(k)];
      for (int i = 0; i < D; ++i) {
        mask_kd.at(k, i) = 0.0;
        ema_mu.at(k, i) = ema.mean(k)[i];
        ema_var.at(k, i) = ema.var(k)[i];
      }
    }
    mu = tape.add(tape.mul(mu, tape.constant(mask_kd)), tape.constant(ema_mu));
    var = tape.add(tape.mul(var, tape.constant(std::move(mask_kd))), tape.constant(ema_var));
    phi = tape.add(tape.mul(phi, tape.constant(mask_k)), tape.constant(ema_phi));
  }

  const ad::Val R = tape.recip(var);          // [K x D]
  const ad::Val S = tape.mul(mu, R);          // [K x D]
  const ad::Val q = tape.transpose(tape.rowsum(tape.mul(mu, S)));  // [1 x K]
  const ad::Val Qa = tape.matmul_nt(XX, R);   // [N x K]
  const ad::Val Qb = tape.matmul_nt(X, S);    // [N x K]
  const ad::Val Q = tape.add_rowvec(tape.sub(Qa, tape.scale(Qb, 2.0)), q);

  static constexpr double kTwoPi = 6.283185307179586477;
  const ad::Val ldet = tape.transpose(tape.rowsum(tape.log(tape.scale(var, kTwoPi))));  // [1 x K]
  const ad::Val lphi = tape.log(tape.clamp_min(phi, 1e-300));
  const ad::Val kterm = tape.sub(lphi, tape.scale(ldet, 0.5));  // [1 x K]

  const ad::Val LL = tape.add_rowvec(tape.scale(Q, -0.5), kterm);
  out.logp = tape.logsumexp_rows(LL);
  const ad::Val nll = tape.scale(tape.mean_all(out.logp), -1.0);
  const ad::Val penalty = tape.sum_all(R);
  out.loss = tape.add(nll, tape.scale(penalty, lambda));
  out.phi = phi;
  out.mu = mu;
  out.var = var;
  return out;
}

// Harvest batch-fresh mixture estimates off the tape (for the EMA update).
inline MixtureParams fresh_from_batch(const ad::Tape& tape, const BatchLossResult& r) {
  MixtureParams m;
  m.K = tape.value(r.mu).rows;
  m.D = tape.value(r.mu).cols;
  m.weights = tape.value(r.phi).v;
  m.means = tape.value(r.mu).v;
  m.vars = tape.value(r.var).v;
  return m;
}

// ema <- decay*ema + (1-decay)*fresh, weights renormalized to the simplex,
// variance floor reapplied. Kernels flagged degenerate carried EMA values
// through the batch, so this update leaves them unchanged (pre-renorm).
inline void update_ema(MixtureParams& ema, const MixtureParams& fresh, double decay,
                       double var_floor) {
  if (ema.K != fresh.K || ema.D != fresh.D) throw NumericError("update_ema: K mismatch");
  if (decay < 0.0 || decay >= 1.0) throw UsageError("update_ema: decay must be in [0,1)");
  const double a = decay;
  const double b = 1.0 - decay;
  for (std::size_t i = 0; i < ema.weights.size(); ++i) {
    ema.weights[i] = a * ema.weights[i] + b * fresh.weights[i];
  }
  for (std::size_t i = 0; i < ema.means.size(); ++i) ema.means[i] = a * ema.means[i] + b * fresh.means[i];
  for (std::size_t i = 0; i < ema.vars.size(); ++i) {
    ema.vars[i] = std::max(a * ema.vars[i] + b * fresh.vars[i], var_floor);
  }
  if (ema.full && !fresh.cov.empty()) {
    for (std::size_t i = 0; i < ema.cov.size(); ++i) ema.cov[i] = a * ema.cov[i] + b * fresh.cov[i];
  }
  double wsum = 0.0;
  for (double w : ema.weights) wsum += w;
  if (wsum > 0.0) {
    for (double& w : ema.weights) w /= wsum;
  }
}

struct PruneResult {
  std::vector<int> kept;  // surviving kernel indices (ascending)
  bool changed = false;
};

// Remove kernels whose EMA weight fell below th; renormalize the survivors
// and delete the matching membership-net logit rows. At least one kernel
// always survives.
inline PruneResult prune_kernels(MixtureParams& ema, ad::ParamStore& store,
                                 const MembershipNetRef& net, double th) {
  PruneResult res;
  for (int k = 0; k < ema.K; ++k) {
    if (ema.weights[static_cast<std::size_t>(k)] >= th) res.kept.push_back(k);
  }
  if (res.kept.empty()) {
    int best = 0;
    for (int k = 1; k < ema.K; ++k) {
      if (ema.weights[static_cast<std::size_t>(k)] > ema.weights[static_cast<std::size_t>(best)]) best = k;
    }
    res.kept.push_back(best);
  }
  if (static_cast<int>(res.kept.size()) == ema.K) return res;
  res.changed = true;

  MixtureParams next;
  next.K = static_cast<int>(res.kept.size());
  next.D = ema.D;
  next.full = ema.full;
  double wsum = 0.0;
  for (int k : res.kept) wsum += ema.weights[static_cast<std::size_t>(k)];
  for (int k : res.kept) {
    next.weights.push_back(ema.weights[static_cast<std::size_t>(k)] / wsum);
    next.means.insert(next.means.end(), ema.mean(k), ema.mean(k) + ema.D);
    next.vars.insert(next.vars.end(), ema.var(k), ema.var(k) + ema.D);
    if (ema.full) next.cov.insert(next.cov.end(), ema.cov_k(k), ema.cov_k(k) + ema.D * ema.D);
  }
  ema = std::move(next);

  store.shrink_rows(net.w2, res.kept);
  store.shrink_cols(net.b2, res.kept);
  return res;
}

}  // namespace musle
