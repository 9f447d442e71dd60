#pragma once

// Minimal reverse-mode differentiation core. Nodes are dense row-major
// matrices, the tape is built eagerly (forward values computed at op
// creation) and backward replays the tape in reverse. Everything runs in
// double precision; mixture covariances are too ill-conditioned for single.

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "musle/common.hpp"

namespace musle::ad {

struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int r, int c, double fill = 0.0)
      : rows(r), cols(c), v(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

  int size() const { return rows * cols; }
  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const { return v.data() + static_cast<std::size_t>(r) * cols; }

  bool finite() const { return all_finite(v); }
};

// Fan-balanced uniform init, range +-sqrt(6/(fan_in+fan_out)).
inline Tensor uniform_init(int rows, int cols, Rng& rng) {
  Tensor t(rows, cols);
  const double s = std::sqrt(6.0 / (rows + cols));
  for (auto& x : t.v) x = rng.uniform(-s, s);
  return t;
}

// Named parameter store with momentum buffers. Shapes are fixed at
// creation; kernel pruning goes through shrink_rows, which re-slices the
// value and momentum together.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
    Tensor momentum;
  };

  Tensor& create(const std::string& name, Tensor init) {
    if (entries_.count(name)) throw NumericError("ParamStore: duplicate parameter '" + name + "'");
    Entry e;
    e.grad = Tensor(init.rows, init.cols);
    e.momentum = Tensor(init.rows, init.cols);
    e.value = std::move(init);
    auto [it, ok] = entries_.emplace(name, std::move(e));
    (void)ok;
    return it->second.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw NumericError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw NumericError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }

  // Keep only the given rows of a parameter (and its momentum); used when
  // mixture kernels are pruned and logit rows must shrink with them.
  void shrink_rows(const std::string& name, const std::vector<int>& keep) {
    Entry& e = entry(name);
    auto slice = [&](const Tensor& t) {
      Tensor s(static_cast<int>(keep.size()), t.cols);
      for (std::size_t i = 0; i < keep.size(); ++i) {
        for (int c = 0; c < t.cols; ++c) s.at(static_cast<int>(i), c) = t.at(keep[i], c);
      }
      return s;
    };
    e.value = slice(e.value);
    e.momentum = slice(e.momentum);
    e.grad = Tensor(static_cast<int>(keep.size()), e.value.cols);
  }

  void shrink_cols(const std::string& name, const std::vector<int>& keep) {
    Entry& e = entry(name);
    auto slice = [&](const Tensor& t) {
      Tensor s(t.rows, static_cast<int>(keep.size()));
      for (int r = 0; r < t.rows; ++r) {
        for (std::size_t i = 0; i < keep.size(); ++i) s.at(r, static_cast<int>(i)) = t.at(r, keep[i]);
      }
      return s;
    };
    e.value = slice(e.value);
    e.momentum = slice(e.momentum);
    e.grad = Tensor(e.value.rows, static_cast<int>(keep.size()));
  }

  void zero_grad() {
    for (auto& [name, e] : entries_) std::fill(e.grad.v.begin(), e.grad.v.end(), 0.0);
  }

  // Deterministic (name-sorted) iteration.
  std::map<std::string, Entry>& all() { return entries_; }
  const std::map<std::string, Entry>& all() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double lr_decay = 0.1;
  int lr_decay_period = 20;  // epochs
  int epochs = 50;

  void validate() const {
    if (learning_rate <= 0) throw UsageError("optimizer: learning_rate must be > 0");
    if (momentum < 0 || momentum >= 1) throw UsageError("optimizer: momentum must be in [0,1)");
    if (weight_decay < 0) throw UsageError("optimizer: weight_decay must be >= 0");
  }

  double lr_at(int epoch) const {
    double lr = learning_rate;
    if (lr_decay_period > 0) {
      for (int e = lr_decay_period; e <= epoch; e += lr_decay_period) lr *= lr_decay;
    }
    return lr;
  }
};

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
// Grads are zeroed afterwards. A non-finite gradient aborts the whole step.
inline void sgd_step(ParamStore& store, const OptimizerConfig& cfg, double lr) {
  for (auto& [name, e] : store.all()) {
    if (!e.grad.finite()) {
      throw NumericError("sgd_step: non-finite gradient in parameter '" + name + "'");
    }
  }
  for (auto& [name, e] : store.all()) {
    for (int i = 0; i < e.value.size(); ++i) {
      const double g = e.grad.v[static_cast<std::size_t>(i)] +
                       cfg.weight_decay * e.value.v[static_cast<std::size_t>(i)];
      e.momentum.v[static_cast<std::size_t>(i)] =
          cfg.momentum * e.momentum.v[static_cast<std::size_t>(i)] + g;
      e.value.v[static_cast<std::size_t>(i)] -= lr * e.momentum.v[static_cast<std::size_t>(i)];
    }
    std::fill(e.grad.v.begin(), e.grad.v.end(), 0.0);
  }
}

inline void sgd_step(ParamStore& store, const OptimizerConfig& cfg) {
  sgd_step(store, cfg, cfg.learning_rate);
}

struct Val {
  int id = -1;
};

class Tape {
 public:
  // Counts rectifier inputs within kink_window of the kink at 0; the
  // gradient checker uses this to flag unreliable finite differences.
  void set_kink_window(double w) { kink_window_ = w; }
  int kink_hits() const { return kink_hits_; }

  const Tensor& value(Val v) const { return nodes_[static_cast<std::size_t>(v.id)].val; }
  Tensor& grad(Val v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  bool needs_grad(Val v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  Val constant(Tensor t) { return push(std::move(t), false, {}, nullptr); }

  Val scalar(double x) {
    Tensor t(1, 1);
    t.v[0] = x;
    return constant(std::move(t));
  }

  // Leaf bound to a store parameter; backward accumulates into the store.
  Val param(ParamStore& store, const std::string& name) {
    ParamStore::Entry& e = store.entry(name);
    Val v = push(e.value, true, {}, nullptr);
    Node& n = nodes_.back();
    ParamStore::Entry* ep = &e;
    int id = v.id;
    n.backward = [this, ep, id]() {
      const Tensor& g = nodes_[static_cast<std::size_t>(id)].grad;
      for (int i = 0; i < g.size(); ++i) ep->grad.v[static_cast<std::size_t>(i)] += g.v[static_cast<std::size_t>(i)];
    };
    return v;
  }

  // Generic custom node; `backward` reads this->grad(out) and accumulates
  // into the grads of its dependencies.
  Val make_node(Tensor val, const std::vector<Val>& deps, std::function<void()> backward) {
    bool needs = false;
    for (Val d : deps) needs = needs || nodes_[static_cast<std::size_t>(d.id)].needs_grad;
    return push(std::move(val), needs, deps, needs ? std::move(backward) : nullptr);
  }

  // ---- ops ----

  // X [n x d] * W^T [h x d] + b [1 x h]
  Val affine(Val x, Val w, Val b) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    if (X.cols != W.cols || B.cols != W.rows || B.rows != 1) {
      throw NumericError("affine: shape mismatch");
    }
    Tensor Y(X.rows, W.rows);
    for (int i = 0; i < X.rows; ++i) {
      const double* xi = X.row(i);
      double* yi = Y.row(i);
      for (int j = 0; j < W.rows; ++j) {
        const double* wj = W.row(j);
        double acc = B.v[static_cast<std::size_t>(j)];
        for (int k = 0; k < X.cols; ++k) acc += xi[k] * wj[k];
        yi[j] = acc;
      }
    }
    Val out = make_node(std::move(Y), {x, w, b}, nullptr);
    nodes_.back().backward = [this, out, x, w, b]() {
      const Tensor& dY = grad(out);
      const Tensor& X2 = value(x);
      const Tensor& W2 = value(w);
      if (needs_grad(x)) {
        Tensor& dX = grad(x);
        for (int i = 0; i < X2.rows; ++i) {
          const double* dyi = dY.row(i);
          double* dxi = dX.row(i);
          for (int j = 0; j < W2.rows; ++j) {
            const double d = dyi[j];
            if (d == 0.0) continue;
            const double* wj = W2.row(j);
            for (int k = 0; k < X2.cols; ++k) dxi[k] += d * wj[k];
          }
        }
      }
      if (needs_grad(w)) {
        Tensor& dW = grad(w);
        for (int i = 0; i < X2.rows; ++i) {
          const double* dyi = dY.row(i);
          const double* xi = X2.row(i);
          for (int j = 0; j < W2.rows; ++j) {
            const double d = dyi[j];
            if (d == 0.0) continue;
            double* dwj = dW.row(j);
            for (int k = 0; k < X2.cols; ++k) dwj[k] += d * xi[k];
          }
        }
      }
      if (needs_grad(b)) {
        Tensor& dB = grad(b);
        for (int i = 0; i < dY.rows; ++i) {
          const double* dyi = dY.row(i);
          for (int j = 0; j < dY.cols; ++j) dB.v[static_cast<std::size_t>(j)] += dyi[j];
        }
      }
    };
    return out;
  }

  // Rectifier with exact zero at 0; subgradient 0 at the kink.
  Val relu(Val x) {
    const Tensor& X = value(x);
    Tensor Y = X;
    for (double& v : Y.v) {
      if (kink_window_ > 0.0 && std::abs(v) < kink_window_) ++kink_hits_;
      if (v <= 0.0) v = 0.0;
    }
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      const Tensor& X2 = value(x);
      Tensor& dX = grad(x);
      for (int i = 0; i < X2.size(); ++i) {
        if (X2.v[static_cast<std::size_t>(i)] > 0.0) dX.v[static_cast<std::size_t>(i)] += dY.v[static_cast<std::size_t>(i)];
      }
    };
    return out;
  }

  // Row-wise softmax with max subtraction.
  Val softmax_rows(Val x) {
    const Tensor& X = value(x);
    Tensor Y(X.rows, X.cols);
    for (int i = 0; i < X.rows; ++i) {
      const double* xi = X.row(i);
      double* yi = Y.row(i);
      double mx = xi[0];
      for (int j = 1; j < X.cols; ++j) mx = std::max(mx, xi[j]);
      double sum = 0.0;
      for (int j = 0; j < X.cols; ++j) {
        yi[j] = std::exp(xi[j] - mx);
        sum += yi[j];
      }
      for (int j = 0; j < X.cols; ++j) yi[j] /= sum;
    }
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const Tensor& P = value(out);
      const Tensor& dY = grad(out);
      Tensor& dX = grad(x);
      for (int i = 0; i < P.rows; ++i) {
        const double* pi = P.row(i);
        const double* dyi = dY.row(i);
        double dot = 0.0;
        for (int j = 0; j < P.cols; ++j) dot += dyi[j] * pi[j];
        double* dxi = dX.row(i);
        for (int j = 0; j < P.cols; ++j) dxi[j] += pi[j] * (dyi[j] - dot);
      }
    };
    return out;
  }

  Val add(Val a, Val b) { return ew(a, b, [](double x, double y) { return x + y; }, 1, 1); }
  Val sub(Val a, Val b) { return ew(a, b, [](double x, double y) { return x - y; }, 1, -1); }

  Val mul(Val a, Val b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "mul");
    Tensor Y(A.rows, A.cols);
    for (int i = 0; i < A.size(); ++i) Y.v[static_cast<std::size_t>(i)] = A.v[static_cast<std::size_t>(i)] * B.v[static_cast<std::size_t>(i)];
    Val out = make_node(std::move(Y), {a, b}, nullptr);
    nodes_.back().backward = [this, out, a, b]() {
      const Tensor& dY = grad(out);
      const Tensor& A2 = value(a);
      const Tensor& B2 = value(b);
      if (needs_grad(a)) {
        Tensor& dA = grad(a);
        for (int i = 0; i < dY.size(); ++i) dA.v[static_cast<std::size_t>(i)] += dY.v[static_cast<std::size_t>(i)] * B2.v[static_cast<std::size_t>(i)];
      }
      if (needs_grad(b)) {
        Tensor& dB = grad(b);
        for (int i = 0; i < dY.size(); ++i) dB.v[static_cast<std::size_t>(i)] += dY.v[static_cast<std::size_t>(i)] * A2.v[static_cast<std::size_t>(i)];
      }
    };
    return out;
  }

  Val scale(Val x, double c) {
    const Tensor& X = value(x);
    Tensor Y = X;
    for (double& v : Y.v) v *= c;
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x, c]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      Tensor& dX = grad(x);
      for (int i = 0; i < dY.size(); ++i) dX.v[static_cast<std::size_t>(i)] += c * dY.v[static_cast<std::size_t>(i)];
    };
    return out;
  }

  // Broadcast-add a [1 x k] row vector over every row of X [n x k].
  Val add_rowvec(Val x, Val r) {
    const Tensor& X = value(x);
    const Tensor& R = value(r);
    if (R.rows != 1 || R.cols != X.cols) throw NumericError("add_rowvec: shape mismatch");
    Tensor Y = X;
    for (int i = 0; i < X.rows; ++i) {
      double* yi = Y.row(i);
      for (int j = 0; j < X.cols; ++j) yi[j] += R.v[static_cast<std::size_t>(j)];
    }
    Val out = make_node(std::move(Y), {x, r}, nullptr);
    nodes_.back().backward = [this, out, x, r]() {
      const Tensor& dY = grad(out);
      if (needs_grad(x)) {
        Tensor& dX = grad(x);
        for (int i = 0; i < dY.size(); ++i) dX.v[static_cast<std::size_t>(i)] += dY.v[static_cast<std::size_t>(i)];
      }
      if (needs_grad(r)) {
        Tensor& dR = grad(r);
        for (int i = 0; i < dY.rows; ++i) {
          const double* dyi = dY.row(i);
          for (int j = 0; j < dY.cols; ++j) dR.v[static_cast<std::size_t>(j)] += dyi[j];
        }
      }
    };
    return out;
  }

  // A^T B for A [n x k], B [n x m] -> [k x m]
  Val matmul_tn(Val a, Val b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.rows != B.rows) throw NumericError("matmul_tn: shape mismatch");
    Tensor Y(A.cols, B.cols);
    for (int i = 0; i < A.rows; ++i) {
      const double* ai = A.row(i);
      const double* bi = B.row(i);
      for (int k = 0; k < A.cols; ++k) {
        const double av = ai[k];
        if (av == 0.0) continue;
        double* yk = Y.row(k);
        for (int j = 0; j < B.cols; ++j) yk[j] += av * bi[j];
      }
    }
    Val out = make_node(std::move(Y), {a, b}, nullptr);
    nodes_.back().backward = [this, out, a, b]() {
      const Tensor& dY = grad(out);  // [k x m]
      const Tensor& A2 = value(a);
      const Tensor& B2 = value(b);
      if (needs_grad(a)) {
        // dA = B dY^T : dA[i,k] += sum_j B[i,j] dY[k,j]
        Tensor& dA = grad(a);
        for (int i = 0; i < A2.rows; ++i) {
          const double* bi = B2.row(i);
          double* dai = dA.row(i);
          for (int k = 0; k < A2.cols; ++k) {
            const double* dyk = dY.row(k);
            double acc = 0.0;
            for (int j = 0; j < B2.cols; ++j) acc += bi[j] * dyk[j];
            dai[k] += acc;
          }
        }
      }
      if (needs_grad(b)) {
        // dB = A dY : dB[i,j] += sum_k A[i,k] dY[k,j]
        Tensor& dB = grad(b);
        for (int i = 0; i < B2.rows; ++i) {
          const double* ai = A2.row(i);
          double* dbi = dB.row(i);
          for (int k = 0; k < A2.cols; ++k) {
            const double av = ai[k];
            if (av == 0.0) continue;
            const double* dyk = dY.row(k);
            for (int j = 0; j < B2.cols; ++j) dbi[j] += av * dyk[j];
          }
        }
      }
    };
    return out;
  }

  // A B^T for A [n x d], B [k x d] -> [n x k]
  Val matmul_nt(Val a, Val b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.cols != B.cols) throw NumericError("matmul_nt: shape mismatch");
    Tensor Y(A.rows, B.rows);
    for (int i = 0; i < A.rows; ++i) {
      const double* ai = A.row(i);
      double* yi = Y.row(i);
      for (int k = 0; k < B.rows; ++k) {
        const double* bk = B.row(k);
        double acc = 0.0;
        for (int j = 0; j < A.cols; ++j) acc += ai[j] * bk[j];
        yi[k] = acc;
      }
    }
    Val out = make_node(std::move(Y), {a, b}, nullptr);
    nodes_.back().backward = [this, out, a, b]() {
      const Tensor& dY = grad(out);  // [n x k]
      const Tensor& A2 = value(a);
      const Tensor& B2 = value(b);
      if (needs_grad(a)) {
        Tensor& dA = grad(a);
        for (int i = 0; i < A2.rows; ++i) {
          const double* dyi = dY.row(i);
          double* dai = dA.row(i);
          for (int k = 0; k < B2.rows; ++k) {
            const double d = dyi[k];
            if (d == 0.0) continue;
            const double* bk = B2.row(k);
            for (int j = 0; j < A2.cols; ++j) dai[j] += d * bk[j];
          }
        }
      }
      if (needs_grad(b)) {
        Tensor& dB = grad(b);
        for (int i = 0; i < A2.rows; ++i) {
          const double* dyi = dY.row(i);
          const double* ai = A2.row(i);
          for (int k = 0; k < B2.rows; ++k) {
            const double d = dyi[k];
            if (d == 0.0) continue;
            double* dbk = dB.row(k);
            for (int j = 0; j < A2.cols; ++j) dbk[j] += d * ai[j];
          }
        }
      }
    };
    return out;
  }

  Val colsum(Val x) {
    const Tensor& X = value(x);
    Tensor Y(1, X.cols);
    for (int i = 0; i < X.rows; ++i) {
      const double* xi = X.row(i);
      for (int j = 0; j < X.cols; ++j) Y.v[static_cast<std::size_t>(j)] += xi[j];
    }
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      Tensor& dX = grad(x);
      for (int i = 0; i < dX.rows; ++i) {
        double* dxi = dX.row(i);
        for (int j = 0; j < dX.cols; ++j) dxi[j] += dY.v[static_cast<std::size_t>(j)];
      }
    };
    return out;
  }

  Val rowsum(Val x) {
    const Tensor& X = value(x);
    Tensor Y(X.rows, 1);
    for (int i = 0; i < X.rows; ++i) {
      const double* xi = X.row(i);
      double acc = 0.0;
      for (int j = 0; j < X.cols; ++j) acc += xi[j];
      Y.v[static_cast<std::size_t>(i)] = acc;
    }
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      Tensor& dX = grad(x);
      for (int i = 0; i < dX.rows; ++i) {
        double* dxi = dX.row(i);
        for (int j = 0; j < dX.cols; ++j) dxi[j] += dY.v[static_cast<std::size_t>(i)];
      }
    };
    return out;
  }

  Val transpose(Val x) {
    const Tensor& X = value(x);
    Tensor Y(X.cols, X.rows);
    for (int i = 0; i < X.rows; ++i) {
      for (int j = 0; j < X.cols; ++j) Y.at(j, i) = X.at(i, j);
    }
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      Tensor& dX = grad(x);
      for (int i = 0; i < dX.rows; ++i) {
        for (int j = 0; j < dX.cols; ++j) dX.at(i, j) += dY.at(j, i);
      }
    };
    return out;
  }

  // Divide row i of X [k x d] by s_i, s given as [1 x k].
  Val rowdiv(Val x, Val s) {
    const Tensor& X = value(x);
    const Tensor& S = value(s);
    if (S.rows != 1 || S.cols != X.rows) throw NumericError("rowdiv: shape mismatch");
    Tensor Y(X.rows, X.cols);
    for (int i = 0; i < X.rows; ++i) {
      const double si = S.v[static_cast<std::size_t>(i)];
      const double* xi = X.row(i);
      double* yi = Y.row(i);
      for (int j = 0; j < X.cols; ++j) yi[j] = xi[j] / si;
    }
    Val out = make_node(std::move(Y), {x, s}, nullptr);
    nodes_.back().backward = [this, out, x, s]() {
      const Tensor& dY = grad(out);
      const Tensor& Y2 = value(out);
      const Tensor& S2 = value(s);
      if (needs_grad(x)) {
        Tensor& dX = grad(x);
        for (int i = 0; i < dY.rows; ++i) {
          const double si = S2.v[static_cast<std::size_t>(i)];
          const double* dyi = dY.row(i);
          double* dxi = dX.row(i);
          for (int j = 0; j < dY.cols; ++j) dxi[j] += dyi[j] / si;
        }
      }
      if (needs_grad(s)) {
        Tensor& dS = grad(s);
        for (int i = 0; i < dY.rows; ++i) {
          const double si = S2.v[static_cast<std::size_t>(i)];
          const double* dyi = dY.row(i);
          const double* yi = Y2.row(i);
          double acc = 0.0;
          for (int j = 0; j < dY.cols; ++j) acc += dyi[j] * yi[j];
          dS.v[static_cast<std::size_t>(i)] -= acc / si;
        }
      }
    };
    return out;
  }

  // max(x, c); gradient is zero in the clamped region.
  Val clamp_min(Val x, double c) {
    const Tensor& X = value(x);
    Tensor Y = X;
    for (double& v : Y.v) v = std::max(v, c);
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x, c]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      const Tensor& X2 = value(x);
      Tensor& dX = grad(x);
      for (int i = 0; i < X2.size(); ++i) {
        if (X2.v[static_cast<std::size_t>(i)] > c) dX.v[static_cast<std::size_t>(i)] += dY.v[static_cast<std::size_t>(i)];
      }
    };
    return out;
  }

  Val recip(Val x) {
    const Tensor& X = value(x);
    Tensor Y(X.rows, X.cols);
    for (int i = 0; i < X.size(); ++i) Y.v[static_cast<std::size_t>(i)] = 1.0 / X.v[static_cast<std::size_t>(i)];
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      const Tensor& Y2 = value(out);
      Tensor& dX = grad(x);
      for (int i = 0; i < dY.size(); ++i) {
        const double y = Y2.v[static_cast<std::size_t>(i)];
        dX.v[static_cast<std::size_t>(i)] -= dY.v[static_cast<std::size_t>(i)] * y * y;
      }
    };
    return out;
  }

  Val log(Val x) {
    const Tensor& X = value(x);
    Tensor Y(X.rows, X.cols);
    for (int i = 0; i < X.size(); ++i) Y.v[static_cast<std::size_t>(i)] = std::log(X.v[static_cast<std::size_t>(i)]);
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      const Tensor& X2 = value(x);
      Tensor& dX = grad(x);
      for (int i = 0; i < dY.size(); ++i) dX.v[static_cast<std::size_t>(i)] += dY.v[static_cast<std::size_t>(i)] / X2.v[static_cast<std::size_t>(i)];
    };
    return out;
  }

  Val sum_all(Val x) {
    const Tensor& X = value(x);
    Tensor Y(1, 1);
    double acc = 0.0;
    for (double v : X.v) acc += v;
    Y.v[0] = acc;
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const double d = grad(out).v[0];
      Tensor& dX = grad(x);
      for (double& g : dX.v) g += d;
    };
    return out;
  }

  Val mean_all(Val x) {
    const Tensor& X = value(x);
    return scale(sum_all(x), 1.0 / X.size());
  }

  Val logsumexp_rows(Val x) {
    const Tensor& X = value(x);
    Tensor Y(X.rows, 1);
    for (int i = 0; i < X.rows; ++i) {
      const double* xi = X.row(i);
      double mx = xi[0];
      for (int j = 1; j < X.cols; ++j) mx = std::max(mx, xi[j]);
      double acc = 0.0;
      for (int j = 0; j < X.cols; ++j) acc += std::exp(xi[j] - mx);
      Y.v[static_cast<std::size_t>(i)] = mx + std::log(acc);
    }
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      const Tensor& X2 = value(x);
      const Tensor& Y2 = value(out);
      Tensor& dX = grad(x);
      for (int i = 0; i < X2.rows; ++i) {
        const double d = dY.v[static_cast<std::size_t>(i)];
        if (d == 0.0) continue;
        const double* xi = X2.row(i);
        double* dxi = dX.row(i);
        const double lse = Y2.v[static_cast<std::size_t>(i)];
        for (int j = 0; j < X2.cols; ++j) dxi[j] += d * std::exp(xi[j] - lse);
      }
    };
    return out;
  }

  // Rows X[i] - X[j] for each (i, j) pair -> [m x d]
  Val pair_diff(Val x, std::vector<std::pair<int, int>> pairs) {
    const Tensor& X = value(x);
    Tensor Y(static_cast<int>(pairs.size()), X.cols);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const double* a = X.row(pairs[p].first);
      const double* b = X.row(pairs[p].second);
      double* yp = Y.row(static_cast<int>(p));
      for (int j = 0; j < X.cols; ++j) yp[j] = a[j] - b[j];
    }
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x, pairs = std::move(pairs)]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      Tensor& dX = grad(x);
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        const double* dyp = dY.row(static_cast<int>(p));
        double* da = dX.row(pairs[p].first);
        double* db = dX.row(pairs[p].second);
        for (int j = 0; j < dY.cols; ++j) {
          da[j] += dyp[j];
          db[j] -= dyp[j];
        }
      }
    };
    return out;
  }

  // dot(X[i], X[j]) for each (i, j) pair -> [m x 1]
  Val pair_dot(Val x, std::vector<std::pair<int, int>> pairs) {
    const Tensor& X = value(x);
    Tensor Y(static_cast<int>(pairs.size()), 1);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const double* a = X.row(pairs[p].first);
      const double* b = X.row(pairs[p].second);
      double acc = 0.0;
      for (int j = 0; j < X.cols; ++j) acc += a[j] * b[j];
      Y.v[p] = acc;
    }
    Val out = make_node(std::move(Y), {x}, nullptr);
    nodes_.back().backward = [this, out, x, pairs = std::move(pairs)]() {
      if (!needs_grad(x)) return;
      const Tensor& dY = grad(out);
      const Tensor& X2 = value(x);
      Tensor& dX = grad(x);
      for (std::size_t p = 0; p < pairs.size(); ++p) {
        const double d = dY.v[p];
        if (d == 0.0) continue;
        const double* a = X2.row(pairs[p].first);
        const double* b = X2.row(pairs[p].second);
        double* da = dX.row(pairs[p].first);
        double* db = dX.row(pairs[p].second);
        for (int j = 0; j < X2.cols; ++j) {
          da[j] += d * b[j];
          db[j] += d * a[j];
        }
      }
    };
    return out;
  }

  // Gather segments from source nodes into a dense matrix; used to build
  // sub-graph sample vectors from node and edge features.
  struct Segment {
    Val src;
    int src_row = 0;
    int src_col = 0;
    int len = 0;
  };

  Val assemble(const std::vector<std::vector<Segment>>& rows, int width) {
    Tensor Y(static_cast<int>(rows.size()), width);
    std::vector<Val> deps;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      int at = 0;
      double* yi = Y.row(static_cast<int>(i));
      for (const Segment& seg : rows[i]) {
        const Tensor& S = value(seg.src);
        if (seg.src_col + seg.len > S.cols || at + seg.len > width) {
          throw NumericError("assemble: segment out of range");
        }
        const double* sp = S.row(seg.src_row) + seg.src_col;
        for (int j = 0; j < seg.len; ++j) yi[at + j] = sp[j];
        at += seg.len;
        deps.push_back(seg.src);
      }
      if (at != width) throw NumericError("assemble: row width mismatch");
    }
    Val out = make_node(std::move(Y), deps, nullptr);
    nodes_.back().backward = [this, out, rows]() {
      const Tensor& dY = grad(out);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        int at = 0;
        const double* dyi = dY.row(static_cast<int>(i));
        for (const Segment& seg : rows[i]) {
          if (needs_grad(seg.src)) {
            double* gp = grad(seg.src).row(seg.src_row) + seg.src_col;
            for (int j = 0; j < seg.len; ++j) gp[j] += dyi[at + j];
          }
          at += seg.len;
        }
      }
    };
    return out;
  }

  // Reverse pass from a scalar root. Parameter leaves accumulate into
  // their store entries.
  void backward(Val root) {
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (r.val.size() != 1) throw NumericError("backward: root must be scalar");
    if (!r.needs_grad) return;
    r.grad.v[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.needs_grad && n.backward) n.backward();
    }
  }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void()> backward;
    bool needs_grad = false;
  };

  static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows != b.rows || a.cols != b.cols) {
      throw NumericError(std::string(op) + ": shape mismatch");
    }
  }

  template <typename F>
  Val ew(Val a, Val b, F f, double da, double db) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require_same_shape(A, B, "elementwise");
    Tensor Y(A.rows, A.cols);
    for (int i = 0; i < A.size(); ++i) Y.v[static_cast<std::size_t>(i)] = f(A.v[static_cast<std::size_t>(i)], B.v[static_cast<std::size_t>(i)]);
    Val out = make_node(std::move(Y), {a, b}, nullptr);
    nodes_.back().backward = [this, out, a, b, da, db]() {
      const Tensor& dY = grad(out);
      if (needs_grad(a)) {
        Tensor& dA = grad(a);
        for (int i = 0; i < dY.size(); ++i) dA.v[static_cast<std::size_t>(i)] += da * dY.v[static_cast<std::size_t>(i)];
      }
      if (needs_grad(b)) {
        Tensor& dB = grad(b);
        for (int i = 0; i < dY.size(); ++i) dB.v[static_cast<std::size_t>(i)] += db * dY.v[static_cast<std::size_t>(i)];
      }
    };
    return out;
  }

  Val push(Tensor val, bool needs, const std::vector<Val>& deps, std::function<void()> backward) {
    (void)deps;
    Node n;
    if (needs) n.grad = Tensor(val.rows, val.cols);
    n.val = std::move(val);
    n.needs_grad = needs;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Val{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  double kink_window_ = 0.0;
  int kink_hits_ = 0;
};

// ---- gradient checking ----

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  double analytic_at_max = 0.0;
  double numeric_at_max = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool kink_proximity = false;  // finite differences crossed a rectifier kink
  bool pass = false;
};

// Central-difference check of d(f)/d(param) for every parameter entry.
// `f` must rebuild the expression from the store on every call.
inline GradCheckReport grad_check(const std::function<Val(Tape&)>& f, ParamStore& store,
                                  double eps = 1e-5, double tol = 1e-4) {
  GradCheckReport report;

  auto eval = [&](bool track_kinks) {
    Tape tape;
    if (track_kinks) tape.set_kink_window(2.0 * eps);
    Val root = f(tape);
    if (tape.value(root).size() != 1) throw NumericError("grad_check: functional must be scalar");
    const double y = tape.value(root).v[0];
    if (track_kinks && tape.kink_hits() > 0) report.kink_proximity = true;
    return y;
  };

  const double y0 = eval(true);
  const double y1 = eval(false);
  if (y0 != y1) throw NumericError("grad_check: functional is non-deterministic");

  store.zero_grad();
  {
    Tape tape;
    Val root = f(tape);
    tape.backward(root);
  }
  std::map<std::string, Tensor> analytic;
  for (const auto& [name, e] : store.all()) analytic[name] = e.grad;
  store.zero_grad();

  for (auto& [name, e] : store.all()) {
    GradCheckEntry entry;
    entry.param = name;
    for (int i = 0; i < e.value.size(); ++i) {
      const double orig = e.value.v[static_cast<std::size_t>(i)];
      e.value.v[static_cast<std::size_t>(i)] = orig + eps;
      const double yp = eval(true);
      e.value.v[static_cast<std::size_t>(i)] = orig - eps;
      const double ym = eval(true);
      e.value.v[static_cast<std::size_t>(i)] = orig;
      const double num = (yp - ym) / (2.0 * eps);
      const double ana = analytic[name].v[static_cast<std::size_t>(i)];
      const double rel = std::abs(ana - num) / std::max(1e-8, std::abs(ana) + std::abs(num));
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.analytic_at_max = ana;
        entry.numeric_at_max = num;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace musle::ad
