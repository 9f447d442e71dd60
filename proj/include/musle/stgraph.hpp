#pragma once

// Spatio-temporal complete graph: canonical node numbering, node features
// (visual + coordinate MLP), and edge features (semantic similarity +
// relative-coordinate MLP). The numeric path here and the tape path used in
// training share the same accumulation order, so forward values agree
// bitwise against a frozen parameter snapshot.

#include <algorithm>
#include <map>

#include "musle/autodiff.hpp"
#include "musle/dataset.hpp"

namespace musle {

struct GraphConfig {
  int D_vis = 64;
  int T = 16;
  int d_phi = 64;
  int d_coord = 32;
  int d_edge_c = 32;
  int coord_hidden = 64;
  int edge_hidden = 64;

  int coord_raw_dim() const { return 4 * T; }
  int d_node() const { return D_vis + d_coord; }
  int d_edge() const { return 1 + d_edge_c; }
};

// Parameter names; one shared set of graph nets for all classes.
namespace graph_param {
inline const char* phi_w = "graph/phi/W";
inline const char* phi_b = "graph/phi/b";
inline const char* coord_w1 = "graph/coord/W1";
inline const char* coord_b1 = "graph/coord/b1";
inline const char* coord_w2 = "graph/coord/W2";
inline const char* coord_b2 = "graph/coord/b2";
inline const char* edge_w1 = "graph/edge/W1";
inline const char* edge_b1 = "graph/edge/b1";
inline const char* edge_w2 = "graph/edge/W2";
inline const char* edge_b2 = "graph/edge/b2";

inline std::vector<std::string> names() {
  return {phi_w, phi_b, coord_w1, coord_b1, coord_w2, coord_b2, edge_w1, edge_b1, edge_w2, edge_b2};
}
}  // namespace graph_param

inline void init_graph_params(ad::ParamStore& store, const GraphConfig& cfg, std::uint64_t seed) {
  auto make = [&](const char* name, int rows, int cols) {
    Rng rng(seed_combine(seed, hash_str(name)));
    store.create(name, ad::uniform_init(rows, cols, rng));
  };
  auto zeros = [&](const char* name, int cols) { store.create(name, ad::Tensor(1, cols)); };
  make(graph_param::phi_w, cfg.d_phi, cfg.D_vis);
  zeros(graph_param::phi_b, cfg.d_phi);
  make(graph_param::coord_w1, cfg.coord_hidden, cfg.coord_raw_dim());
  zeros(graph_param::coord_b1, cfg.coord_hidden);
  make(graph_param::coord_w2, cfg.d_coord, cfg.coord_hidden);
  zeros(graph_param::coord_b2, cfg.d_coord);
  make(graph_param::edge_w1, cfg.edge_hidden, cfg.coord_raw_dim());
  zeros(graph_param::edge_b1, cfg.edge_hidden);
  make(graph_param::edge_w2, cfg.d_edge_c, cfg.edge_hidden);
  zeros(graph_param::edge_b2, cfg.d_edge_c);
}

namespace numeric {

// Same loop order as Tape::affine so the two paths agree bitwise.
inline void affine(const ad::Tensor& X, const ad::Tensor& W, const ad::Tensor& B, ad::Tensor& Y) {
  Y = ad::Tensor(X.rows, W.rows);
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
}

inline void relu(ad::Tensor& X) {
  for (double& v : X.v) {
    if (v <= 0.0) v = 0.0;
  }
}

inline ad::Tensor mlp2(const ad::Tensor& X, const ad::Tensor& W1, const ad::Tensor& B1,
                       const ad::Tensor& W2, const ad::Tensor& B2) {
  ad::Tensor H;
  affine(X, W1, B1, H);
  relu(H);
  ad::Tensor Y;
  affine(H, W2, B2, Y);
  return Y;
}

}  // namespace numeric

struct NodeRef {
  int clip = 0;
  int slot = 0;
};

// Canonical numbering: temporally earlier clips first; within a clip the
// spatially closer to the top left (first-frame cx+cy, then cx) comes
// first; detection score breaks remaining ties. Trailing comparisons make
// the order total on distinct tubelets, so the result does not depend on
// storage order.
inline std::vector<NodeRef> canonical_order(const VideoRecord& video) {
  std::vector<NodeRef> refs;
  for (int l = 0; l < static_cast<int>(video.clips.size()); ++l) {
    for (int m = 0; m < static_cast<int>(video.clips[static_cast<std::size_t>(l)].size()); ++m) {
      refs.push_back({l, m});
    }
  }
  auto tub = [&](const NodeRef& r) -> const Tubelet& {
    return video.clips[static_cast<std::size_t>(r.clip)][static_cast<std::size_t>(r.slot)];
  };
  std::sort(refs.begin(), refs.end(), [&](const NodeRef& a, const NodeRef& b) {
    if (a.clip != b.clip) return a.clip < b.clip;
    const Tubelet& ta = tub(a);
    const Tubelet& tb = tub(b);
    const Box& ba = ta.boxes.front();
    const Box& bb = tb.boxes.front();
    const double sa = ba.cx + ba.cy;
    const double sb = bb.cx + bb.cy;
    if (sa != sb) return sa < sb;
    if (ba.cx != bb.cx) return ba.cx < bb.cx;
    if (ta.score != tb.score) return ta.score > tb.score;
    if (ba.cy != bb.cy) return ba.cy < bb.cy;
    if (ba.w != bb.w) return ba.w < bb.w;
    if (ba.h != bb.h) return ba.h < bb.h;
    if (ta.visual != tb.visual) return ta.visual < tb.visual;
    return a.slot < b.slot;  // fully identical tubelets: keep storage order
  });
  return refs;
}

inline std::vector<double> coord_raw_of(const Tubelet& t) {
  std::vector<double> raw;
  raw.reserve(t.boxes.size() * 4);
  for (const Box& b : t.boxes) {
    raw.push_back(b.cx);
    raw.push_back(b.cy);
    raw.push_back(b.w);
    raw.push_back(b.h);
  }
  return raw;
}

struct NodeFeature {
  std::vector<double> visual;     // D_vis
  std::vector<double> coord_raw;  // 4T
  std::vector<double> coord;      // d_coord
  std::vector<double> full;       // D_vis + d_coord
};

struct EdgeFeature {
  double sem = 0.0;
  std::vector<double> coord_rel;  // d_edge_c
};

struct CompleteGraph {
  int n = 0;
  GraphConfig cfg;
  std::vector<NodeRef> order;        // canonical index -> storage position
  std::vector<NodeFeature> nodes;    // canonical order
  std::vector<double> sem;           // one scalar per edge (i<j)
  std::vector<double> coord_rel;     // edge_count x d_edge_c, flat

  int edge_count() const { return n * (n - 1) / 2; }

  // Index of edge (i, j), i < j, in the flattened upper triangle.
  static int edge_index(int i, int j, int n) {
    return i * (2 * n - i - 1) / 2 + (j - i - 1);
  }

  EdgeFeature edge(int i, int j) const {
    const int e = edge_index(i, j, n);
    EdgeFeature f;
    f.sem = sem[static_cast<std::size_t>(e)];
    f.coord_rel.assign(coord_rel.begin() + static_cast<std::ptrdiff_t>(e) * cfg.d_edge_c,
                       coord_rel.begin() + static_cast<std::ptrdiff_t>(e + 1) * cfg.d_edge_c);
    return f;
  }
};

inline NodeFeature node_features(const Tubelet& t, const ad::ParamStore& store,
                                 const GraphConfig& cfg) {
  if (static_cast<int>(t.visual.size()) != cfg.D_vis) {
    throw NumericError("node_features: visual dimension mismatch");
  }
  if (static_cast<int>(t.boxes.size()) != cfg.T) {
    throw NumericError("node_features: box count mismatch");
  }
  NodeFeature f;
  f.visual = t.visual;
  f.coord_raw = coord_raw_of(t);
  ad::Tensor X(1, cfg.coord_raw_dim());
  X.v = f.coord_raw;
  const ad::Tensor Y =
      numeric::mlp2(X, store.value(graph_param::coord_w1), store.value(graph_param::coord_b1),
                    store.value(graph_param::coord_w2), store.value(graph_param::coord_b2));
  f.coord = Y.v;
  f.full = f.visual;
  f.full.insert(f.full.end(), f.coord.begin(), f.coord.end());
  return f;
}

// f_sem = phi(a)^T phi(b); symmetric in its arguments.
inline double semantic_similarity(const std::vector<double>& visual_a,
                                  const std::vector<double>& visual_b,
                                  const ad::ParamStore& store, const GraphConfig& cfg) {
  if (visual_a.size() != visual_b.size() ||
      static_cast<int>(visual_a.size()) != cfg.D_vis) {
    throw NumericError("semantic_similarity: dimension mismatch");
  }
  ad::Tensor X(2, cfg.D_vis);
  std::copy(visual_a.begin(), visual_a.end(), X.row(0));
  std::copy(visual_b.begin(), visual_b.end(), X.row(1));
  ad::Tensor P;
  numeric::affine(X, store.value(graph_param::phi_w), store.value(graph_param::phi_b), P);
  double acc = 0.0;
  for (int j = 0; j < P.cols; ++j) acc += P.at(0, j) * P.at(1, j);
  return acc;
}

// Edge coordinate feature from the anti-symmetric raw difference c_i - c_j.
inline std::vector<double> relative_coord_feature(const std::vector<double>& ci,
                                                  const std::vector<double>& cj,
                                                  const ad::ParamStore& store,
                                                  const GraphConfig& cfg) {
  if (ci.size() != cj.size() || static_cast<int>(ci.size()) != cfg.coord_raw_dim()) {
    throw NumericError("relative_coord_feature: dimension mismatch");
  }
  ad::Tensor D(1, cfg.coord_raw_dim());
  for (std::size_t i = 0; i < ci.size(); ++i) D.v[i] = ci[i] - cj[i];
  return numeric::mlp2(D, store.value(graph_param::edge_w1), store.value(graph_param::edge_b1),
                       store.value(graph_param::edge_w2), store.value(graph_param::edge_b2))
      .v;
}

inline CompleteGraph build_graph(const VideoRecord& video, const ad::ParamStore& store,
                                 const GraphConfig& cfg) {
  CompleteGraph g;
  g.cfg = cfg;
  g.order = canonical_order(video);
  g.n = static_cast<int>(g.order.size());

  ad::Tensor visual(g.n, cfg.D_vis);
  ad::Tensor raw(g.n, cfg.coord_raw_dim());
  g.nodes.resize(static_cast<std::size_t>(g.n));
  for (int i = 0; i < g.n; ++i) {
    const NodeRef& r = g.order[static_cast<std::size_t>(i)];
    const Tubelet& t = video.clips[static_cast<std::size_t>(r.clip)][static_cast<std::size_t>(r.slot)];
    if (static_cast<int>(t.visual.size()) != cfg.D_vis || static_cast<int>(t.boxes.size()) != cfg.T) {
      throw NumericError("build_graph: tubelet dimensions do not match config");
    }
    std::copy(t.visual.begin(), t.visual.end(), visual.row(i));
    const auto cr = coord_raw_of(t);
    std::copy(cr.begin(), cr.end(), raw.row(i));
    g.nodes[static_cast<std::size_t>(i)].visual = t.visual;
    g.nodes[static_cast<std::size_t>(i)].coord_raw = cr;
  }

  const ad::Tensor coord =
      numeric::mlp2(raw, store.value(graph_param::coord_w1), store.value(graph_param::coord_b1),
                    store.value(graph_param::coord_w2), store.value(graph_param::coord_b2));
  ad::Tensor phi;
  numeric::affine(visual, store.value(graph_param::phi_w), store.value(graph_param::phi_b), phi);

  for (int i = 0; i < g.n; ++i) {
    auto& nf = g.nodes[static_cast<std::size_t>(i)];
    nf.coord.assign(coord.row(i), coord.row(i) + cfg.d_coord);
    nf.full = nf.visual;
    nf.full.insert(nf.full.end(), nf.coord.begin(), nf.coord.end());
  }

  const int ec = g.edge_count();
  g.sem.resize(static_cast<std::size_t>(ec));
  g.coord_rel.resize(static_cast<std::size_t>(ec) * cfg.d_edge_c);
  if (ec == 0) return g;

  ad::Tensor diffs(ec, cfg.coord_raw_dim());
  int e = 0;
  for (int i = 0; i < g.n; ++i) {
    const double* pi = phi.row(i);
    const double* ri = raw.row(i);
    for (int j = i + 1; j < g.n; ++j) {
      const double* pj = phi.row(j);
      double acc = 0.0;
      for (int k = 0; k < cfg.d_phi; ++k) acc += pi[k] * pj[k];
      g.sem[static_cast<std::size_t>(e)] = acc;
      const double* rj = raw.row(j);
      double* de = diffs.row(e);
      for (int k = 0; k < cfg.coord_raw_dim(); ++k) de[k] = ri[k] - rj[k];
      ++e;
    }
  }
  const ad::Tensor edge_out =
      numeric::mlp2(diffs, store.value(graph_param::edge_w1), store.value(graph_param::edge_b1),
                    store.value(graph_param::edge_w2), store.value(graph_param::edge_b2));
  std::copy(edge_out.v.begin(), edge_out.v.end(), g.coord_rel.begin());
  return g;
}

// Tape-side graph features for one video: all node features plus edge
// features for exactly the requested canonical pairs. Used by training,
// where gradients must flow from the mixture loss back into the nets.
struct TapeGraphFeatures {
  int n = 0;
  ad::Val visual;     // [n x D_vis] constant
  ad::Val coord_out;  // [n x d_coord]
  ad::Val sem;        // [m x 1], one row per requested pair
  ad::Val edge_out;   // [m x d_edge_c]
  std::map<std::pair<int, int>, int> pair_row;
};

inline TapeGraphFeatures build_graph_features_on_tape(
    ad::Tape& tape, ad::ParamStore& store, const VideoRecord& video, const GraphConfig& cfg,
    const std::vector<std::pair<int, int>>& pairs) {
  TapeGraphFeatures out;
  const auto order = canonical_order(video);
  out.n = static_cast<int>(order.size());

  ad::Tensor visual(out.n, cfg.D_vis);
  ad::Tensor raw(out.n, cfg.coord_raw_dim());
  for (int i = 0; i < out.n; ++i) {
    const Tubelet& t = video.clips[static_cast<std::size_t>(order[static_cast<std::size_t>(i)].clip)]
                                  [static_cast<std::size_t>(order[static_cast<std::size_t>(i)].slot)];
    std::copy(t.visual.begin(), t.visual.end(), visual.row(i));
    const auto cr = coord_raw_of(t);
    std::copy(cr.begin(), cr.end(), raw.row(i));
  }

  out.visual = tape.constant(std::move(visual));
  const ad::Val raw_v = tape.constant(std::move(raw));

  const ad::Val h = tape.relu(tape.affine(raw_v, tape.param(store, graph_param::coord_w1),
                                          tape.param(store, graph_param::coord_b1)));
  out.coord_out = tape.affine(h, tape.param(store, graph_param::coord_w2),
                              tape.param(store, graph_param::coord_b2));

  const ad::Val phi = tape.affine(out.visual, tape.param(store, graph_param::phi_w),
                                  tape.param(store, graph_param::phi_b));

  for (std::size_t p = 0; p < pairs.size(); ++p) {
    out.pair_row[pairs[p]] = static_cast<int>(p);
  }
  out.sem = tape.pair_dot(phi, pairs);
  const ad::Val diffs = tape.pair_diff(raw_v, pairs);
  const ad::Val eh = tape.relu(tape.affine(diffs, tape.param(store, graph_param::edge_w1),
                                           tape.param(store, graph_param::edge_b1)));
  out.edge_out = tape.affine(eh, tape.param(store, graph_param::edge_w2),
                             tape.param(store, graph_param::edge_b2));
  return out;
}

}  // namespace musle
