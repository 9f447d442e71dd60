#pragma once

// Fixed-size node subsets of the complete graph plus their serialization
// into sample vectors. Ordering contract: node features in ascending
// canonical id, then edge features for the in-subset pairs (i, j), i < j,
// in lexicographic order; each edge contributes [sem, coord_rel].

#include <array>
#include <set>

#include "musle/stgraph.hpp"

namespace musle {

struct SubGraphIndex {
  static constexpr int kMaxScale = 8;

  int scale = 0;
  std::array<int, kMaxScale> ids{};  // first `scale` entries, strictly increasing

  bool operator==(const SubGraphIndex& o) const {
    if (scale != o.scale) return false;
    for (int i = 0; i < scale; ++i) {
      if (ids[static_cast<std::size_t>(i)] != o.ids[static_cast<std::size_t>(i)]) return false;
    }
    return true;
  }

  bool operator<(const SubGraphIndex& o) const {
    for (int i = 0; i < scale && i < o.scale; ++i) {
      if (ids[static_cast<std::size_t>(i)] != o.ids[static_cast<std::size_t>(i)]) {
        return ids[static_cast<std::size_t>(i)] < o.ids[static_cast<std::size_t>(i)];
      }
    }
    return scale < o.scale;
  }
};

struct SubGraphVector {
  SubGraphIndex index;
  std::vector<double> x;
};

inline int subgraph_dim(const GraphConfig& cfg, int s) {
  return s * cfg.d_node() + s * (s - 1) / 2 * cfg.d_edge();
}

namespace subgraph_detail {

// Lexicographic unranking via the combinatorial number system.
inline SubGraphIndex unrank(std::uint64_t rank, int n, int s) {
  SubGraphIndex idx;
  idx.scale = s;
  int v = 0;
  for (int p = 0; p < s; ++p) {
    while (true) {
      const std::uint64_t block = binomial(static_cast<std::uint64_t>(n - v - 1),
                                           static_cast<std::uint64_t>(s - p - 1));
      if (rank < block) break;
      rank -= block;
      ++v;
    }
    idx.ids[static_cast<std::size_t>(p)] = v;
    ++v;
  }
  return idx;
}

}  // namespace subgraph_detail

// All s-subsets when they fit in the budget, otherwise `budget` distinct
// subsets sampled uniformly without replacement (Floyd's algorithm over
// combination ranks). Output is always sorted lexicographically.
inline std::vector<SubGraphIndex> select_subgraphs(int n_nodes, int s, std::uint64_t budget,
                                                   std::uint64_t seed) {
  if (s < 1 || s > n_nodes) {
    throw UsageError("select_subgraphs: need 1 <= s <= n_nodes, got s=" + std::to_string(s) +
                     ", n=" + std::to_string(n_nodes));
  }
  if (s > SubGraphIndex::kMaxScale) {
    throw UsageError("select_subgraphs: scale > " + std::to_string(SubGraphIndex::kMaxScale) +
                     " not supported");
  }
  if (budget < 1) throw UsageError("select_subgraphs: budget must be >= 1");

  const std::uint64_t total = binomial(static_cast<std::uint64_t>(n_nodes),
                                       static_cast<std::uint64_t>(s));
  std::vector<SubGraphIndex> out;

  if (total <= budget) {
    out.reserve(total);
    SubGraphIndex idx;
    idx.scale = s;
    for (int i = 0; i < s; ++i) idx.ids[static_cast<std::size_t>(i)] = i;
    while (true) {
      out.push_back(idx);
      int p = s - 1;
      while (p >= 0 && idx.ids[static_cast<std::size_t>(p)] == n_nodes - s + p) --p;
      if (p < 0) break;
      ++idx.ids[static_cast<std::size_t>(p)];
      for (int q = p + 1; q < s; ++q) {
        idx.ids[static_cast<std::size_t>(q)] = idx.ids[static_cast<std::size_t>(q - 1)] + 1;
      }
    }
    return out;
  }

  Rng rng(seed);
  std::set<std::uint64_t> ranks;
  for (std::uint64_t j = total - budget; j < total; ++j) {
    const std::uint64_t t = rng.below(j + 1);
    if (!ranks.insert(t).second) ranks.insert(j);
  }
  out.reserve(ranks.size());
  for (std::uint64_t r : ranks) out.push_back(subgraph_detail::unrank(r, n_nodes, s));
  return out;  // ascending ranks == lexicographic order
}

inline SubGraphVector vectorize(const CompleteGraph& g, const SubGraphIndex& idx) {
  SubGraphVector v;
  v.index = idx;
  const int s = idx.scale;
  v.x.resize(static_cast<std::size_t>(subgraph_dim(g.cfg, s)));

  double* out = v.x.data();
  for (int a = 0; a < s; ++a) {
    const int id = idx.ids[static_cast<std::size_t>(a)];
    if (id < 0 || id >= g.n) throw NumericError("vectorize: node id out of range");
    if (a > 0 && id <= idx.ids[static_cast<std::size_t>(a - 1)]) {
      throw NumericError("vectorize: node ids must be strictly increasing");
    }
    const auto& full = g.nodes[static_cast<std::size_t>(id)].full;
    std::copy(full.begin(), full.end(), out);
    out += full.size();
  }
  for (int a = 0; a < s; ++a) {
    for (int b = a + 1; b < s; ++b) {
      const int e = CompleteGraph::edge_index(idx.ids[static_cast<std::size_t>(a)],
                                              idx.ids[static_cast<std::size_t>(b)], g.n);
      *out++ = g.sem[static_cast<std::size_t>(e)];
      const double* cr = g.coord_rel.data() + static_cast<std::ptrdiff_t>(e) * g.cfg.d_edge_c;
      std::copy(cr, cr + g.cfg.d_edge_c, out);
      out += g.cfg.d_edge_c;
    }
  }
  return v;
}

// Same layout, written into a caller-provided buffer (hot path in eval).
inline void vectorize_into(const CompleteGraph& g, const SubGraphIndex& idx, double* out) {
  const int s = idx.scale;
  for (int a = 0; a < s; ++a) {
    const auto& full = g.nodes[static_cast<std::size_t>(idx.ids[static_cast<std::size_t>(a)])].full;
    std::copy(full.begin(), full.end(), out);
    out += full.size();
  }
  for (int a = 0; a < s; ++a) {
    for (int b = a + 1; b < s; ++b) {
      const int e = CompleteGraph::edge_index(idx.ids[static_cast<std::size_t>(a)],
                                              idx.ids[static_cast<std::size_t>(b)], g.n);
      *out++ = g.sem[static_cast<std::size_t>(e)];
      const double* cr = g.coord_rel.data() + static_cast<std::ptrdiff_t>(e) * g.cfg.d_edge_c;
      std::copy(cr, cr + g.cfg.d_edge_c, out);
      out += g.cfg.d_edge_c;
    }
  }
}

// Pairs (i, j), i < j, needed to vectorize a set of sub-graphs.
inline std::vector<std::pair<int, int>> edge_pairs_of(const std::vector<SubGraphIndex>& subs) {
  std::set<std::pair<int, int>> pairs;
  for (const auto& idx : subs) {
    for (int a = 0; a < idx.scale; ++a) {
      for (int b = a + 1; b < idx.scale; ++b) {
        pairs.emplace(idx.ids[static_cast<std::size_t>(a)], idx.ids[static_cast<std::size_t>(b)]);
      }
    }
  }
  return {pairs.begin(), pairs.end()};
}

// Tape-side row layout matching vectorize(); gradients flow back through
// the assembled segments into the graph nets.
inline std::vector<ad::Tape::Segment> subgraph_row_segments(const TapeGraphFeatures& feats,
                                                            const SubGraphIndex& idx,
                                                            const GraphConfig& cfg) {
  std::vector<ad::Tape::Segment> segs;
  for (int a = 0; a < idx.scale; ++a) {
    const int id = idx.ids[static_cast<std::size_t>(a)];
    segs.push_back({feats.visual, id, 0, cfg.D_vis});
    segs.push_back({feats.coord_out, id, 0, cfg.d_coord});
  }
  for (int a = 0; a < idx.scale; ++a) {
    for (int b = a + 1; b < idx.scale; ++b) {
      const auto it = feats.pair_row.find({idx.ids[static_cast<std::size_t>(a)],
                                           idx.ids[static_cast<std::size_t>(b)]});
      if (it == feats.pair_row.end()) throw NumericError("subgraph_row_segments: missing pair");
      segs.push_back({feats.sem, it->second, 0, 1});
      segs.push_back({feats.edge_out, it->second, 0, cfg.d_edge_c});
    }
  }
  return segs;
}

}  // namespace musle
