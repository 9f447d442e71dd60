#include <catch2/catch_amalgamated.hpp>

#include "test_helpers.hpp"

using namespace musle;

TEST_CASE("small populations are enumerated exhaustively in lexicographic order") {
  const auto subs = select_subgraphs(6, 3, 1000000, 1);
  REQUIRE(subs.size() == 20);  // C(6,3)
  for (std::size_t i = 1; i < subs.size(); ++i) REQUIRE(subs[i - 1] < subs[i]);
  REQUIRE(subs.front().ids[0] == 0);
  REQUIRE(subs.front().ids[1] == 1);
  REQUIRE(subs.front().ids[2] == 2);
  REQUIRE(subs.back().ids[0] == 3);
  REQUIRE(subs.back().ids[1] == 4);
  REQUIRE(subs.back().ids[2] == 5);
}

TEST_CASE("sampling returns exactly budget distinct tuples, reproducibly") {
  const auto a = select_subgraphs(32, 5, 1000, 7);
  REQUIRE(a.size() == 1000);
  std::set<SubGraphIndex> uniq(a.begin(), a.end());
  REQUIRE(uniq.size() == 1000);
  for (const auto& idx : a) {
    for (int i = 0; i < idx.scale; ++i) {
      REQUIRE(idx.ids[static_cast<std::size_t>(i)] >= 0);
      REQUIRE(idx.ids[static_cast<std::size_t>(i)] < 32);
      if (i > 0) REQUIRE(idx.ids[static_cast<std::size_t>(i)] > idx.ids[static_cast<std::size_t>(i - 1)]);
    }
  }
  for (std::size_t i = 1; i < a.size(); ++i) REQUIRE(a[i - 1] < a[i]);

  const auto b = select_subgraphs(32, 5, 1000, 7);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);

  const auto c = select_subgraphs(32, 5, 1000, 8);
  bool all_same = true;
  for (std::size_t i = 0; i < a.size(); ++i) all_same = all_same && (a[i] == c[i]);
  REQUIRE_FALSE(all_same);
}

TEST_CASE("scale larger than the node count is rejected") {
  REQUIRE_THROWS_AS(select_subgraphs(3, 4, 10, 1), UsageError);
}

TEST_CASE("coverage: union over scales with an unbounded budget is every subset") {
  for (int s : {3, 4, 5}) {
    const auto subs = select_subgraphs(8, s, 1u << 30, 3);
    REQUIRE(subs.size() == binomial(8, static_cast<std::uint64_t>(s)));
  }
}

TEST_CASE("sampled combinations are uniform within chi-square tolerance") {
  // n=8, s=3 -> 56 combos; sample 20 without replacement per seed.
  const int combos = 56;
  const int budget = 20;
  const int trials = 2000;
  std::vector<int> counts(combos, 0);
  std::map<SubGraphIndex, int> rank;
  {
    const auto all = select_subgraphs(8, 3, 1u << 20, 0);
    for (std::size_t i = 0; i < all.size(); ++i) rank[all[i]] = static_cast<int>(i);
  }
  for (int t = 0; t < trials; ++t) {
    for (const auto& idx :
         select_subgraphs(8, 3, budget, seed_combine(11, static_cast<std::uint64_t>(t)))) {
      counts[static_cast<std::size_t>(rank.at(idx))]++;
    }
  }
  const double expected = static_cast<double>(trials) * budget / combos;
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 55 dof; 99.9th percentile is ~93.2, leave headroom for the fixed seed
  INFO("chi2 " << chi2);
  REQUIRE(chi2 < 100.0);
}

namespace {

struct TinyGraph {
  GraphConfig cfg;
  ad::ParamStore store;
  CompleteGraph g;
};

TinyGraph make_tiny_graph(std::uint64_t seed) {
  TinyGraph t;
  t.cfg.D_vis = 5;
  t.cfg.T = 3;
  t.cfg.d_phi = 4;
  t.cfg.d_coord = 3;
  t.cfg.d_edge_c = 4;
  t.cfg.coord_hidden = 6;
  t.cfg.edge_hidden = 6;
  init_graph_params(t.store, t.cfg, seed);
  const DatasetMeta meta{2, 2, t.cfg.T, 3, t.cfg.D_vis};
  const VideoRecord video = random_video(meta, 0, "v", seed_combine(seed, 1));
  t.g = build_graph(video, t.store, t.cfg);
  return t;
}

}  // namespace

TEST_CASE("vectorize length follows s*d_node + C(s,2)*d_edge") {
  GraphConfig cfg;
  cfg.D_vis = 64;
  cfg.d_coord = 32;
  cfg.d_edge_c = 32;
  REQUIRE(subgraph_dim(cfg, 4) == 4 * 96 + 6 * 33);  // 582
  REQUIRE(subgraph_dim(cfg, 3) == 3 * 96 + 3 * 33);
  REQUIRE(subgraph_dim(cfg, 5) == 5 * 96 + 10 * 33);
}

TEST_CASE("vectorize matches an independent naive serializer") {
  TinyGraph t = make_tiny_graph(31);
  const auto subs = select_subgraphs(t.g.n, 3, 1u << 20, 5);
  for (const auto& idx : subs) {
    const SubGraphVector v = vectorize(t.g, idx);
    REQUIRE(static_cast<int>(v.x.size()) == subgraph_dim(t.cfg, idx.scale));

    // independent reassembly: walk nodes then pairs, copying field by field
    std::vector<double> oracle;
    for (int a = 0; a < idx.scale; ++a) {
      const auto& nf = t.g.nodes[static_cast<std::size_t>(idx.ids[static_cast<std::size_t>(a)])];
      for (double x : nf.visual) oracle.push_back(x);
      for (double x : nf.coord) oracle.push_back(x);
    }
    for (int a = 0; a < idx.scale; ++a) {
      for (int b = a + 1; b < idx.scale; ++b) {
        const EdgeFeature ef =
            t.g.edge(idx.ids[static_cast<std::size_t>(a)], idx.ids[static_cast<std::size_t>(b)]);
        oracle.push_back(ef.sem);
        for (double x : ef.coord_rel) oracle.push_back(x);
      }
    }
    REQUIRE(v.x == oracle);

    std::vector<double> buf(v.x.size());
    vectorize_into(t.g, idx, buf.data());
    REQUIRE(buf == v.x);
  }
}

TEST_CASE("zero node features reduce the vector to sem and edge constants") {
  TinyGraph t = make_tiny_graph(77);
  for (const char* name : {graph_param::coord_w1, graph_param::coord_b1, graph_param::coord_w2,
                           graph_param::coord_b2}) {
    auto& v = t.store.value(name);
    std::fill(v.v.begin(), v.v.end(), 0.0);
  }
  const DatasetMeta meta{2, 2, t.cfg.T, 3, t.cfg.D_vis};
  VideoRecord video = random_video(meta, 0, "v", 123);
  for (auto& clip : video.clips) {
    for (auto& tube : clip) std::fill(tube.visual.begin(), tube.visual.end(), 0.0);
  }
  const CompleteGraph g = build_graph(video, t.store, t.cfg);

  // phi(0) = b, so every sem value equals b . b
  const auto& b = t.store.value(graph_param::phi_b);
  double bb = 0.0;
  for (double x : b.v) bb += x * x;

  SubGraphIndex idx;
  idx.scale = 3;
  idx.ids = {0, 1, 2};
  const SubGraphVector v = vectorize(g, idx);
  const int dn = t.cfg.d_node();
  for (int a = 0; a < 3; ++a) {
    for (int i = 0; i < t.cfg.D_vis; ++i) REQUIRE(v.x[static_cast<std::size_t>(a * dn + i)] == 0.0);
    for (int i = 0; i < t.cfg.d_coord; ++i) {
      REQUIRE(v.x[static_cast<std::size_t>(a * dn + t.cfg.D_vis + i)] == 0.0);
    }
  }
  for (int e = 0; e < 3; ++e) {
    REQUIRE(v.x[static_cast<std::size_t>(3 * dn + e * t.cfg.d_edge())] ==
            Catch::Approx(bb).margin(1e-12));
  }
}

TEST_CASE("vectorize rejects malformed indices") {
  TinyGraph t = make_tiny_graph(13);
  SubGraphIndex idx;
  idx.scale = 3;
  idx.ids = {0, 0, 2};
  REQUIRE_THROWS_AS(vectorize(t.g, idx), NumericError);
  idx.ids = {0, 2, 99};
  REQUIRE_THROWS_AS(vectorize(t.g, idx), NumericError);
}
