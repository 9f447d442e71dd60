#pragma once

// Verification harnesses behind the gradcheck and sketchbench CLI modes:
// an end-to-end finite-difference check of the batch loss gradients, and
// quality benchmarks for the tensor-sketch approximation.

#include <chrono>

#include "musle/pipeline.hpp"
#include "musle/sketch.hpp"

namespace musle {

// Random video with the given geometry (plain noise, no planted structure).
inline VideoRecord random_video(const DatasetMeta& meta, int label, const std::string& id,
                                std::uint64_t seed) {
  Rng rng(seed);
  VideoRecord rec;
  rec.video_id = id;
  rec.label = label;
  rec.clips.resize(static_cast<std::size_t>(meta.L));
  for (int l = 0; l < meta.L; ++l) {
    for (int m = 0; m < meta.M; ++m) {
      Tubelet t;
      t.clip_index = l;
      t.score = rng.uniform(0.1, 1.0);
      for (int f = 0; f < meta.T; ++f) {
        Box b;
        b.cx = rng.uniform(0.05, 0.95);
        b.cy = rng.uniform(0.05, 0.95);
        b.w = rng.uniform(0.05, 0.3);
        b.h = rng.uniform(0.05, 0.3);
        t.boxes.push_back(b);
      }
      t.visual.resize(static_cast<std::size_t>(meta.D_vis));
      for (auto& x : t.visual) x = rng.normal(0.0, 0.5);
      rec.clips[static_cast<std::size_t>(l)].push_back(std::move(t));
    }
  }
  return rec;
}

struct GradCheckOutcome {
  ad::GradCheckReport report;
  double seconds = 0.0;
  int n_params = 0;
};

// End-to-end gradient check: two classes, scale-3 sub-graph vectors built
// from random videos, full batch loss per class. Checks every parameter
// (phi transform, coordinate net, edge net, both membership nets).
inline GradCheckOutcome run_gradcheck(double tol = 1e-4, double eps = 1e-5,
                                      std::uint64_t seed = 20240817, std::ostream* log = nullptr) {
  GraphConfig gcfg;
  gcfg.D_vis = 8;
  gcfg.T = 4;
  gcfg.d_phi = 8;
  gcfg.d_coord = 4;
  gcfg.d_edge_c = 4;
  gcfg.coord_hidden = 8;
  gcfg.edge_hidden = 8;

  const DatasetMeta meta{2, 2, gcfg.T, 4, gcfg.D_vis};  // L=2, M=4 -> 8 nodes
  const int scale = 3;
  const int K = 3;
  const int N = 8;
  const int dx = subgraph_dim(gcfg, scale);

  ad::ParamStore store;
  init_graph_params(store, gcfg, seed);
  std::vector<MembershipNetRef> nets;
  for (int c = 0; c < 2; ++c) {
    nets.push_back(make_membership_net(store, c, scale, dx, 8, K, seed));
  }

  std::vector<VideoRecord> videos;
  for (int c = 0; c < 2; ++c) {
    videos.push_back(random_video(meta, c, "gc_v" + std::to_string(c), seed_combine(seed, 77, c)));
  }
  std::vector<std::vector<SubGraphIndex>> subs(2);
  for (int c = 0; c < 2; ++c) {
    subs[static_cast<std::size_t>(c)] = select_subgraphs(meta.L * meta.M, scale, N,
                                                         seed_combine(seed, 99, c));
    while (static_cast<int>(subs[static_cast<std::size_t>(c)].size()) > N) {
      subs[static_cast<std::size_t>(c)].pop_back();
    }
  }
  const MixtureParams ema = MixtureParams::init(K, dx);

  auto f = [&](ad::Tape& tape) -> ad::Val {
    ad::Val total = tape.scalar(0.0);
    for (int c = 0; c < 2; ++c) {
      const auto& sc = subs[static_cast<std::size_t>(c)];
      const auto feats = build_graph_features_on_tape(tape, store, videos[static_cast<std::size_t>(c)],
                                                      gcfg, edge_pairs_of(sc));
      std::vector<std::vector<ad::Tape::Segment>> rows;
      for (const auto& idx : sc) rows.push_back(subgraph_row_segments(feats, idx, gcfg));
      const ad::Val X = tape.assemble(rows, dx);
      const auto res = batch_loss_on_tape(tape, store, nets[static_cast<std::size_t>(c)], X, ema,
                                          0.05, 1e-6);
      total = tape.add(total, res.loss);
    }
    return total;
  };

  GradCheckOutcome out;
  const auto t0 = std::chrono::steady_clock::now();
  out.report = ad::grad_check(f, store, eps, tol);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& [name, e] : store.all()) out.n_params += e.value.size();

  if (log) {
    for (const auto& entry : out.report.entries) {
      *log << "  " << entry.param << "  max_rel_err " << entry.max_rel_err << "\n";
    }
    *log << "gradcheck: " << out.n_params << " parameters, max_rel_err " << out.report.max_rel_err
         << (out.report.kink_proximity ? " (kink proximity flagged)" : "") << ", "
         << (out.report.pass ? "PASS" : "FAIL") << " at tol " << tol << " (" << out.seconds
         << " s)\n";
  }
  return out;
}

struct SketchBenchOutcome {
  std::vector<int> sketch_dims;
  std::vector<double> rel_rmse;     // parallel to sketch_dims
  bool rmse_decreasing = false;
  double unbias_target = 0.0;       // <x, y>^2
  double unbias_mean = 0.0;
  double unbias_stderr = 0.0;
  bool unbias_pass = false;         // |mean - target| <= 3 * stderr
  double seconds = 0.0;
};

inline SketchBenchOutcome run_sketchbench(int n_pairs = 200, int n_seeds = 1000,
                                          std::uint64_t seed = 424242,
                                          std::ostream* log = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  SketchBenchOutcome out;
  out.sketch_dims = {64, 256, 1024};

  const int w = 3, h = 3, d = 64;
  auto random_grid = [&](Rng& rng) {
    FeatureGrid g = FeatureGrid::zeros(w, h, d);
    for (auto& x : g.values) x = rng.normal(0.0, 1.0);
    return g;
  };

  for (int ds : out.sketch_dims) {
    double num = 0.0, den = 0.0;
    for (int p = 0; p < n_pairs; ++p) {
      Rng rng(seed_combine(seed, 0x9A135ULL, static_cast<std::uint64_t>(p)));
      const FeatureGrid a = random_grid(rng);
      const FeatureGrid b = random_grid(rng);
      const SketchParams sp = SketchParams::make(d, ds, seed_combine(seed, 0x51D3ULL,
                                                                     static_cast<std::uint64_t>(p)));
      const double exact = bilinear_exact(a, b);
      const double approx = bilinear_approx(a, b, sp).value;
      num += (approx - exact) * (approx - exact);
      den += exact * exact;
    }
    out.rel_rmse.push_back(std::sqrt(num / den));
  }
  out.rmse_decreasing = out.rel_rmse[0] > out.rel_rmse[1] && out.rel_rmse[1] > out.rel_rmse[2];

  // Unbiasedness: E over sketch draws of <Phi(x), Phi(y)> equals <x, y>^2.
  {
    Rng rng(seed_combine(seed, 0x0B1A5ULL));
    std::vector<double> x(d), y(d);
    for (auto& v : x) v = rng.normal(0.0, 1.0);
    for (auto& v : y) v = rng.normal(0.0, 1.0);
    double dot = 0.0;
    for (int i = 0; i < d; ++i) dot += x[static_cast<std::size_t>(i)] * y[static_cast<std::size_t>(i)];
    out.unbias_target = dot * dot;

    double sum = 0.0, sum2 = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
      const SketchParams sp = SketchParams::make(d, 64, seed_combine(seed, 0xF00DULL,
                                                                     static_cast<std::uint64_t>(s)));
      const auto px = tensor_sketch(x, sp);
      const auto py = tensor_sketch(y, sp);
      double ip = 0.0;
      for (int i = 0; i < 64; ++i) ip += px[static_cast<std::size_t>(i)] * py[static_cast<std::size_t>(i)];
      sum += ip;
      sum2 += ip * ip;
    }
    out.unbias_mean = sum / n_seeds;
    const double var = std::max(0.0, sum2 / n_seeds - out.unbias_mean * out.unbias_mean);
    out.unbias_stderr = std::sqrt(var / n_seeds);
    out.unbias_pass = std::abs(out.unbias_mean - out.unbias_target) <= 3.0 * out.unbias_stderr;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (log) {
    for (std::size_t i = 0; i < out.sketch_dims.size(); ++i) {
      *log << "  d_sketch " << out.sketch_dims[i] << "  rel_rmse " << out.rel_rmse[i] << "\n";
    }
    *log << "  rmse strictly decreasing: " << (out.rmse_decreasing ? "yes" : "NO") << "\n";
    *log << "  unbiasedness: mean " << out.unbias_mean << " target " << out.unbias_target
         << " stderr " << out.unbias_stderr << " -> " << (out.unbias_pass ? "PASS" : "FAIL")
         << "\n";
    *log << "sketchbench finished in " << out.seconds << " s\n";
  }
  return out;
}

}  // namespace musle
