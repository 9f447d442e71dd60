#pragma once

// Synthetic dataset generator. Each video of class c carries one planted
// motif: motif_size tubelets whose visual features sit near fixed per-class
// archetypes and whose box trajectories follow a per-class relative-motion
// template. All remaining slots are filled with distractors drawn from a
// background pool shared across classes, so class signal lives only in the
// motifs. Generation is a pure function of the config.

#include <algorithm>
#include <map>
#include <utility>

#include "musle/dataset.hpp"

namespace musle {

struct GeneratorConfig {
  int num_classes = 5;
  int train_per_class = 100;
  int test_per_class = 20;
  int L = 4;
  int T = 16;
  int M = 8;
  int D_vis = 64;
  int distractor_pool_size = 24;
  int variants_per_class = 1;           // >1 plants alternative motif variants
  std::vector<int> motif_sizes = {3, 4, 5};  // cycled over classes
  double feature_noise_sigma = 0.05;
  double coord_noise_sigma = 0.01;
  double bg_feature_sigma = 0.25;       // spread of the shared background pool
  double archetype_radius = 0.45;       // per-dim scale of archetype offsets
  // When true, a class whose motif is one node larger than its predecessor
  // reuses the predecessor's archetypes and adds one background-looking
  // member whose only signature is its relative motion toward the motif.
  bool couple_extensions = false;
  std::uint64_t seed = 1;
};

struct MotifAnnotations {
  // video_id -> motif positions as (clip_index, slot_index)
  std::map<std::string, std::vector<std::pair<int, int>>> slots;
};

struct SynthOutput {
  Dataset train;
  Dataset test;
  MotifAnnotations truth;
};

namespace synth_detail {

struct Trajectory {
  double cx0 = 0.5, cy0 = 0.5;  // start center
  double dx = 0.0, dy = 0.0;    // total displacement over the clip
  double w = 0.1, h = 0.1;
};

struct MotifVariant {
  std::vector<std::vector<double>> archetypes;  // motif_size x D_vis
  std::vector<Trajectory> trajectories;         // motif_size
};

struct ClassSpec {
  int motif_size = 3;
  std::vector<MotifVariant> variants;
};

inline double clamp01(double x, double lo = 0.02, double hi = 0.98) {
  return std::min(hi, std::max(lo, x));
}

inline std::vector<Box> render_boxes(const Trajectory& tr, int T, double jitter, Rng& rng) {
  std::vector<Box> boxes(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const double a = (T > 1) ? static_cast<double>(t) / (T - 1) : 0.0;
    Box b;
    b.cx = clamp01(tr.cx0 + tr.dx * a + jitter * rng.normal());
    b.cy = clamp01(tr.cy0 + tr.dy * a + jitter * rng.normal());
    b.w = std::min(0.35, std::max(0.03, tr.w + 0.2 * jitter * rng.normal()));
    b.h = std::min(0.35, std::max(0.03, tr.h + 0.2 * jitter * rng.normal()));
    boxes[static_cast<std::size_t>(t)] = b;
  }
  return boxes;
}

// Motif anchors march from the top-left corner outward so that the motif's
// internal canonical order is stable across videos. Motion templates cycle
// per class: parallel drift, convergence onto member 0, static, divergence.
inline std::vector<Trajectory> make_motif_trajectories(int motif_size, int class_id, int variant,
                                                       Rng& rng) {
  std::vector<Trajectory> trs(static_cast<std::size_t>(motif_size));
  const int pattern = (class_id + variant) % 4;
  for (int i = 0; i < motif_size; ++i) {
    Trajectory tr;
    tr.cx0 = 0.06 + 0.11 * i + 0.02 * rng.uniform();
    tr.cy0 = 0.05 + 0.07 * i + 0.02 * rng.uniform();
    tr.w = 0.06 + 0.04 * rng.uniform();
    tr.h = 0.06 + 0.04 * rng.uniform();
    trs[static_cast<std::size_t>(i)] = tr;
  }
  for (int i = 0; i < motif_size; ++i) {
    auto& tr = trs[static_cast<std::size_t>(i)];
    switch (pattern) {
      case 0:  // parallel drift
        tr.dx = 0.18;
        tr.dy = 0.12;
        break;
      case 1:  // converge toward member 0
        if (i == 0) {
          tr.dx = tr.dy = 0.0;
        } else {
          tr.dx = (trs[0].cx0 - tr.cx0) * 0.7;
          tr.dy = (trs[0].cy0 - tr.cy0) * 0.7;
        }
        break;
      case 2:  // static
        tr.dx = tr.dy = 0.0;
        break;
      default:  // diverge from member 0
        if (i == 0) {
          tr.dx = tr.dy = 0.0;
        } else {
          tr.dx = (tr.cx0 - trs[0].cx0) * 0.9;
          tr.dy = (tr.cy0 - trs[0].cy0) * 0.9;
        }
        break;
    }
  }
  return trs;
}

inline std::vector<ClassSpec> make_class_specs(const GeneratorConfig& cfg,
                                               const std::vector<std::vector<double>>& pool,
                                               Rng& rng) {
  std::vector<ClassSpec> specs(static_cast<std::size_t>(cfg.num_classes));
  for (int c = 0; c < cfg.num_classes; ++c) {
    ClassSpec spec;
    spec.motif_size = cfg.motif_sizes[static_cast<std::size_t>(c) % cfg.motif_sizes.size()];
    const ClassSpec* base = nullptr;
    if (cfg.couple_extensions && c > 0) {
      const ClassSpec& prev = specs[static_cast<std::size_t>(c - 1)];
      if (prev.motif_size + 1 == spec.motif_size) base = &prev;
    }
    for (int v = 0; v < cfg.variants_per_class; ++v) {
      MotifVariant var;
      var.trajectories = make_motif_trajectories(spec.motif_size, c, v, rng);
      if (base != nullptr && v < static_cast<int>(base->variants.size())) {
        // Extension class: inherit the base archetypes and trajectories,
        // append one member that looks like background but moves with the
        // motif (signal carried by relative-coordinate edges).
        const MotifVariant& bv = base->variants[static_cast<std::size_t>(v)];
        var.archetypes = bv.archetypes;
        var.trajectories = bv.trajectories;
        std::vector<double> extra(static_cast<std::size_t>(cfg.D_vis));
        const std::size_t pick = static_cast<std::size_t>(rng.below(pool.size()));
        for (int d = 0; d < cfg.D_vis; ++d) extra[static_cast<std::size_t>(d)] = pool[pick][static_cast<std::size_t>(d)];
        var.archetypes.push_back(std::move(extra));
        Trajectory tr;
        tr.cx0 = 0.06 + 0.11 * (spec.motif_size - 1);
        tr.cy0 = 0.05 + 0.07 * (spec.motif_size - 1);
        tr.w = 0.08;
        tr.h = 0.08;
        tr.dx = (var.trajectories[0].cx0 - tr.cx0) * 0.7;
        tr.dy = (var.trajectories[0].cy0 - tr.cy0) * 0.7;
        var.trajectories.push_back(tr);
      } else {
        var.archetypes.resize(static_cast<std::size_t>(spec.motif_size));
        for (int i = 0; i < spec.motif_size; ++i) {
          auto& a = var.archetypes[static_cast<std::size_t>(i)];
          a.resize(static_cast<std::size_t>(cfg.D_vis));
          for (int d = 0; d < cfg.D_vis; ++d) a[static_cast<std::size_t>(d)] = cfg.archetype_radius * rng.normal();
        }
      }
      spec.variants.push_back(std::move(var));
    }
    specs[static_cast<std::size_t>(c)] = std::move(spec);
  }
  return specs;
}

inline void check_separability(const std::vector<ClassSpec>& specs, double noise_sigma) {
  for (std::size_t c = 0; c < specs.size(); ++c) {
    for (const auto& var : specs[c].variants) {
      for (std::size_t i = 0; i < var.archetypes.size(); ++i) {
        for (std::size_t j = i + 1; j < var.archetypes.size(); ++j) {
          double d2 = 0.0;
          for (std::size_t k = 0; k < var.archetypes[i].size(); ++k) {
            const double d = var.archetypes[i][k] - var.archetypes[j][k];
            d2 += d * d;
          }
          if (std::sqrt(d2) <= 4.0 * noise_sigma) {
            throw DataError("synthgen: archetypes " + std::to_string(i) + "," + std::to_string(j) +
                            " of class " + std::to_string(c) + " are inseparable");
          }
        }
      }
    }
  }
}

}  // namespace synth_detail

inline void validate_generator_config(const GeneratorConfig& cfg) {
  if (cfg.num_classes <= 0) throw DataError("synthgen: num_classes must be positive");
  if (cfg.L <= 0 || cfg.T <= 0 || cfg.M <= 0 || cfg.D_vis <= 0) {
    throw DataError("synthgen: L, T, M, D_vis must be positive");
  }
  if (cfg.motif_sizes.empty()) throw DataError("synthgen: motif_sizes must be non-empty");
  for (int s : cfg.motif_sizes) {
    if (s < 3 || s > 5) throw DataError("synthgen: motif sizes must be in {3,4,5}");
    if (s > cfg.M) {
      throw DataError("synthgen: motif size " + std::to_string(s) + " exceeds tubelets per clip M=" +
                      std::to_string(cfg.M));
    }
  }
  if (cfg.feature_noise_sigma < 0 || cfg.coord_noise_sigma < 0) {
    throw DataError("synthgen: noise sigmas must be nonnegative");
  }
  if (cfg.distractor_pool_size <= 0) throw DataError("synthgen: distractor_pool_size must be positive");
  if (cfg.variants_per_class <= 0) throw DataError("synthgen: variants_per_class must be positive");
}

inline SynthOutput generate(const GeneratorConfig& cfg) {
  using namespace synth_detail;
  validate_generator_config(cfg);

  Rng pool_rng(seed_combine(cfg.seed, 0xB00DULL));
  std::vector<std::vector<double>> pool(static_cast<std::size_t>(cfg.distractor_pool_size));
  for (auto& p : pool) {
    p.resize(static_cast<std::size_t>(cfg.D_vis));
    for (auto& x : p) x = cfg.bg_feature_sigma * pool_rng.normal();
  }

  Rng class_rng(seed_combine(cfg.seed, 0xC1A55ULL));
  const auto specs = make_class_specs(cfg, pool, class_rng);
  check_separability(specs, cfg.feature_noise_sigma);

  SynthOutput out;
  out.train.meta = out.test.meta = DatasetMeta{cfg.num_classes, cfg.L, cfg.T, cfg.M, cfg.D_vis};

  auto make_video = [&](int class_id, const std::string& video_id, std::uint64_t vseed) {
    Rng rng(vseed);
    const ClassSpec& spec = specs[static_cast<std::size_t>(class_id)];
    const MotifVariant& var =
        spec.variants[static_cast<std::size_t>(rng.below(spec.variants.size()))];
    const int m = spec.motif_size;

    VideoRecord rec;
    rec.video_id = video_id;
    rec.label = class_id;
    rec.clips.resize(static_cast<std::size_t>(cfg.L));

    const int motif_clip = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.L)));
    std::vector<std::pair<int, int>> motif_slots;

    for (int l = 0; l < cfg.L; ++l) {
      std::vector<Tubelet> clip;
      std::vector<bool> is_motif;
      const int n_motif = (l == motif_clip) ? m : 0;
      for (int i = 0; i < n_motif; ++i) {
        Tubelet tube;
        tube.clip_index = l;
        tube.score = rng.uniform(0.3, 1.0);
        tube.boxes = render_boxes(var.trajectories[static_cast<std::size_t>(i)], cfg.T,
                                  cfg.coord_noise_sigma, rng);
        tube.visual.resize(static_cast<std::size_t>(cfg.D_vis));
        for (int d = 0; d < cfg.D_vis; ++d) {
          tube.visual[static_cast<std::size_t>(d)] =
              var.archetypes[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)] +
              cfg.feature_noise_sigma * rng.normal();
        }
        clip.push_back(std::move(tube));
        is_motif.push_back(true);
      }
      for (int i = n_motif; i < cfg.M; ++i) {
        Tubelet tube;
        tube.clip_index = l;
        tube.score = rng.uniform(0.3, 1.0);
        Trajectory tr;
        tr.cx0 = rng.uniform(0.45, 0.92);
        tr.cy0 = rng.uniform(0.45, 0.92);
        tr.dx = rng.uniform(-0.06, 0.06);
        tr.dy = rng.uniform(-0.06, 0.06);
        tr.w = rng.uniform(0.05, 0.18);
        tr.h = rng.uniform(0.05, 0.18);
        tube.boxes = render_boxes(tr, cfg.T, cfg.coord_noise_sigma, rng);
        const std::size_t pick = static_cast<std::size_t>(rng.below(pool.size()));
        tube.visual.resize(static_cast<std::size_t>(cfg.D_vis));
        for (int d = 0; d < cfg.D_vis; ++d) {
          tube.visual[static_cast<std::size_t>(d)] =
              pool[pick][static_cast<std::size_t>(d)] + cfg.feature_noise_sigma * rng.normal();
        }
        clip.push_back(std::move(tube));
        is_motif.push_back(false);
      }

      // Storage keeps tubelets in descending detection-score order; the
      // canonical graph numbering is re-derived downstream.
      std::vector<std::size_t> order(clip.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (clip[a].score != clip[b].score) return clip[a].score > clip[b].score;
        return a < b;
      });
      std::vector<Tubelet> sorted;
      sorted.reserve(clip.size());
      for (std::size_t slot = 0; slot < order.size(); ++slot) {
        if (is_motif[order[slot]]) motif_slots.emplace_back(l, static_cast<int>(slot));
        sorted.push_back(std::move(clip[order[slot]]));
      }
      rec.clips[static_cast<std::size_t>(l)] = std::move(sorted);
    }

    out.truth.slots[video_id] = std::move(motif_slots);
    return rec;
  };

  for (int c = 0; c < cfg.num_classes; ++c) {
    for (int v = 0; v < cfg.train_per_class; ++v) {
      const std::string id = "train_c" + std::to_string(c) + "_v" + std::to_string(v);
      out.train.records.push_back(
          make_video(c, id, seed_combine(cfg.seed, 1, static_cast<std::uint64_t>(c) * 1000003ULL +
                                                          static_cast<std::uint64_t>(v))));
    }
  }
  for (int c = 0; c < cfg.num_classes; ++c) {
    for (int v = 0; v < cfg.test_per_class; ++v) {
      const std::string id = "test_c" + std::to_string(c) + "_v" + std::to_string(v);
      out.test.records.push_back(
          make_video(c, id, seed_combine(cfg.seed, 2, static_cast<std::uint64_t>(c) * 1000003ULL +
                                                          static_cast<std::uint64_t>(v))));
    }
  }
  return out;
}

inline void save_truth(const MotifAnnotations& truth, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_truth: cannot open '" + path + "'");
  for (const auto& [vid, slots] : truth.slots) {
    nlohmann::json jslots = nlohmann::json::array();
    for (const auto& [c, s] : slots) jslots.push_back(nlohmann::json::array({c, s}));
    out << nlohmann::json{{"video_id", vid}, {"slots", std::move(jslots)}}.dump() << '\n';
  }
}

inline MotifAnnotations load_truth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_truth: cannot open '" + path + "'");
  MotifAnnotations truth;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    std::vector<std::pair<int, int>> slots;
    for (const auto& js : j.at("slots")) slots.emplace_back(js[0].get<int>(), js[1].get<int>());
    truth.slots[j.at("video_id").get<std::string>()] = std::move(slots);
  }
  return truth;
}

}  // namespace musle
