#pragma once

// End-to-end orchestration: the round-robin per-cell training loop, the
// max-over-sub-graphs inference rule, dataset evaluation and prototype
// inspection.

#include <iomanip>
#include <iostream>

#include "musle/bank.hpp"

namespace musle {

// ---- training ----

namespace train_detail {

inline std::uint64_t pool_seed(std::uint64_t global_seed, const std::string& video_id, int scale) {
  return seed_combine(global_seed, hash_str(video_id), static_cast<std::uint64_t>(scale));
}

}  // namespace train_detail

// One optimization step draws a (class, scale) cell and batch_size sub-graph
// vectors from a few videos of that class, built on-tape so the loss
// gradient reaches the graph nets. Cells are visited steps_per_cell times
// per epoch in a seeded shuffled order; kernels are pruned at epoch end.
inline PrototypeBank train(const RunConfig& cfg, const Dataset& data, std::ostream* log = nullptr) {
  cfg.validate();
  const ValidationReport rep = validate(data);
  if (!rep.ok()) throw DataError("train: dataset invalid: " + rep.summary());
  if (data.meta.L != cfg.L || data.meta.T != cfg.T || data.meta.M != cfg.M ||
      data.meta.D_vis != cfg.D_vis) {
    throw DataError("train: dataset meta (L,T,M,D_vis) does not match config");
  }
  const int n_nodes = cfg.L * cfg.M;
  for (int s : cfg.scales) {
    if (s > n_nodes) throw DataError("train: scale exceeds graph size");
    if (cfg.full_covariance && subgraph_dim(cfg.graph_config(), s) > 16) {
      throw UsageError("train: full_covariance is limited to D_x <= 16 (scale " +
                       std::to_string(s) + " has D_x " +
                       std::to_string(subgraph_dim(cfg.graph_config(), s)) + ")");
    }
  }

  PrototypeBank bank = make_bank(cfg, data.meta.num_classes);
  const GraphConfig gcfg = cfg.graph_config();
  const ad::OptimizerConfig opt = cfg.optimizer();

  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(data.meta.num_classes));
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    by_class[static_cast<std::size_t>(data.records[i].label)].push_back(static_cast<int>(i));
  }

  struct CellRT {
    int class_id;
    int scale;
    BankCell* cell;
    double loss_sum = 0.0;
    int steps = 0;
  };
  std::vector<CellRT> cells;
  for (int c = 0; c < data.meta.num_classes; ++c) {
    if (by_class[static_cast<std::size_t>(c)].empty()) {
      if (log) *log << "train: class " << c << " has no videos; cells skipped\n";
      continue;
    }
    for (int s : cfg.scales) cells.push_back({c, s, &bank.cells.at({c, s})});
  }
  if (cells.empty()) throw DataError("train: no trainable cells (empty dataset?)");

  std::vector<std::string> step_params = graph_param::names();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = opt.lr_at(epoch);

    std::vector<int> schedule;
    schedule.reserve(cells.size() * static_cast<std::size_t>(cfg.steps_per_cell));
    for (std::size_t i = 0; i < cells.size(); ++i) {
      for (int r = 0; r < cfg.steps_per_cell; ++r) schedule.push_back(static_cast<int>(i));
    }
    Rng epoch_rng(seed_combine(cfg.seed, 0xE90CULL, static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(schedule);

    std::vector<std::vector<int>> order = by_class;
    std::vector<std::size_t> cursor(order.size(), 0);
    for (std::size_t c = 0; c < order.size(); ++c) {
      Rng r(seed_combine(cfg.seed, 0x0DE4ULL + c, static_cast<std::uint64_t>(epoch)));
      r.shuffle(order[c]);
    }

    for (auto& cell : cells) {
      cell.loss_sum = 0.0;
      cell.steps = 0;
    }

    int step_counter = 0;
    for (int cell_i : schedule) {
      CellRT& rt = cells[static_cast<std::size_t>(cell_i)];
      const auto& vids = order[static_cast<std::size_t>(rt.class_id)];
      const int nv = std::min<int>(cfg.videos_per_step, static_cast<int>(vids.size()));
      std::vector<int> chosen(static_cast<std::size_t>(nv));
      for (int v = 0; v < nv; ++v) {
        chosen[static_cast<std::size_t>(v)] =
            vids[cursor[static_cast<std::size_t>(rt.class_id)]++ % vids.size()];
      }

      Rng step_rng(seed_combine(cfg.seed, 0x57E9ULL,
                                (static_cast<std::uint64_t>(epoch) << 32) ^
                                    static_cast<std::uint64_t>(step_counter)));

      // Per-video pools (spec'd seed scheme); batch indices drawn from them.
      std::vector<std::vector<SubGraphIndex>> pools(static_cast<std::size_t>(nv));
      for (int v = 0; v < nv; ++v) {
        const auto& rec = data.records[static_cast<std::size_t>(chosen[static_cast<std::size_t>(v)])];
        pools[static_cast<std::size_t>(v)] = select_subgraphs(
            n_nodes, rt.scale, static_cast<std::uint64_t>(cfg.subgraph_budget),
            train_detail::pool_seed(cfg.seed, rec.video_id, rt.scale));
      }

      std::vector<std::vector<SubGraphIndex>> picked(static_cast<std::size_t>(nv));
      for (int b = 0; b < cfg.batch_size; ++b) {
        const int v = b % nv;
        const auto& pool = pools[static_cast<std::size_t>(v)];
        picked[static_cast<std::size_t>(v)].push_back(
            pool[static_cast<std::size_t>(step_rng.below(pool.size()))]);
      }

      ad::Tape tape;
      std::vector<std::vector<ad::Tape::Segment>> rows;
      rows.reserve(static_cast<std::size_t>(cfg.batch_size));
      std::vector<TapeGraphFeatures> feats(static_cast<std::size_t>(nv));
      for (int v = 0; v < nv; ++v) {
        const auto& rec = data.records[static_cast<std::size_t>(chosen[static_cast<std::size_t>(v)])];
        feats[static_cast<std::size_t>(v)] = build_graph_features_on_tape(
            tape, bank.params, rec, gcfg, edge_pairs_of(picked[static_cast<std::size_t>(v)]));
      }
      std::vector<std::size_t> taken(static_cast<std::size_t>(nv), 0);
      for (int b = 0; b < cfg.batch_size; ++b) {
        const int v = b % nv;
        const SubGraphIndex& idx = picked[static_cast<std::size_t>(v)][taken[static_cast<std::size_t>(v)]++];
        rows.push_back(subgraph_row_segments(feats[static_cast<std::size_t>(v)], idx, gcfg));
      }
      const ad::Val X = tape.assemble(rows, subgraph_dim(gcfg, rt.scale));

      BatchLossResult res = batch_loss_on_tape(tape, bank.params, rt.cell->net, X, rt.cell->ema,
                                               cfg.lambda, cfg.var_floor);
      const double loss = tape.value(res.loss).v[0];
      if (!std::isfinite(loss)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " cell c" +
                           std::to_string(rt.class_id) + "/s" + std::to_string(rt.scale));
      }
      tape.backward(res.loss);

      step_params.resize(graph_param::names().size());
      step_params.push_back(rt.cell->net.w1);
      step_params.push_back(rt.cell->net.b1);
      step_params.push_back(rt.cell->net.w2);
      step_params.push_back(rt.cell->net.b2);
      for (const auto& name : step_params) {
        auto& e = bank.params.entry(name);
        if (!e.grad.finite()) {
          throw NumericError("train: non-finite gradient in '" + name + "' at epoch " +
                             std::to_string(epoch));
        }
        for (int i = 0; i < e.value.size(); ++i) {
          const double g = e.grad.v[static_cast<std::size_t>(i)] +
                           cfg.weight_decay * e.value.v[static_cast<std::size_t>(i)];
          e.momentum.v[static_cast<std::size_t>(i)] = cfg.momentum * e.momentum.v[static_cast<std::size_t>(i)] + g;
          e.value.v[static_cast<std::size_t>(i)] -= lr * e.momentum.v[static_cast<std::size_t>(i)];
          e.grad.v[static_cast<std::size_t>(i)] = 0.0;
        }
      }

      MixtureParams fresh = fresh_from_batch(tape, res);
      if (cfg.full_covariance) {
        // Gradients flow through the diagonal surrogate; the bank carries
        // full second moments for Cholesky-based inference densities.
        const EstimationResult full =
            estimate_mixture(tape.value(X), tape.value(res.gamma), cfg.var_floor, true);
        fresh.full = true;
        fresh.cov = full.mix.cov;
        for (int k = 0; k < fresh.K; ++k) {
          if (res.degenerate[static_cast<std::size_t>(k)]) {
            std::copy(rt.cell->ema.cov_k(k), rt.cell->ema.cov_k(k) + fresh.D * fresh.D,
                      fresh.cov.begin() + static_cast<std::ptrdiff_t>(k) * fresh.D * fresh.D);
          }
        }
      }
      update_ema(rt.cell->ema, fresh, cfg.ema_decay, cfg.var_floor);
      rt.loss_sum += loss;
      ++rt.steps;
      ++step_counter;
    }

    for (auto& rt : cells) {
      prune_kernels(rt.cell->ema, bank.params, rt.cell->net, cfg.th);
      rt.cell->k_history.push_back(rt.cell->ema.K);
      if (log) {
        *log << "epoch " << epoch << " cell c" << rt.class_id << "/s" << rt.scale << " mean_loss "
             << std::setprecision(10) << (rt.steps ? rt.loss_sum / rt.steps : 0.0) << " K "
             << rt.cell->ema.K << "\n";
      }
    }
  }
  return bank;
}

// ---- inference ----

// Prepared per-cell scorers; build once, score many videos.
class BankScorers {
 public:
  explicit BankScorers(const PrototypeBank& bank) : bank_(&bank) {
    for (const auto& [key, cell] : bank.cells) scorers_.emplace(key, MixtureScorer(cell.ema));
  }

  const MixtureScorer& at(int class_id, int scale) const {
    return scorers_.at({class_id, scale});
  }

  const PrototypeBank& bank() const { return *bank_; }

 private:
  const PrototypeBank* bank_;
  std::map<std::pair<int, int>, MixtureScorer> scorers_;
};

struct InferResult {
  std::vector<double> scores;  // per class: max log-likelihood over scales and sub-graphs
  int pred = 0;
  std::vector<int> top5;
  int best_scale = 0;          // where the predicted class attains its max
  SubGraphIndex best_sub;
  double best_loglik = 0.0;
};

inline InferResult infer_video_with_subs(
    const VideoRecord& video, const BankScorers& scorers,
    const std::map<int, std::vector<SubGraphIndex>>& subs_by_scale) {
  const PrototypeBank& bank = scorers.bank();
  const GraphConfig gcfg = bank.graph_config();
  const CompleteGraph g = build_graph(video, bank.params, gcfg);

  const int C = bank.num_classes;
  InferResult out;
  out.scores.assign(static_cast<std::size_t>(C), -std::numeric_limits<double>::infinity());
  std::vector<int> arg_scale(static_cast<std::size_t>(C), 0);
  std::vector<SubGraphIndex> arg_sub(static_cast<std::size_t>(C));
  std::vector<double> x;

  for (const auto& [scale, subs] : subs_by_scale) {
    if (subs.empty()) throw NumericError("infer: empty sub-graph set for scale");
    x.resize(static_cast<std::size_t>(subgraph_dim(gcfg, scale)));
    for (const auto& idx : subs) {
      vectorize_into(g, idx, x.data());
      for (int c = 0; c < C; ++c) {
        const double ll = scorers.at(c, scale).loglik(x.data());
        if (ll > out.scores[static_cast<std::size_t>(c)]) {
          out.scores[static_cast<std::size_t>(c)] = ll;
          arg_scale[static_cast<std::size_t>(c)] = scale;
          arg_sub[static_cast<std::size_t>(c)] = idx;
        }
      }
    }
  }

  out.pred = 0;
  for (int c = 1; c < C; ++c) {
    if (out.scores[static_cast<std::size_t>(c)] > out.scores[static_cast<std::size_t>(out.pred)]) out.pred = c;
  }
  std::vector<int> by_score(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) by_score[static_cast<std::size_t>(c)] = c;
  std::sort(by_score.begin(), by_score.end(), [&](int a, int b) {
    if (out.scores[static_cast<std::size_t>(a)] != out.scores[static_cast<std::size_t>(b)]) {
      return out.scores[static_cast<std::size_t>(a)] > out.scores[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  by_score.resize(std::min<std::size_t>(5, by_score.size()));
  out.top5 = by_score;
  out.best_scale = arg_scale[static_cast<std::size_t>(out.pred)];
  out.best_sub = arg_sub[static_cast<std::size_t>(out.pred)];
  out.best_loglik = out.scores[static_cast<std::size_t>(out.pred)];
  return out;
}

inline InferResult infer_video(const VideoRecord& video, const BankScorers& scorers,
                               int budget_override = 0) {
  const PrototypeBank& bank = scorers.bank();
  const int n_nodes = bank.config.L * bank.config.M;
  const int budget = budget_override > 0 ? budget_override : bank.config.eval_budget();
  std::map<int, std::vector<SubGraphIndex>> subs;
  for (int s : bank.config.scales) {
    subs[s] = select_subgraphs(n_nodes, s, static_cast<std::uint64_t>(budget),
                               train_detail::pool_seed(bank.config.seed, video.video_id, s));
  }
  return infer_video_with_subs(video, scorers, subs);
}

// ---- evaluation ----

struct VideoResult {
  std::string video_id;
  int label = 0;
  int pred = 0;
  std::vector<int> top5;
  int best_scale = 0;
  std::vector<int> best_nodes;
  double best_loglik = 0.0;
};

struct EvalReport {
  std::string config_json;
  int num_classes = 0;
  double top1 = 0.0;
  double top5 = 0.0;
  std::vector<double> per_class_acc;
  std::vector<std::vector<int>> confusion;  // [label][pred]
  std::vector<VideoResult> videos;

  nlohmann::json to_json() const {
    nlohmann::json jv = nlohmann::json::array();
    for (const auto& v : videos) {
      jv.push_back(nlohmann::json{{"video_id", v.video_id},
                                  {"label", v.label},
                                  {"pred", v.pred},
                                  {"top5", v.top5},
                                  {"best_scale", v.best_scale},
                                  {"best_nodes", v.best_nodes},
                                  {"best_loglik", v.best_loglik}});
    }
    return nlohmann::json{{"config", nlohmann::json::parse(config_json)},
                          {"num_classes", num_classes},
                          {"top1", top1},
                          {"top5", top5},
                          {"per_class_acc", per_class_acc},
                          {"confusion", confusion},
                          {"videos", jv}};
  }

  std::string text_summary() const {
    std::ostringstream os;
    os << "top-1 " << std::fixed << std::setprecision(4) << top1 << "  top-5 " << top5 << "\n";
    os << "class  videos  accuracy\n";
    for (std::size_t c = 0; c < per_class_acc.size(); ++c) {
      int total = 0;
      for (int v : confusion[c]) total += v;
      os << std::setw(5) << c << "  " << std::setw(6) << total << "  " << std::setprecision(4)
         << per_class_acc[c] << "\n";
    }
    return os.str();
  }
};

inline EvalReport evaluate(const Dataset& test, const PrototypeBank& bank, int budget_override = 0) {
  const ValidationReport rep = validate(test);
  if (!rep.ok()) throw DataError("evaluate: dataset invalid: " + rep.summary());
  if (test.meta.num_classes != bank.num_classes) {
    throw DataError("evaluate: dataset has " + std::to_string(test.meta.num_classes) +
                    " classes, bank has " + std::to_string(bank.num_classes));
  }
  if (test.meta.L != bank.config.L || test.meta.T != bank.config.T || test.meta.M != bank.config.M ||
      test.meta.D_vis != bank.config.D_vis) {
    throw DataError("evaluate: dataset meta does not match bank config");
  }

  const BankScorers scorers(bank);
  EvalReport report;
  report.config_json = bank.config.to_json().dump();
  report.num_classes = bank.num_classes;
  report.confusion.assign(static_cast<std::size_t>(bank.num_classes),
                          std::vector<int>(static_cast<std::size_t>(bank.num_classes), 0));

  int correct1 = 0;
  int correct5 = 0;
  for (const auto& rec : test.records) {
    const InferResult r = infer_video(rec, scorers, budget_override);
    VideoResult v;
    v.video_id = rec.video_id;
    v.label = rec.label;
    v.pred = r.pred;
    v.top5 = r.top5;
    v.best_scale = r.best_scale;
    for (int i = 0; i < r.best_sub.scale; ++i) v.best_nodes.push_back(r.best_sub.ids[static_cast<std::size_t>(i)]);
    v.best_loglik = r.best_loglik;
    report.videos.push_back(std::move(v));
    report.confusion[static_cast<std::size_t>(rec.label)][static_cast<std::size_t>(r.pred)]++;
    if (r.pred == rec.label) ++correct1;
    if (std::find(r.top5.begin(), r.top5.end(), rec.label) != r.top5.end()) ++correct5;
  }
  const double total = static_cast<double>(test.records.size());
  report.top1 = total > 0 ? correct1 / total : 0.0;
  report.top5 = total > 0 ? correct5 / total : 0.0;
  report.per_class_acc.assign(static_cast<std::size_t>(bank.num_classes), 0.0);
  for (int c = 0; c < bank.num_classes; ++c) {
    int n = 0;
    for (int v : report.confusion[static_cast<std::size_t>(c)]) n += v;
    if (n > 0) {
      report.per_class_acc[static_cast<std::size_t>(c)] =
          static_cast<double>(report.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)]) / n;
    }
  }
  return report;
}

// ---- inspection ----

struct InspectSubEntry {
  std::string video_id;
  std::vector<int> node_ids;                      // canonical ids
  std::vector<std::pair<int, int>> node_refs;     // (clip, slot)
  double loglik = 0.0;
  double jaccard = -1.0;  // vs. truth motif slots, when truth given
};

struct InspectResult {
  int class_id = 0;
  int scale = 0;
  int K = 0;
  std::vector<double> weights;
  std::vector<double> mean_norms;
  std::vector<double> var_min, var_mean, var_max;
  std::vector<std::vector<InspectSubEntry>> per_kernel_top;
  std::vector<InspectSubEntry> global_top;  // by mixture log-likelihood
  double mean_jaccard_global = -1.0;
  double mean_jaccard_kernels = -1.0;
};

inline double jaccard_overlap(const std::vector<std::pair<int, int>>& a,
                              const std::vector<std::pair<int, int>>& b) {
  std::set<std::pair<int, int>> sa(a.begin(), a.end());
  std::set<std::pair<int, int>> sb(b.begin(), b.end());
  int inter = 0;
  for (const auto& x : sa) inter += sb.count(x) ? 1 : 0;
  const int uni = static_cast<int>(sa.size() + sb.size()) - inter;
  return uni > 0 ? static_cast<double>(inter) / uni : 0.0;
}

inline InspectResult inspect_cell(const PrototypeBank& bank, int class_id, int scale,
                                  const Dataset* ds = nullptr,
                                  const MotifAnnotations* truth = nullptr, int budget_override = 0,
                                  int top_n = 5) {
  const BankCell& cell = bank.cell(class_id, scale);
  InspectResult res;
  res.class_id = class_id;
  res.scale = scale;
  res.K = cell.ema.K;
  res.weights = cell.ema.weights;
  for (int k = 0; k < cell.ema.K; ++k) {
    double n2 = 0.0;
    double vmin = std::numeric_limits<double>::infinity();
    double vmax = 0.0;
    double vsum = 0.0;
    for (int i = 0; i < cell.ema.D; ++i) {
      n2 += cell.ema.mean(k)[i] * cell.ema.mean(k)[i];
      const double v = cell.ema.var(k)[i];
      vmin = std::min(vmin, v);
      vmax = std::max(vmax, v);
      vsum += v;
    }
    res.mean_norms.push_back(std::sqrt(n2));
    res.var_min.push_back(vmin);
    res.var_mean.push_back(vsum / cell.ema.D);
    res.var_max.push_back(vmax);
  }
  if (ds == nullptr) return res;

  static constexpr double kLog2Pi = 1.8378770664093454836;
  const MixtureScorer scorer(cell.ema);
  std::vector<double> kconst(static_cast<std::size_t>(cell.ema.K));
  for (int k = 0; k < cell.ema.K; ++k) {
    double c = std::log(std::max(cell.ema.weights[static_cast<std::size_t>(k)], 1e-300));
    for (int i = 0; i < cell.ema.D; ++i) c -= 0.5 * (kLog2Pi + std::log(cell.ema.var(k)[i]));
    kconst[static_cast<std::size_t>(k)] = c;
  }

  const GraphConfig gcfg = bank.graph_config();
  const int n_nodes = bank.config.L * bank.config.M;
  const int budget = budget_override > 0 ? budget_override : bank.config.eval_budget();

  std::vector<InspectSubEntry> all_entries;
  std::vector<std::vector<double>> kernel_lls;  // parallel to all_entries
  std::vector<double> x;
  for (const auto& rec : ds->records) {
    if (rec.label != class_id) continue;
    const CompleteGraph g = build_graph(rec, bank.params, gcfg);
    const auto subs = select_subgraphs(n_nodes, scale, static_cast<std::uint64_t>(budget),
                                       train_detail::pool_seed(bank.config.seed, rec.video_id, scale));
    x.resize(static_cast<std::size_t>(subgraph_dim(gcfg, scale)));
    const std::vector<std::pair<int, int>>* motif = nullptr;
    if (truth != nullptr) {
      auto it = truth->slots.find(rec.video_id);
      if (it != truth->slots.end()) motif = &it->second;
    }
    for (const auto& idx : subs) {
      vectorize_into(g, idx, x.data());
      InspectSubEntry e;
      e.video_id = rec.video_id;
      for (int i = 0; i < idx.scale; ++i) {
        const int id = idx.ids[static_cast<std::size_t>(i)];
        e.node_ids.push_back(id);
        const NodeRef& ref = g.order[static_cast<std::size_t>(id)];
        e.node_refs.emplace_back(ref.clip, ref.slot);
      }
      e.loglik = scorer.loglik(x.data());
      if (motif != nullptr) e.jaccard = jaccard_overlap(e.node_refs, *motif);
      std::vector<double> kll(static_cast<std::size_t>(cell.ema.K));
      for (int k = 0; k < cell.ema.K; ++k) {
        double quad = 0.0;
        for (int i = 0; i < cell.ema.D; ++i) {
          const double d = x[static_cast<std::size_t>(i)] - cell.ema.mean(k)[i];
          quad += d * d / cell.ema.var(k)[i];
        }
        kll[static_cast<std::size_t>(k)] = kconst[static_cast<std::size_t>(k)] - 0.5 * quad;
      }
      all_entries.push_back(std::move(e));
      kernel_lls.push_back(std::move(kll));
    }
  }

  auto top_indices = [&](auto&& key, int n) {
    std::vector<int> idx(all_entries.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      const double ka = key(a);
      const double kb = key(b);
      if (ka != kb) return ka > kb;
      return a < b;
    });
    idx.resize(std::min<std::size_t>(static_cast<std::size_t>(n), idx.size()));
    return idx;
  };

  double jac_sum = 0.0;
  int jac_n = 0;
  for (int i : top_indices([&](int a) { return all_entries[static_cast<std::size_t>(a)].loglik; }, top_n)) {
    res.global_top.push_back(all_entries[static_cast<std::size_t>(i)]);
    if (all_entries[static_cast<std::size_t>(i)].jaccard >= 0.0) {
      jac_sum += all_entries[static_cast<std::size_t>(i)].jaccard;
      ++jac_n;
    }
  }
  if (jac_n > 0) res.mean_jaccard_global = jac_sum / jac_n;

  double kjac_sum = 0.0;
  int kjac_n = 0;
  res.per_kernel_top.resize(static_cast<std::size_t>(cell.ema.K));
  for (int k = 0; k < cell.ema.K; ++k) {
    for (int i : top_indices([&](int a) { return kernel_lls[static_cast<std::size_t>(a)][static_cast<std::size_t>(k)]; }, top_n)) {
      InspectSubEntry e = all_entries[static_cast<std::size_t>(i)];
      e.loglik = kernel_lls[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
      if (e.jaccard >= 0.0) {
        kjac_sum += e.jaccard;
        ++kjac_n;
      }
      res.per_kernel_top[static_cast<std::size_t>(k)].push_back(std::move(e));
    }
  }
  if (kjac_n > 0) res.mean_jaccard_kernels = kjac_sum / kjac_n;
  return res;
}

}  // namespace musle
