// Command-line front end: gen / train / eval / inspect / gradcheck /
// sketchbench. Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "musle/benchmarks.hpp"
#include "musle/pipeline.hpp"

namespace {

int cmd_gen(const std::string& config_path, const std::string& out_dir) {
  const musle::GeneratorConfig cfg = musle::generator_config_from_file(config_path);
  const musle::SynthOutput out = musle::generate(cfg);
  std::filesystem::create_directories(out_dir);
  musle::save_dataset(out.train, out_dir + "/train.jsonl");
  musle::save_dataset(out.test, out_dir + "/test.jsonl");
  musle::save_truth(out.truth, out_dir + "/truth.jsonl");
  std::cout << "gen: wrote " << out.train.records.size() << " train / " << out.test.records.size()
            << " test videos to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_path) {
  const musle::RunConfig cfg = musle::run_config_from_file(config_path);
  const musle::Dataset data = musle::load_dataset(data_path);
  const musle::PrototypeBank bank = musle::train(cfg, data, &std::cout);
  musle::save_bank(bank, out_path);
  std::cout << "train: saved bank to " << out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& bank_path, const std::string& data_path,
             const std::string& report_path, int budget) {
  const musle::PrototypeBank bank = musle::load_bank(bank_path);
  const musle::Dataset data = musle::load_dataset(data_path);
  const musle::EvalReport report = musle::evaluate(data, bank, budget);
  if (!report_path.empty()) {
    std::ofstream out(report_path, std::ios::binary);
    if (!out) throw musle::DataError("eval: cannot open report path '" + report_path + "'");
    out << report.to_json().dump(2) << "\n";
  }
  std::cout << report.text_summary();
  return 0;
}

void print_entry(const musle::InspectSubEntry& e) {
  std::cout << "    " << e.video_id << "  nodes [";
  for (std::size_t i = 0; i < e.node_refs.size(); ++i) {
    if (i) std::cout << " ";
    std::cout << "(" << e.node_refs[i].first << "," << e.node_refs[i].second << ")";
  }
  std::cout << "]  loglik " << e.loglik;
  if (e.jaccard >= 0.0) std::cout << "  jaccard " << e.jaccard;
  std::cout << "\n";
}

int cmd_inspect(const std::string& bank_path, int class_id, int scale, const std::string& data_path,
                const std::string& truth_path, int budget) {
  const musle::PrototypeBank bank = musle::load_bank(bank_path);
  musle::Dataset data;
  musle::MotifAnnotations truth;
  const bool have_data = !data_path.empty();
  if (have_data) data = musle::load_dataset(data_path);
  const bool have_truth = !truth_path.empty();
  if (have_truth) truth = musle::load_truth(truth_path);

  const musle::InspectResult res =
      musle::inspect_cell(bank, class_id, scale, have_data ? &data : nullptr,
                          have_truth ? &truth : nullptr, budget);

  std::cout << "cell c" << class_id << "/s" << scale << "  K " << res.K << "\n";
  double wsum = 0.0;
  for (double w : res.weights) wsum += w;
  std::cout << "  weights (sum " << wsum << "):";
  for (double w : res.weights) std::cout << " " << w;
  std::cout << "\n";
  for (int k = 0; k < res.K; ++k) {
    std::cout << "  kernel " << k << "  |mu| " << res.mean_norms[static_cast<std::size_t>(k)]
              << "  var[min/mean/max] " << res.var_min[static_cast<std::size_t>(k)] << "/"
              << res.var_mean[static_cast<std::size_t>(k)] << "/"
              << res.var_max[static_cast<std::size_t>(k)] << "\n";
  }
  if (have_data) {
    std::cout << "  top sub-graphs by mixture log-likelihood:\n";
    for (const auto& e : res.global_top) print_entry(e);
    for (int k = 0; k < res.K; ++k) {
      std::cout << "  kernel " << k << " top sub-graphs:\n";
      for (const auto& e : res.per_kernel_top[static_cast<std::size_t>(k)]) print_entry(e);
    }
    if (res.mean_jaccard_global >= 0.0) {
      std::cout << "  mean jaccard (top list vs motif slots): " << res.mean_jaccard_global << "\n";
    }
  }
  return 0;
}

int cmd_gradcheck(double tol, double eps, std::uint64_t seed) {
  const musle::GradCheckOutcome out = musle::run_gradcheck(tol, eps, seed, &std::cout);
  return out.report.pass ? 0 : 3;
}

int cmd_sketchbench(std::uint64_t seed) {
  const musle::SketchBenchOutcome out = musle::run_sketchbench(200, 1000, seed, &std::cout);
  return (out.rmse_decreasing && out.unbias_pass) ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MUSLE: multi-scale sub-graph action prototypes"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, bank_path, report_path, truth_path;
  int class_id = 0, scale = 3, budget = 0;
  double tol = 1e-4, eps = 1e-5;
  std::uint64_t seed = 20240817;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "generator config file")->required();
  gen->add_option("--out", out_path, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a prototype bank");
  train->add_option("--config", config_path, "run config file")->required();
  train->add_option("--data", data_path, "training dataset (JSON Lines)")->required();
  train->add_option("--out", out_path, "output bank path")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a bank on a dataset");
  eval->add_option("--bank", bank_path, "bank file")->required();
  eval->add_option("--data", data_path, "dataset (JSON Lines)")->required();
  eval->add_option("--report", report_path, "report output path (JSON)");
  eval->add_option("--budget", budget, "sub-graph budget override (default: training budget)");

  auto* inspect = app.add_subcommand("inspect", "dump prototypes of one (class, scale) cell");
  inspect->add_option("--bank", bank_path, "bank file")->required();
  inspect->add_option("--class", class_id, "class id")->required();
  inspect->add_option("--scale", scale, "sub-graph scale")->required();
  inspect->add_option("--data", data_path, "dataset for top sub-graph listing");
  inspect->add_option("--truth", truth_path, "motif truth file (adds jaccard overlap)");
  inspect->add_option("--budget", budget, "sub-graph budget override");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of all gradients");
  gradcheck->add_option("--tol", tol, "max relative error tolerance");
  gradcheck->add_option("--eps", eps, "finite-difference step");
  gradcheck->add_option("--seed", seed, "instance seed");

  auto* sketchbench = app.add_subcommand("sketchbench", "tensor-sketch quality benchmark");
  sketchbench->add_option("--seed", seed, "benchmark seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(config_path, out_path);
    if (train->parsed()) return cmd_train(config_path, data_path, out_path);
    if (eval->parsed()) return cmd_eval(bank_path, data_path, report_path, budget);
    if (inspect->parsed()) return cmd_inspect(bank_path, class_id, scale, data_path, truth_path, budget);
    if (gradcheck->parsed()) return cmd_gradcheck(tol, eps, seed);
    if (sketchbench->parsed()) return cmd_sketchbench(seed);
  } catch (const musle::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const musle::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const musle::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
