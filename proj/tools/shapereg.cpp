// Command-line front end: synthetic data generation, training, evaluation,
// and the occlusion-robustness sweep.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "shapereg/experiment.hpp"

namespace fs = std::filesystem;
using namespace shapereg;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= s.size()) {
    size_t comma = s.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

int run_generate(const std::string& config_path, const std::string& out_dir,
                 uint64_t seed) {
  SyntheticConfig cfg =
      config_path.empty() ? SyntheticConfig{} : load_synthetic_config(config_path);
  Dataset ds = generate_synthetic(cfg, seed);
  save_dataset(ds, out_dir);
  std::cout << "wrote " << ds.manifest.n_samples << " samples ("
            << ds.manifest.train.size() << " train, "
            << ds.manifest.test.size() << " test) to " << out_dir << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (!data_dir.empty()) cfg.dataset = data_dir;
  if (!out_dir.empty()) cfg.output = out_dir;
  require(!cfg.dataset.empty(), "train: no dataset (set --data or config)");
  require(!cfg.output.empty(), "train: no output dir (set --out or config)");

  Dataset ds = load_dataset(cfg.dataset);
  TrainResult result = train(cfg, ds);

  fs::create_directories(cfg.output);
  result.pipeline.save((fs::path(cfg.output) / "weights.bin").string());
  write_report(result.report, (fs::path(cfg.output) / "report.json").string());
  write_history_csv(result.report,
                    (fs::path(cfg.output) / "history.csv").string());

  std::cout << "model " << to_string(cfg.model) << "+" << to_string(cfg.head)
            << ": test DSC " << result.report.overall.dsc_mean << " +- "
            << result.report.overall.dsc_sd << " %, ASD "
            << result.report.overall.asd_mean << " +- "
            << result.report.overall.asd_sd << " mm\n"
            << "wall time " << result.report.wall_time_sec << " s\n";
  return 0;
}

int run_evaluate(const std::string& weights_path, const std::string& data_dir,
                 const std::string& out_path) {
  Dataset ds = load_dataset(data_dir);
  Pipeline p = Pipeline::load(weights_path, ds);
  RunReport report = evaluate_to_report(p, ds);
  write_report(report, out_path);
  std::cout << to_string(p.model) << "+" << to_string(p.head) << ": test DSC "
            << report.overall.dsc_mean << " +- " << report.overall.dsc_sd
            << " %, ASD " << report.overall.asd_mean << " +- "
            << report.overall.asd_sd << " mm\n";
  return 0;
}

int run_ablate(const std::string& runs_arg, const std::string& data_dir,
               const std::string& out_path) {
  Dataset ds = load_dataset(data_dir);
  auto run_dirs = split_csv(runs_arg);
  require(!run_dirs.empty() && !run_dirs.front().empty(),
          "ablate: --runs needs at least one run directory");
  std::vector<Pipeline> pipelines;
  pipelines.reserve(run_dirs.size());
  std::vector<std::pair<std::string, const Pipeline*>> models;
  for (const auto& dir : run_dirs)
    pipelines.push_back(
        Pipeline::load((fs::path(dir) / "weights.bin").string(), ds));
  for (size_t i = 0; i < run_dirs.size(); ++i) {
    fs::path p(run_dirs[i]);
    std::string name = p.filename().string();
    if (name.empty()) name = p.parent_path().filename().string();
    models.emplace_back(name, &pipelines[i]);
  }
  auto rows = ablate(models, ds);
  write_ablation_csv(rows, out_path);
  std::cout << "wrote " << rows.size() << " rows to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid image + geometric shape regression for segmentation"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_arg, weights_path, runs_arg;
  uint64_t seed = 42;

  auto* gen = app.add_subcommand("generate-data",
                                 "Generate a synthetic landmark dataset");
  gen->add_option("--config", config_path, "SyntheticConfig JSON");
  gen->add_option("--out", out_arg, "Output dataset directory")->required();
  gen->add_option("--seed", seed, "Generator seed");

  auto* tr = app.add_subcommand("train", "Train a model and write a run dir");
  tr->add_option("--config", config_path, "ExperimentConfig JSON")->required();
  tr->add_option("--data", data_dir, "Dataset directory");
  tr->add_option("--out", out_arg, "Run output directory");

  auto* ev = app.add_subcommand("evaluate", "Evaluate stored weights");
  ev->add_option("--weights", weights_path, "weights.bin from a run")
      ->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--out", out_arg, "Report JSON path")->required();

  auto* ab = app.add_subcommand("ablate", "Occlusion-robustness sweep");
  ab->add_option("--runs", runs_arg, "Comma-separated run directories")
      ->required();
  ab->add_option("--data", data_dir, "Dataset directory")->required();
  ab->add_option("--out", out_arg, "Ablation CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_generate(config_path, out_arg, seed);
    if (tr->parsed()) return run_train(config_path, data_dir, out_arg);
    if (ev->parsed()) return run_evaluate(weights_path, data_dir, out_arg);
    if (ab->parsed()) return run_ablate(runs_arg, data_dir, out_arg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
