// Command-line front end for running and analysing search experiments.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "nas/architecture.hpp"
#include "nas/experiment.hpp"
#include "nas/external.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitEvaluator = 3;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<nas::SetupPair> parse_pairs(const std::string& text) {
  // "cv>1fold,3cv>cv"
  std::vector<nas::SetupPair> pairs;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto gt = item.find('>');
    if (gt == std::string::npos) throw nas::ConfigError("pair '" + item + "' must look like better>worse");
    try {
      pairs.push_back({nas::setup_from_string(item.substr(0, gt)), nas::setup_from_string(item.substr(gt + 1))});
    } catch (const std::invalid_argument& e) {
      throw nas::ConfigError(e.what());
    }
  }
  return pairs;
}

int cmd_run(const fs::path& config_path) {
  const auto config = nas::ExperimentConfig::load(config_path);
  const auto results = nas::run_experiment(config);
  int failed = 0;
  for (const auto& r : results) {
    if (r.ok) continue;
    ++failed;
    std::cerr << "run " << nas::cell_name(r.algorithm, r.setup, r.budget) << " seed " << r.search_seed
              << " failed: " << r.error << '\n';
  }
  std::cout << results.size() - static_cast<std::size_t>(failed) << " of " << results.size() << " runs completed in "
            << config.output_dir.string() << '\n';
  return failed ? kExitEvaluator : 0;
}

int cmd_reeval(const fs::path& dir) {
  const auto config = nas::ExperimentConfig::load_from_results(dir);
  const auto evaluator = nas::make_evaluator(config.evaluator);
  const auto results = nas::reevaluate(dir, config, *evaluator);
  nas::write_reports(dir, results, config);
  std::cout << "re-evaluated " << results.size() << " runs\n";
  return 0;
}

int cmd_report(const fs::path& dir) {
  const auto config = nas::ExperimentConfig::load_from_results(dir);
  const auto results = nas::load_results(dir);
  nas::write_reports(dir, results, config);
  std::ifstream summary(dir / "summary.csv");
  std::cout << summary.rdbuf();
  return 0;
}

int cmd_compare(const fs::path& dir, int m, const std::string& pairs_text, double alpha) {
  const auto results = nas::load_results(dir);
  const auto pairs = pairs_text.empty() ? nas::all_setup_pairs(results) : parse_pairs(pairs_text);
  std::vector<nas::ComparisonRow> rows;
  try {
    rows = nas::compare_setups(results, pairs, m, alpha);
  } catch (const std::invalid_argument& e) {
    throw nas::ConfigError(e.what());
  }
  std::ostringstream csv;
  nas::write_comparison_csv(csv, rows);
  write_text(dir / "comparison.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

int cmd_noise(const fs::path& config_path) {
  const auto config = nas::ExperimentConfig::load(config_path);
  const auto evaluator = nas::make_evaluator(config.evaluator);
  const auto report = nas::noise_analysis(*evaluator, config.search_pool, config.noise);
  fs::create_directories(config.output_dir);
  std::ostringstream pairs, summary;
  nas::write_noise_pairs_csv(pairs, report);
  nas::write_noise_report_csv(summary, report);
  write_text(config.output_dir / "noise_pairs.csv", pairs.str());
  write_text(config.output_dir / "noise_report.csv", summary.str());
  std::cout << summary.str();
  return 0;
}

int cmd_export(const std::vector<int>& genes, int stem, int width, int height) {
  const auto genotype = nas::Genotype::from_ints(genes);
  std::cout << nas::serialize_graph(nas::build_graph(genotype, stem, width, height)) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural architecture search experiments with configurable evaluation setups"};
  app.require_subcommand(1);

  fs::path run_config;
  auto* run = app.add_subcommand("run", "run the experiment grid of a config");
  run->add_option("--config", run_config, "TOML experiment config")->required();

  fs::path reeval_dir;
  auto* reeval = app.add_subcommand("reeval", "score the best genotypes on the holdout pool");
  reeval->add_option("--results", reeval_dir, "results directory")->required();

  fs::path report_dir;
  auto* report = app.add_subcommand("report", "write summary.csv and trajectory.csv");
  report->add_option("--results", report_dir, "results directory")->required();

  fs::path compare_dir;
  int m = 1;
  std::string pairs;
  double alpha = 0.05;
  auto* compare = app.add_subcommand("compare", "Wilcoxon tests between setups");
  compare->add_option("--results", compare_dir, "results directory")->required();
  compare->add_option("--m", m, "Bonferroni factor")->required()->check(CLI::PositiveNumber);
  compare->add_option("--pairs", pairs, "hypotheses such as cv>1fold,3cv>cv (default: all ordered pairs)");
  compare->add_option("--alpha", alpha, "significance level")->capture_default_str();

  fs::path noise_config;
  auto* noise = app.add_subcommand("noise", "paired scores of random genotypes under two training units");
  noise->add_option("--config", noise_config, "TOML experiment config")->required();

  std::vector<int> genes;
  int stem = 32, width = 128, height = 128;
  auto* exp = app.add_subcommand("export-arch", "print the architecture graph of a genotype as JSON");
  exp->add_option("--genotype", genes, "24 integers")->required()->expected(24)->delimiter(',');
  exp->add_option("--stem", stem, "stem channels")->capture_default_str();
  exp->add_option("--width", width, "input width")->capture_default_str();
  exp->add_option("--height", height, "input height")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) return cmd_run(run_config);
    if (*reeval) return cmd_reeval(reeval_dir);
    if (*report) return cmd_report(report_dir);
    if (*compare) return cmd_compare(compare_dir, m, pairs, alpha);
    if (*noise) return cmd_noise(noise_config);
    if (*exp) return cmd_export(genes, stem, width, height);
  } catch (const nas::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nas::EvaluatorError& e) {
    std::cerr << "evaluator failure: " << e.what() << '\n';
    return kExitEvaluator;
  } catch (const nas::MissingEntry& e) {
    std::cerr << "evaluator failure: " << e.what() << '\n';
    return kExitEvaluator;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
