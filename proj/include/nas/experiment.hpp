#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nas/evaluation.hpp"
#include "nas/evaluators.hpp"
#include "nas/genotype.hpp"
#include "nas/search.hpp"

namespace nas {

struct EvaluatorSpec {
  enum class Kind { Synthetic, Tabular, External };
  Kind kind = Kind::Synthetic;
  SyntheticBenchmarkParams synthetic;
  std::filesystem::path tabular_path;
  std::string command;
  std::size_t workers = 1;
  std::chrono::milliseconds timeout = std::chrono::seconds(3600);
};

std::unique_ptr<UnitEvaluator> make_evaluator(const EvaluatorSpec& spec);

struct NoiseSpec {
  std::size_t n_samples = 5000;
  double fraction = 0.2;
  std::uint64_t sample_seed = 0;
};

/// One experiment grid: every algorithm x setup x budget cell gets n_runs
/// runs, run r using search seed seeds[r].
struct ExperimentConfig {
  EvaluatorSpec evaluator;
  std::vector<Algorithm> algorithms{Algorithm::LocalSearch};
  std::vector<Setup> setups{Setup::CV};
  std::vector<long long> budgets{375};
  std::size_t n_runs = 5;
  std::size_t n_best = 5;
  std::vector<std::uint64_t> seeds;
  /// Added to the search seed to seed the run's split plan.
  std::uint64_t plan_seed_offset = 1000;
  SeedPool search_pool = SeedPool::search_default();
  SeedPool holdout_pool = SeedPool::holdout_default();
  std::uint64_t holdout_seed = 0;
  /// Objective calls allowed per run, as a multiple of the evaluations the
  /// budget pays for (cache hits are free but still counted here).
  double max_call_factor = 2.0;
  std::size_t jobs = 1;
  std::filesystem::path output_dir = "results";
  NoiseSpec noise;

  /// Relative paths (output_dir, tabular path) resolve against base_dir.
  /// Throws ConfigError.
  static ExperimentConfig parse(std::string_view toml_text, const std::filesystem::path& base_dir = ".");
  static ExperimentConfig load(const std::filesystem::path& path);
  /// The config stored by run_experiment, with output_dir set to the directory.
  static ExperimentConfig load_from_results(const std::filesystem::path& results_dir);
  /// Throws ConfigError on duplicate seeds, overlapping pools, bad values.
  void validate() const;
};

struct BestEntry {
  Genotype genotype;
  Genotype repaired;
  double search_fitness = 0.0;
  std::optional<double> independent_quality;
};

struct RunResult {
  Algorithm algorithm = Algorithm::LocalSearch;
  Setup setup = Setup::CV;
  long long budget = 0;
  std::uint64_t search_seed = 0;
  std::uint64_t plan_seed = 0;
  bool ok = true;
  std::string error;
  long long trainings = 0;
  std::size_t evaluations = 0;
  std::size_t paid_evaluations = 0;
  std::vector<BestEntry> best;
  /// Relative to the results directory.
  std::string archive;
};

std::string cell_name(Algorithm algorithm, Setup setup, long long budget);
std::string to_json(const RunResult& result);
RunResult run_result_from_json(std::string_view text);

/// Up to n solutions of the history, deduplicated by repaired genotype
/// (first occurrence kept), sorted by fitness descending, earlier calls
/// first on ties.
std::vector<BestEntry> select_best(const std::vector<Solution>& history, std::size_t n);

/// One run to budget exhaustion. The archive receives every event.
RunResult execute_run(const ExperimentConfig& config, Algorithm algorithm, Setup setup, long long budget,
                      std::uint64_t search_seed, UnitEvaluator& evaluator, EvaluationArchive& archive);

/// Runs the whole grid and writes, under output_dir:
///   config.toml, <cell>/seed_<s>.jsonl (archive), <cell>/seed_<s>.json (result),
///   summary.csv and trajectory.csv.
/// A run whose evaluator fails is stored as failed and the others continue.
std::vector<RunResult> run_experiment(const ExperimentConfig& config);

/// All run results below a results directory, in grid order.
std::vector<RunResult> load_results(const std::filesystem::path& results_dir);

/// Fills the independent quality of every best entry using the holdout
/// plan, caching holdout trainings in holdout.jsonl. Rewrites the result
/// files. Throws ConfigError if the pools overlap.
std::vector<RunResult> reevaluate(const std::filesystem::path& results_dir, const ExperimentConfig& config,
                                  UnitEvaluator& evaluator);

struct SummaryRow {
  Algorithm algorithm = Algorithm::LocalSearch;
  Setup setup = Setup::CV;
  long long budget = 0;
  std::size_t runs = 0;
  std::size_t failed_runs = 0;
  std::size_t architectures = 0;
  std::optional<double> mean_search_fitness;
  std::optional<double> mean_independent_quality;
  std::optional<double> sd_independent_quality;
  /// Empty, or "missing_runs" / "failed_runs" / "no_reevaluation".
  std::string flag;
};

/// One row per grid cell, in grid order.
std::vector<SummaryRow> summarize(const std::vector<RunResult>& results, const ExperimentConfig& config);
void write_summary_csv(std::ostream& out, const std::vector<SummaryRow>& rows);
/// Long format, one row per (algorithm, setup, budget) with budgets
/// ascending, for quality-versus-budget plots.
void write_trajectory_csv(std::ostream& out, const std::vector<SummaryRow>& rows);
/// Writes summary.csv and trajectory.csv into the results directory.
void write_reports(const std::filesystem::path& results_dir, const std::vector<RunResult>& results,
                   const ExperimentConfig& config);

struct SetupPair {
  Setup better = Setup::CV;
  Setup worse = Setup::OneFold;
};

struct ComparisonRow {
  Algorithm algorithm = Algorithm::LocalSearch;
  long long budget = 0;
  SetupPair pair{};
  std::size_t n = 0;
  double p_value = 1.0;
  double p_adjusted = 1.0;
  bool significant = false;
};

/// Wilcoxon test that pair.better yields higher independent quality than
/// pair.worse, per (algorithm, budget). Points are matched by (run seed,
/// rank); throws std::invalid_argument when they do not match one to one
/// or a quality is missing.
std::vector<ComparisonRow> compare_setups(const std::vector<RunResult>& results, const std::vector<SetupPair>& pairs,
                                          int m, double alpha = 0.05);
/// Every ordered pair of distinct setups present in the results.
std::vector<SetupPair> all_setup_pairs(const std::vector<RunResult>& results);
void write_comparison_csv(std::ostream& out, const std::vector<ComparisonRow>& rows);

struct NoisePoint {
  Genotype genotype;
  double score_a = 0.0;
  double score_b = 0.0;
};

struct NoiseReport {
  TrainingUnit unit_a;
  TrainingUnit unit_b;
  std::vector<NoisePoint> points;
  std::optional<double> overall_rho;
  std::optional<double> top_rho;
  double fraction = 0.2;
  bool argmax_agrees = true;
};

/// Scores n_samples repaired random genotypes under two training units that
/// differ in partitioning and seed: (p0, fold 0, s0) and (p1, fold 0, s1)
/// of the pool's lists.
NoiseReport noise_analysis(UnitEvaluator& evaluator, const SeedPool& pool, const NoiseSpec& spec);
/// Statistics of a set of paired scores (first argmax on ties).
NoiseReport noise_statistics(std::vector<NoisePoint> points, double fraction);
void write_noise_pairs_csv(std::ostream& out, const NoiseReport& report);
void write_noise_report_csv(std::ostream& out, const NoiseReport& report);
std::vector<NoisePoint> read_noise_pairs_csv(std::istream& in);

/// Shortest text that reads back to the same double.
std::string format_double(double value);

}  // namespace nas
