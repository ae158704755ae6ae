#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "nas/architecture.hpp"
#include "nas/experiment.hpp"

using namespace nas;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory, removed on scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("nas_test_" + name + "_" + std::to_string(getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::map<std::string, std::string> tree_bytes(const fs::path& root, bool skip_config) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root).string();
    if (skip_config && rel == "config.toml") continue;
    out[rel] = read_file(e.path());
  }
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NAS_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string quiet_evaluator() {
  return "[evaluator]\nkind = \"synthetic\"\nsigma_seed = 0.0\nsigma_fold = 0.0\nsigma_interaction = 0.0\n";
}

ExperimentConfig small_config(const fs::path& out, const std::string& extra = "") {
  return ExperimentConfig::parse("output_dir = \"" + out.string() + "\"\n" + extra);
}

RunResult fake_run(Setup setup, std::uint64_t seed, const std::vector<double>& qualities) {
  RunResult r;
  r.algorithm = Algorithm::LocalSearch;
  r.setup = setup;
  r.budget = 375;
  r.search_seed = seed;
  for (double q : qualities) {
    BestEntry e;
    e.search_fitness = q;
    e.independent_quality = q;
    r.best.push_back(e);
  }
  return r;
}

}  // namespace

TEST_CASE("config defaults and parsing") {
  const auto d = ExperimentConfig::parse("");
  CHECK(d.algorithms == std::vector<Algorithm>{Algorithm::LocalSearch});
  CHECK(d.seeds == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
  CHECK(d.evaluator.kind == EvaluatorSpec::Kind::Synthetic);

  const auto c = ExperimentConfig::parse(R"(
algorithms = ["tpe", "gomea"]
setups = ["1fold", "3cv"]
budgets = [100, 200]
n_runs = 2
seeds = [7, 9]
jobs = 2
[evaluator]
kind = "synthetic"
benchmark_seed = 4
sigma_seed = 0.02
[search_pool]
partitioning_range = [0, 4]
seeds = [1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 144, 233, 377, 610, 987]
[noise]
n_samples = 100
)");
  CHECK(c.algorithms == std::vector<Algorithm>{Algorithm::Tpe, Algorithm::Gomea});
  CHECK(c.setups == std::vector<Setup>{Setup::OneFold, Setup::ThreeCV});
  CHECK(c.budgets == std::vector<long long>{100, 200});
  CHECK(c.seeds == std::vector<std::uint64_t>{7, 9});
  CHECK(c.evaluator.synthetic.benchmark_seed == 4);
  CHECK(c.evaluator.synthetic.sigma_seed == 0.02);
  CHECK(c.search_pool.partitionings == std::vector<int>{0, 1, 2, 3});
  CHECK(c.search_pool.seeds.size() == 15);
  CHECK(c.search_pool.seeds[4] == 8);
  CHECK(c.noise.n_samples == 100);

  const auto one = ExperimentConfig::parse("algorithm = \"random\"\nsetup = \"cv\"\nbudget = 50\n");
  CHECK(one.algorithms == std::vector<Algorithm>{Algorithm::Random});
  CHECK(one.budgets == std::vector<long long>{50});
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(ExperimentConfig::parse("bogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[evaluator]\nflavour = 1\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("n_runs = 2\nseeds = [3, 3]\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("n_runs = 3\nseeds = [1, 2]\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[holdout_pool]\npartitionings = [9]\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("budget = 3\nbudgets = [3]\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("setups = [\"5cv\"]\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("budgets = [0]\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("n_runs = = 2\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::parse("[evaluator]\nkind = \"tabular\"\n"), ConfigError);
  // three partitionings cannot host a 3CV plan
  CHECK_THROWS_AS(ExperimentConfig::parse("setups = [\"3cv\"]\n[search_pool]\npartitionings = [0, 1]\n"),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/config.toml"), ConfigError);
}

TEST_CASE("select_best deduplicates by repaired genotype") {
  std::vector<int> bad(24, 0);
  bad[0] = 2;  // repairs to all zeros
  const Genotype raw = Genotype::from_ints(bad);
  Genotype other;
  other.set(12, 3);
  const std::vector<Solution> history{{Genotype(), 0.5}, {raw, 0.7}, {other, 0.6}, {other, 0.6}};
  const auto best = select_best(history, 5);
  REQUIRE(best.size() == 2);
  CHECK(best[0].search_fitness == 0.6);
  CHECK(best[0].genotype == other);
  CHECK(best[1].search_fitness == 0.5);
  CHECK(best[1].repaired == Genotype());
  CHECK(select_best(history, 1).size() == 1);
}

TEST_CASE("result files round-trip") {
  RunResult r = fake_run(Setup::ThreeCV, 4, {0.25, 0.125});
  r.best[1].independent_quality.reset();
  r.plan_seed = 1004;
  r.trainings = 360;
  r.archive = "ls_3cv_375/seed_4.jsonl";
  const auto back = run_result_from_json(to_json(r));
  CHECK(to_json(back) == to_json(r));
  CHECK_FALSE(back.best[1].independent_quality.has_value());
  CHECK(cell_name(Algorithm::Tpe, Setup::OneFold, 750) == "tpe_1fold_750");
  CHECK(format_double(0.1) == "0.1");
}

TEST_CASE("grid runs respect the budget and are reproducible") {
  TempDir a("grid_a"), b("grid_b");
  const std::string grid = "algorithms = [\"random\", \"ls\", \"tpe\"]\nsetups = [\"1fold\", \"cv\", \"3cv\"]\n";
  const auto results = run_experiment(small_config(a.path, grid + "jobs = 1\n"));
  run_experiment(small_config(b.path, grid + "jobs = 3\n"));

  REQUIRE(results.size() == 3 * 3 * 5);
  std::map<std::string, std::size_t> per_cell;
  for (const auto& r : results) {
    CHECK(r.ok);
    const long long allowed = evaluations_allowed(375, r.setup);
    CHECK(static_cast<long long>(r.paid_evaluations) <= allowed);
    CHECK(r.trainings <= 375);
    CHECK(r.trainings == static_cast<long long>(r.paid_evaluations) * trainings_per_evaluation(r.setup));
    CHECK(r.evaluations <= static_cast<std::size_t>(2 * allowed));
    CHECK(r.plan_seed == 1000 + r.search_seed);
    if (r.setup == Setup::ThreeCV) CHECK(r.paid_evaluations <= 25);
    CHECK(fs::exists(a.path / r.archive));
    per_cell[cell_name(r.algorithm, r.setup, r.budget)] += r.best.size();
  }
  for (const auto& [cell, n] : per_cell) {
    INFO(cell);
    CHECK(n == 25);
  }

  // thread count changes nothing but the stored jobs value
  const auto ta = tree_bytes(a.path, true);
  const auto tb = tree_bytes(b.path, true);
  CHECK(ta.size() == tb.size());
  CHECK(ta == tb);
  CHECK(fs::exists(a.path / "summary.csv"));
  CHECK(load_results(a.path).size() == results.size());
}

TEST_CASE("re-evaluation on the holdout pool") {
  TempDir dir("reeval");
  const auto config = small_config(dir.path, "algorithms = [\"ls\"]\nsetups = [\"1fold\", \"cv\"]\n" + quiet_evaluator());
  run_experiment(config);
  auto evaluator = make_evaluator(config.evaluator);
  const auto results = reevaluate(dir.path, config, *evaluator);

  std::set<std::string> unique;
  for (const auto& r : results)
    for (const auto& e : r.best) {
      REQUIRE(e.independent_quality.has_value());
      // no noise: every training returns the base fitness
      CHECK(*e.independent_quality == doctest::Approx(e.search_fitness).epsilon(1e-12));
      unique.insert(e.repaired.to_string());
    }
  // one 3CV evaluation per distinct architecture
  const auto table = TabularBenchmark::load(dir.path / "holdout.jsonl");
  CHECK(table.size() == 15 * unique.size());

  // stored results carry the qualities and a second pass changes nothing
  const auto before = tree_bytes(dir.path, false);
  const auto again = reevaluate(dir.path, config, *evaluator);
  CHECK(tree_bytes(dir.path, false) == before);
  CHECK(load_results(dir.path)[0].best[0].independent_quality == results[0].best[0].independent_quality);

  ExperimentConfig overlapping = config;
  overlapping.holdout_pool = config.search_pool;
  CHECK_THROWS_AS(reevaluate(dir.path, overlapping, *evaluator), ConfigError);
}

TEST_CASE("noisy holdout scores differ from search fitness") {
  TempDir dir("reeval_noisy");
  const auto config = small_config(dir.path, "n_runs = 2\n");
  run_experiment(config);
  auto evaluator = make_evaluator(config.evaluator);
  const auto results = reevaluate(dir.path, config, *evaluator);
  std::size_t differ = 0;
  for (const auto& r : results)
    for (const auto& e : r.best) differ += *e.independent_quality != e.search_fitness;
  CHECK(differ > 0);
}

TEST_CASE("summary rows") {
  TempDir dir("summary");
  const auto config = small_config(dir.path,
                                   "algorithms = [\"random\", \"ls\"]\nsetups = [\"1fold\", \"cv\", \"3cv\"]\n"
                                   "budgets = [15, 30, 45, 60]\nn_runs = 2\n");
  auto results = run_experiment(config);
  auto evaluator = make_evaluator(config.evaluator);
  results = reevaluate(dir.path, config, *evaluator);
  const auto rows = summarize(results, config);
  REQUIRE(rows.size() == 24);
  for (const auto& row : rows) {
    CHECK(row.runs == 2);
    CHECK(row.flag.empty());
    // both runs contribute the same number of architectures, so the mean of
    // run means equals the mean over all architectures
    double sum = 0.0, run_means = 0.0;
    std::size_t n = 0;
    for (const auto& r : results) {
      if (r.algorithm != row.algorithm || r.setup != row.setup || r.budget != row.budget) continue;
      double run_sum = 0.0;
      for (const auto& e : r.best) {
        sum += *e.independent_quality;
        run_sum += *e.independent_quality;
        ++n;
      }
      run_means += run_sum / static_cast<double>(r.best.size()) / 2.0;
    }
    CHECK(row.architectures == n);
    CHECK(*row.mean_independent_quality == doctest::Approx(sum / static_cast<double>(n)));
    if (n == 10) CHECK(*row.mean_independent_quality == doctest::Approx(run_means));
  }

  std::ostringstream csv;
  write_summary_csv(csv, rows);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  CHECK(header == "algorithm,setup,budget,runs,failed_runs,architectures,mean_search_fitness,"
                  "mean_independent_quality,flag");
  std::ostringstream traj;
  write_trajectory_csv(traj, rows);
  const std::string traj_text = traj.str();
  CHECK(std::count(traj_text.begin(), traj_text.end(), '\n') == 25);

  // a single run: the cell mean is that run's mean
  ExperimentConfig single = config;
  single.n_runs = 1;
  single.seeds = {0};
  std::vector<RunResult> first;
  for (const auto& r : results)
    if (r.search_seed == 0) first.push_back(r);
  const auto one = summarize(first, single);
  double s = 0.0;
  for (const auto& e : first[0].best) s += e.search_fitness;
  CHECK(*one[0].mean_search_fitness == doctest::Approx(s / static_cast<double>(first[0].best.size())));

  // a missing result file is flagged
  fs::remove(dir.path / (cell_name(Algorithm::Random, Setup::OneFold, 15) + "/seed_1.json"));
  const auto partial = summarize(load_results(dir.path), config);
  CHECK(partial[0].flag == "missing_runs");
  CHECK(partial[0].runs == 1);
  CHECK(partial[1].flag.empty());
}

TEST_CASE("setup comparisons") {
  std::vector<RunResult> results;
  for (std::uint64_t s = 0; s < 5; ++s) {
    results.push_back(fake_run(Setup::CV, s, {0.9, 0.8, 0.7, 0.6, 0.5}));
    results.push_back(fake_run(Setup::OneFold, s, {0.9, 0.8, 0.7, 0.6, 0.5}));
  }
  const SetupPair cv_over_1fold{Setup::CV, Setup::OneFold};
  auto rows = compare_setups(results, {cv_over_1fold}, 1);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].n == 25);
  CHECK(rows[0].p_value == 1.0);
  CHECK_FALSE(rows[0].significant);

  // every CV point ahead of its 1Fold partner
  for (auto& r : results)
    if (r.setup == Setup::CV)
      for (auto& e : r.best) *e.independent_quality += 0.01 * (1.0 + e.search_fitness);
  rows = compare_setups(results, {cv_over_1fold}, 8);
  CHECK(rows[0].p_value == doctest::Approx(std::ldexp(1.0, -25)).epsilon(1e-9));
  CHECK(rows[0].p_adjusted == doctest::Approx(8 * std::ldexp(1.0, -25)).epsilon(1e-9));
  CHECK(rows[0].significant);
  CHECK(compare_setups(results, {{Setup::OneFold, Setup::CV}}, 8)[0].p_value == doctest::Approx(1.0));
  CHECK(all_setup_pairs(results).size() == 2);

  std::ostringstream csv;
  write_comparison_csv(csv, rows);
  CHECK(csv.str().starts_with("algorithm,budget,better,worse,n,p_value,p_adjusted,significant\n"));

  auto unmatched = results;
  unmatched[0].best.pop_back();
  CHECK_THROWS_AS(compare_setups(unmatched, {cv_over_1fold}, 1), std::invalid_argument);
  auto missing = results;
  missing[1].best[0].independent_quality.reset();
  CHECK_THROWS_AS(compare_setups(missing, {cv_over_1fold}, 1), std::invalid_argument);
}

TEST_CASE("noise analysis") {
  NoiseSpec spec;
  spec.n_samples = 400;
  SyntheticBenchmarkParams quiet;
  quiet.sigma_seed = quiet.sigma_fold = quiet.sigma_interaction = 0.0;
  SyntheticBenchmark flat(quiet);
  const auto same = noise_analysis(flat, SeedPool::search_default(), spec);
  CHECK(same.points.size() == 400);
  CHECK(*same.overall_rho == doctest::Approx(1.0));
  CHECK(same.argmax_agrees);
  CHECK(same.unit_a == TrainingUnit{0, 0, 0});
  CHECK(same.unit_b == TrainingUnit{1, 0, 1});

  SyntheticBenchmark noisy{SyntheticBenchmarkParams{}};
  spec.n_samples = 2000;
  const auto report = noise_analysis(noisy, SeedPool::search_default(), spec);
  CHECK(*report.top_rho < *report.overall_rho);

  std::stringstream pairs;
  write_noise_pairs_csv(pairs, report);
  const auto reread = noise_statistics(read_noise_pairs_csv(pairs), spec.fraction);
  CHECK(reread.overall_rho == report.overall_rho);
  CHECK(reread.top_rho == report.top_rho);
  CHECK(reread.argmax_agrees == report.argmax_agrees);
  std::ostringstream summary;
  write_noise_report_csv(summary, report);
  CHECK(summary.str().starts_with("n_samples,unit_a,unit_b,overall_rho,top_fraction,top_rho,argmax_agrees\n"));
}

TEST_CASE("a failing evaluator fails its run only") {
  TempDir source("table_src"), dir("table_run");
  // a lookup table that covers seeds 0 and 1 but not 2
  const auto seeded = run_experiment(small_config(source.path, "n_runs = 2\n"));
  std::string table;
  for (const auto& r : seeded) table += read_file(source.path / r.archive);
  write_file(source.path / "table.jsonl", table);

  const auto config = small_config(dir.path, "n_runs = 3\n[evaluator]\nkind = \"tabular\"\npath = \"" +
                                                  (source.path / "table.jsonl").string() + "\"\n");
  const auto results = run_experiment(config);
  REQUIRE(results.size() == 3);
  CHECK(results[0].ok);
  CHECK(results[1].ok);
  CHECK_FALSE(results[2].ok);
  CHECK(results[2].error.find("no tabular entry") != std::string::npos);
  CHECK(to_json(results[0]) == to_json(seeded[0]));
  CHECK(summarize(results, config)[0].flag == "failed_runs");
}

TEST_CASE("command line") {
  TempDir dir("cli");
  const fs::path cfg = dir.path / "exp.toml";
  write_file(cfg, "output_dir = \"out\"\nn_runs = 2\nsetups = [\"1fold\", \"cv\"]\nbudgets = [60]\n"
                  "[noise]\nn_samples = 50\n");
  CHECK(run_cli("run --config " + cfg.string()) == 0);
  const fs::path out = dir.path / "out";
  CHECK(fs::exists(out / "config.toml"));
  CHECK(run_cli("reeval --results " + out.string()) == 0);
  CHECK(load_results(out)[0].best[0].independent_quality.has_value());
  CHECK(run_cli("report --results " + out.string()) == 0);
  CHECK(run_cli("compare --results " + out.string() + " --m 2 --pairs 'cv>1fold'") == 0);
  CHECK(read_file(out / "comparison.csv").find("ls,60,cv,1fold,10,") != std::string::npos);
  CHECK(run_cli("noise --config " + cfg.string()) == 0);
  CHECK(fs::exists(out / "noise_report.csv"));

  const fs::path bad = dir.path / "bad.toml";
  write_file(bad, "budgets = \"many\"\n");
  CHECK(run_cli("run --config " + bad.string()) == 2);
  CHECK(run_cli("run") == 2);
  CHECK(run_cli("export-arch --genotype 1,2,3") == 2);
  CHECK(run_cli("compare --results " + out.string() + " --m 1 --pairs 'cv~1fold'") == 2);

  const fs::path broken = dir.path / "ext.toml";
  write_file(broken, "output_dir = \"ext\"\nn_runs = 1\n[evaluator]\nkind = \"external\"\ncommand = \"true\"\n");
  CHECK(run_cli("run --config " + broken.string()) == 3);
  CHECK_FALSE(load_results(dir.path / "ext")[0].ok);

  const std::string g = "1,0,0,0,0,0,0,0,0,0,0,0,2,2,2,2,2,2,2,2,2,2,2,2";
  const fs::path json = dir.path / "arch.json";
  const std::string cmd = std::string(NAS_CLI_PATH) + " export-arch --genotype " + g + " > " + json.string();
  REQUIRE(std::system(cmd.c_str()) == 0);
  std::string text = read_file(json);
  while (!text.empty() && text.back() == '\n') text.pop_back();
  CHECK(text == serialize_graph(build_graph(Genotype::parse(g))));
}
