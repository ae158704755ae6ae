#include <doctest.h>

#include <atomic>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "nas/evaluation.hpp"
#include "nas/evaluators.hpp"

using namespace nas;

namespace {

// Deterministic per-unit score with a call counter.
class CountingEvaluator : public UnitEvaluator {
 public:
  double score(const Genotype& g, const TrainingUnit& u) override {
    ++calls;
    double s = 0.1 * (u.fold + 1) + 0.01 * (u.seed % 7);
    for (auto v : g.genes()) s += 0.001 * v;
    return std::min(s, 1.0);
  }
  std::atomic<int> calls{0};
};

// Scores a batch back to front, as an out-of-order worker pool might.
class ReversedBatch : public CountingEvaluator {
 public:
  std::vector<double> score_batch(const Genotype& g, std::span<const TrainingUnit> units) override {
    std::vector<double> out(units.size());
    for (std::size_t i = units.size(); i-- > 0;) out[i] = score(g, units[i]);
    return out;
  }
};

class ConstantEvaluator : public UnitEvaluator {
 public:
  explicit ConstantEvaluator(double v) : v_(v) {}
  double score(const Genotype&, const TrainingUnit&) override { return v_; }

 private:
  double v_;
};

Genotype topo_first(int first) {
  std::vector<int> topo(12, 0);
  topo[0] = first;
  return Genotype(topo, std::vector<int>(12, 2));
}

SyntheticBenchmarkParams quiet() {
  SyntheticBenchmarkParams p;
  p.sigma_seed = p.sigma_fold = p.sigma_interaction = 0.0;
  return p;
}

}  // namespace

TEST_CASE("trainings per evaluation and evaluations allowed") {
  CHECK(trainings_per_evaluation(Setup::OneFold) == 1);
  CHECK(trainings_per_evaluation(Setup::CV) == 5);
  CHECK(trainings_per_evaluation(Setup::ThreeCV) == 15);
  CHECK(evaluations_allowed(375, Setup::ThreeCV) == 25);
  CHECK(evaluations_allowed(375, Setup::CV) == 75);
  CHECK(evaluations_allowed(3000, Setup::OneFold) == 3000);
  CHECK(evaluations_allowed(14, Setup::ThreeCV) == 0);
  CHECK(setup_from_string("3cv") == Setup::ThreeCV);
  CHECK(to_string(Setup::OneFold) == "1fold");
  CHECK_THROWS_AS(setup_from_string("10cv"), ConfigError);
}

TEST_CASE("split plans satisfy their structure and nest") {
  const SeedPool pool = SeedPool::search_default();
  for (std::uint64_t seed : {0ULL, 1ULL, 99ULL}) {
    const auto one = make_split_plan(Setup::OneFold, pool, seed);
    const auto cv = make_split_plan(Setup::CV, pool, seed);
    const auto three = make_split_plan(Setup::ThreeCV, pool, seed);
    REQUIRE(one.units.size() == 1);
    REQUIRE(cv.units.size() == 5);
    REQUIRE(three.units.size() == 15);
    CHECK(one.units[0].fold == 0);

    std::set<int> folds, seeds;
    for (const auto& u : cv.units) {
      folds.insert(u.fold);
      seeds.insert(u.seed);
      CHECK(u.partitioning == cv.units[0].partitioning);
    }
    CHECK(folds == std::set<int>{0, 1, 2, 3, 4});
    CHECK(seeds.size() == 5);

    std::set<int> parts, seeds15;
    std::set<std::pair<int, int>> part_fold;
    for (const auto& u : three.units) {
      parts.insert(u.partitioning);
      seeds15.insert(u.seed);
      part_fold.insert({u.partitioning, u.fold});
    }
    CHECK(parts.size() == 3);
    CHECK(seeds15.size() == 15);
    CHECK(part_fold.size() == 15);

    // nested unit sets keep cached work when a setup is upgraded
    const std::set<TrainingUnit> s1(one.units.begin(), one.units.end());
    const std::set<TrainingUnit> s5(cv.units.begin(), cv.units.end());
    const std::set<TrainingUnit> s15(three.units.begin(), three.units.end());
    CHECK(std::includes(s5.begin(), s5.end(), s1.begin(), s1.end()));
    CHECK(std::includes(s15.begin(), s15.end(), s5.begin(), s5.end()));

    CHECK(make_split_plan(Setup::ThreeCV, pool, seed).units == three.units);
  }
  CHECK(make_split_plan(Setup::CV, pool, 0).units != make_split_plan(Setup::CV, pool, 1).units);
}

TEST_CASE("undersized pools are configuration errors") {
  SeedPool small{{0, 1}, std::vector<int>(15)};
  std::iota(small.seeds.begin(), small.seeds.end(), 0);
  CHECK_THROWS_AS(make_split_plan(Setup::OneFold, small, 0), ConfigError);
  SeedPool few_seeds{{0, 1, 2}, {0, 1, 2, 3}};
  CHECK_THROWS_AS(make_split_plan(Setup::CV, few_seeds, 0), ConfigError);
}

TEST_CASE("holdout plan refuses overlapping pools") {
  const auto search = SeedPool::search_default();
  const auto holdout = SeedPool::holdout_default();
  CHECK_FALSE(pools_overlap(search, holdout));
  const auto plan = make_holdout_plan(holdout, search);
  CHECK(plan.role == PoolRole::Holdout);
  CHECK(plan.units.size() == 15);
  for (const auto& u : plan.units) {
    CHECK(u.partitioning >= 1000);
    CHECK(u.seed >= 100000);
  }
  SeedPool shared = holdout;
  shared.seeds[4] = 17;
  CHECK(pools_overlap(search, shared));
  CHECK_THROWS_AS(make_holdout_plan(shared, search), ConfigError);
}

TEST_CASE("fitness is the mean of unit scores and cache hits are free") {
  CountingEvaluator ev;
  EvaluationArchive archive;
  BudgetLedger ledger(100);
  const auto plan = make_split_plan(Setup::CV, SeedPool::search_default(), 3);
  const Genotype g = topo_first(1);

  const double f = evaluate_fitness(g, Setup::CV, plan, ev, archive, ledger);
  CHECK(ledger.consumed() == 5);
  CHECK(ev.calls == 5);
  double mean = 0.0;
  for (const auto& u : plan.units) mean += CountingEvaluator().score(repair(g), u);
  CHECK(f == doctest::Approx(mean / 5).epsilon(1e-15));

  CHECK(evaluate_fitness(g, Setup::CV, plan, ev, archive, ledger) == f);
  CHECK(ledger.consumed() == 5);
  CHECK(ev.calls == 5);
  CHECK(archive.fitness_count() == 2);
  CHECK(archive.fitness_of(g, Setup::CV) == f);
}

TEST_CASE("raw genotypes sharing a repair share trainings") {
  CountingEvaluator ev;
  EvaluationArchive archive;
  BudgetLedger ledger(100);
  const auto plan = make_split_plan(Setup::CV, SeedPool::search_default(), 0);
  const Genotype infeasible = topo_first(2);
  const Genotype feasible = topo_first(0);
  REQUIRE(repair(infeasible) == feasible);

  const double a = evaluate_fitness(infeasible, Setup::CV, plan, ev, archive, ledger);
  CHECK(ledger.consumed() == 5);
  const double b = evaluate_fitness(feasible, Setup::CV, plan, ev, archive, ledger);
  CHECK(ledger.consumed() == 5);
  CHECK(a == b);
  // the raw genotype is what the archive keeps for the search
  const auto records = archive.training_records();
  CHECK(records[0].genotype == infeasible);
  CHECK(records[0].repaired == feasible);
  CHECK(archive.fitness_of(infeasible, Setup::CV) == a);
}

TEST_CASE("a rejected evaluation changes nothing") {
  CountingEvaluator ev;
  EvaluationArchive archive;
  BudgetLedger ledger(7);
  const auto plan = make_split_plan(Setup::CV, SeedPool::search_default(), 0);
  evaluate_fitness(topo_first(0), Setup::CV, plan, ev, archive, ledger);
  const std::string before = archive.log_text();
  CHECK_THROWS_AS(evaluate_fitness(topo_first(1), Setup::CV, plan, ev, archive, ledger), BudgetExhausted);
  CHECK(ledger.consumed() == 5);
  CHECK(archive.log_text() == before);
  CHECK(ev.calls == 5);
  // a fully cached evaluation still goes through with no budget left to spend
  CHECK_NOTHROW(evaluate_fitness(topo_first(0), Setup::CV, plan, ev, archive, ledger));
}

TEST_CASE("aggregation does not depend on batch completion order") {
  CountingEvaluator forward;
  ReversedBatch backward;
  const auto plan = make_split_plan(Setup::ThreeCV, SeedPool::search_default(), 8);
  EvaluationArchive a1, a2;
  BudgetLedger l1(15), l2(15);
  const Genotype g = topo_first(1);
  CHECK(evaluate_fitness(g, Setup::ThreeCV, plan, forward, a1, l1) ==
        evaluate_fitness(g, Setup::ThreeCV, plan, backward, a2, l2));
}

TEST_CASE("scores are clamped and NaN is rejected") {
  ConstantEvaluator high(1.7);
  EvaluationArchive archive;
  BudgetLedger ledger(10);
  const auto plan = make_split_plan(Setup::OneFold, SeedPool::search_default(), 0);
  CHECK(evaluate_fitness(topo_first(0), Setup::OneFold, plan, high, archive, ledger) == 1.0);
  ConstantEvaluator nan(std::nan(""));
  CHECK_THROWS(evaluate_fitness(topo_first(1), Setup::OneFold, plan, nan, archive, ledger));
  CHECK(ledger.consumed() == 1);
  CHECK_THROWS_AS(archive.record_training(topo_first(1), topo_first(1), {0, 0, 0}, 1.5), std::invalid_argument);
}

TEST_CASE("ledger is exact and thread safe") {
  BudgetLedger ledger(1000);
  std::vector<std::thread> threads;
  std::atomic<int> granted{0};
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&] {
      for (int i = 0; i < 200; ++i)
        if (ledger.try_consume(1)) ++granted;
    });
  for (auto& t : threads) t.join();
  CHECK(granted == 1000);
  CHECK(ledger.consumed() == 1000);
  CHECK(ledger.remaining() == 0);
  CHECK_FALSE(ledger.try_consume(1));
}

TEST_CASE("budgeted objective consumes at most the budget") {
  SyntheticBenchmark bench(SyntheticBenchmarkParams{});
  for (Setup setup : {Setup::OneFold, Setup::CV, Setup::ThreeCV}) {
    EvaluationArchive archive;
    BudgetLedger ledger(375);
    BudgetedObjective objective(setup, make_split_plan(setup, SeedPool::search_default(), 1), bench, archive, ledger,
                                1000000);
    SplitMix64 rng(2);
    std::size_t ok = 0;
    try {
      for (;;) {
        objective.evaluate(random_genotype(rng));
        ++ok;
      }
    } catch (const BudgetExhausted&) {
    }
    CHECK(ledger.consumed() <= 375);
    CHECK(static_cast<std::size_t>(ledger.consumed()) == archive.training_count());
    CHECK(objective.paid_evaluations() == static_cast<std::size_t>(evaluations_allowed(375, setup)));
    CHECK(ok >= objective.paid_evaluations());
  }
}

TEST_CASE("the call cap stops a search that only hits the cache") {
  ConstantEvaluator ev(0.5);
  EvaluationArchive archive;
  BudgetLedger ledger(100);
  BudgetedObjective objective(Setup::OneFold, make_split_plan(Setup::OneFold, SeedPool::search_default(), 0), ev,
                              archive, ledger, 3);
  const Genotype g;
  objective.evaluate(g);
  objective.evaluate(g);
  objective.evaluate(g);
  CHECK_THROWS_AS(objective.evaluate(g), BudgetExhausted);
  CHECK(ledger.consumed() == 1);
}

TEST_CASE("archive replay rebuilds the same state") {
  SyntheticBenchmark bench(SyntheticBenchmarkParams{});
  EvaluationArchive archive;
  BudgetLedger ledger(200);
  const auto plan = make_split_plan(Setup::CV, SeedPool::search_default(), 4);
  SplitMix64 rng(9);
  for (int i = 0; i < 30; ++i) evaluate_fitness(random_genotype(rng), Setup::CV, plan, bench, archive, ledger);

  std::stringstream log(archive.log_text());
  EvaluationArchive rebuilt;
  EvaluationArchive::replay(log, rebuilt);
  CHECK(rebuilt.summary_report() == archive.summary_report());
  CHECK(rebuilt.log_text() == archive.log_text());
  CHECK(rebuilt.training_count() == archive.training_count());

  std::stringstream broken("{\"genotype\":[1,2]}\n");
  EvaluationArchive sink;
  CHECK_THROWS_AS(EvaluationArchive::replay(broken, sink), std::invalid_argument);
}

TEST_CASE("archive log follows the record schema") {
  ConstantEvaluator ev(0.25);
  EvaluationArchive archive;
  BudgetLedger ledger(5);
  evaluate_fitness(topo_first(1), Setup::OneFold, make_split_plan(Setup::OneFold, SeedPool::search_default(), 0), ev,
                   archive, ledger);
  std::istringstream lines(archive.log_text());
  std::string training, fitness;
  std::getline(lines, training);
  std::getline(lines, fitness);
  CHECK(training.starts_with(R"({"genotype":[1,0,0,0,0,0,0,0,0,0,0,0,2,2,2,2,2,2,2,2,2,2,2,2],"repaired":)"));
  CHECK(training.find(R"("score":0.25,"training_index":1})") != std::string::npos);
  CHECK(fitness.find(R"("setup":"1fold","fitness":0.25,"eval_index":1})") != std::string::npos);
}

TEST_CASE("independent quality uses the holdout units only") {
  SyntheticBenchmark noisy(SyntheticBenchmarkParams{});
  const auto holdout = make_holdout_plan(SeedPool::holdout_default(), SeedPool::search_default());
  SplitMix64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const Genotype g = random_genotype(rng);
    double sum = 0.0;
    std::vector<TrainingUnit> units = holdout.units;
    std::sort(units.begin(), units.end());
    for (const auto& u : units) sum += noisy.noisy_score(repair(g), u);
    CHECK(independent_quality(g, noisy, holdout) == doctest::Approx(sum / 15).epsilon(1e-15));
    CHECK(independent_quality(g, noisy, holdout) == independent_quality(g, noisy, holdout));
  }

  SyntheticBenchmark clean(quiet());
  EvaluationArchive archive;
  BudgetLedger ledger(15);
  const Genotype g = random_genotype(rng);
  const double f = evaluate_fitness(g, Setup::ThreeCV, make_split_plan(Setup::ThreeCV, SeedPool::search_default(), 0),
                                    clean, archive, ledger);
  CHECK(independent_quality(g, clean, holdout) == doctest::Approx(f).epsilon(1e-15));

  EvaluationArchive cache;
  independent_quality(g, clean, holdout, &cache);
  CHECK(cache.training_count() == 15);
  independent_quality(g, clean, holdout, &cache);
  CHECK(cache.training_count() == 15);

  CHECK_THROWS_AS(independent_quality(g, clean, make_split_plan(Setup::ThreeCV, SeedPool::search_default(), 0)),
                  ConfigError);
}
