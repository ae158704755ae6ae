#include "nas/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace nas {

using json = nlohmann::ordered_json;

std::string_view to_string(Setup setup) {
  switch (setup) {
    case Setup::OneFold: return "1fold";
    case Setup::CV: return "cv";
    case Setup::ThreeCV: return "3cv";
  }
  return "?";
}

Setup setup_from_string(std::string_view name) {
  if (name == "1fold") return Setup::OneFold;
  if (name == "cv") return Setup::CV;
  if (name == "3cv") return Setup::ThreeCV;
  throw ConfigError("unknown setup '" + std::string(name) + "' (expected 1fold, cv or 3cv)");
}

int trainings_per_evaluation(Setup setup) {
  switch (setup) {
    case Setup::OneFold: return 1;
    case Setup::CV: return kFoldsPerCv;
    case Setup::ThreeCV: return 3 * kFoldsPerCv;
  }
  return 1;
}

long long evaluations_allowed(long long budget, Setup setup) {
  if (budget < 0) throw std::invalid_argument("budget must be non-negative");
  return budget / trainings_per_evaluation(setup);
}

SeedPool SeedPool::search_default() {
  SeedPool pool;
  for (int p = 0; p < 10; ++p) pool.partitionings.push_back(p);
  for (int s = 0; s < 1000; ++s) pool.seeds.push_back(s);
  return pool;
}

SeedPool SeedPool::holdout_default() {
  SeedPool pool;
  for (int p = 1000; p < 1003; ++p) pool.partitionings.push_back(p);
  for (int s = 100000; s < 100015; ++s) pool.seeds.push_back(s);
  return pool;
}

bool pools_overlap(const SeedPool& a, const SeedPool& b) {
  const std::set<int> pa(a.partitionings.begin(), a.partitionings.end());
  const std::set<int> sa(a.seeds.begin(), a.seeds.end());
  return std::any_of(b.partitionings.begin(), b.partitionings.end(), [&](int p) { return pa.contains(p); }) ||
         std::any_of(b.seeds.begin(), b.seeds.end(), [&](int s) { return sa.contains(s); });
}

namespace {

std::vector<int> distinct_sorted(const std::vector<int>& values) {
  std::vector<int> out = values;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Fisher-Yates with modulo draws so the permutation is portable.
void portable_shuffle(std::vector<int>& values, SplitMix64& rng) {
  for (std::size_t i = values.size(); i > 1; --i) std::swap(values[i - 1], values[rng.below(i)]);
}

}  // namespace

SplitPlan make_split_plan(Setup setup, const SeedPool& pool, std::uint64_t rng_seed, PoolRole role) {
  std::vector<int> partitionings = distinct_sorted(pool.partitionings);
  std::vector<int> seeds = distinct_sorted(pool.seeds);
  if (partitionings.size() < 3) throw ConfigError("seed pool needs at least 3 distinct partitioning ids");
  if (seeds.size() < 15) throw ConfigError("seed pool needs at least 15 distinct seeds");

  SplitMix64 rng(rng_seed);
  portable_shuffle(partitionings, rng);
  portable_shuffle(seeds, rng);

  SplitPlan plan;
  plan.role = role;
  const int n_partitionings = setup == Setup::ThreeCV ? 3 : 1;
  const int n_folds = setup == Setup::OneFold ? 1 : kFoldsPerCv;
  for (int p = 0; p < n_partitionings; ++p)
    for (int f = 0; f < n_folds; ++f)
      plan.units.push_back({partitionings[static_cast<std::size_t>(p)], f,
                            seeds[static_cast<std::size_t>(p * kFoldsPerCv + f)]});
  return plan;
}

SplitPlan make_holdout_plan(const SeedPool& holdout_pool, const SeedPool& search_pool, std::uint64_t rng_seed) {
  if (pools_overlap(holdout_pool, search_pool))
    throw ConfigError("holdout pool shares partitionings or seeds with the search pool");
  return make_split_plan(Setup::ThreeCV, holdout_pool, rng_seed, PoolRole::Holdout);
}

BudgetLedger::BudgetLedger(long long budget) : budget_(budget) {
  if (budget < 0) throw std::invalid_argument("budget must be non-negative");
}

long long BudgetLedger::consumed() const {
  std::lock_guard lock(mutex_);
  return consumed_;
}

long long BudgetLedger::remaining() const {
  std::lock_guard lock(mutex_);
  return budget_ - consumed_;
}

bool BudgetLedger::try_consume(long long n) {
  std::lock_guard lock(mutex_);
  if (n < 0 || consumed_ + n > budget_) return false;
  consumed_ += n;
  return true;
}

std::optional<double> EvaluationArchive::lookup(const Genotype& repaired, const TrainingUnit& unit) const {
  std::lock_guard lock(mutex_);
  const auto it = scores_.find(Key{repaired, unit});
  if (it == scores_.end()) return std::nullopt;
  return it->second;
}

void EvaluationArchive::record_training(const Genotype& raw, const Genotype& repaired, const TrainingUnit& unit,
                                        double score) {
  if (!(score >= 0.0 && score <= 1.0)) throw std::invalid_argument("training score outside [0, 1]");
  std::lock_guard lock(mutex_);
  const auto [it, inserted] = scores_.emplace(Key{repaired, unit}, score);
  if (!inserted) throw std::invalid_argument("training unit already recorded");
  const auto index = static_cast<long long>(trainings_.size()) + 1;
  trainings_.push_back({raw, repaired, unit, score, index});
  events_.push_back({true, trainings_.size() - 1});
}

void EvaluationArchive::record_fitness(const Genotype& raw, Setup setup, double fitness) {
  std::lock_guard lock(mutex_);
  fitness_by_raw_[raw][setup] = fitness;
  const auto index = static_cast<long long>(fitness_.size()) + 1;
  fitness_.push_back({raw, setup, fitness, index});
  events_.push_back({false, fitness_.size() - 1});
}

std::size_t EvaluationArchive::training_count() const {
  std::lock_guard lock(mutex_);
  return trainings_.size();
}

std::size_t EvaluationArchive::fitness_count() const {
  std::lock_guard lock(mutex_);
  return fitness_.size();
}

std::vector<TrainingRecord> EvaluationArchive::training_records() const {
  std::lock_guard lock(mutex_);
  return trainings_;
}

std::vector<FitnessRecord> EvaluationArchive::fitness_records() const {
  std::lock_guard lock(mutex_);
  return fitness_;
}

std::optional<double> EvaluationArchive::fitness_of(const Genotype& raw, Setup setup) const {
  std::lock_guard lock(mutex_);
  const auto it = fitness_by_raw_.find(raw);
  if (it == fitness_by_raw_.end()) return std::nullopt;
  const auto jt = it->second.find(setup);
  if (jt == it->second.end()) return std::nullopt;
  return jt->second;
}

void EvaluationArchive::write_log(std::ostream& out) const {
  std::lock_guard lock(mutex_);
  for (const Event& e : events_) {
    json line;
    if (e.is_training) {
      const TrainingRecord& r = trainings_[e.index];
      line["genotype"] = r.genotype.to_ints();
      line["repaired"] = r.repaired.to_ints();
      line["partitioning"] = r.unit.partitioning;
      line["fold"] = r.unit.fold;
      line["seed"] = r.unit.seed;
      line["score"] = r.score;
      line["training_index"] = r.training_index;
    } else {
      const FitnessRecord& r = fitness_[e.index];
      line["genotype"] = r.genotype.to_ints();
      line["setup"] = to_string(r.setup);
      line["fitness"] = r.fitness;
      line["eval_index"] = r.eval_index;
    }
    out << line.dump() << '\n';
  }
}

std::string EvaluationArchive::log_text() const {
  std::ostringstream out;
  write_log(out);
  return out.str();
}

void EvaluationArchive::replay(std::istream& in, EvaluationArchive& into) {
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    try {
      const json line = json::parse(text);
      const Genotype raw = Genotype::from_ints(line.at("genotype").get<std::vector<int>>());
      if (line.contains("repaired")) {
        const Genotype repaired = Genotype::from_ints(line.at("repaired").get<std::vector<int>>());
        const TrainingUnit unit{line.at("partitioning").get<int>(), line.at("fold").get<int>(),
                                line.at("seed").get<int>()};
        into.record_training(raw, repaired, unit, line.at("score").get<double>());
      } else {
        into.record_fitness(raw, setup_from_string(line.at("setup").get<std::string>()),
                            line.at("fitness").get<double>());
      }
    } catch (const json::exception& e) {
      throw std::invalid_argument("archive line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw std::invalid_argument("archive line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::string EvaluationArchive::summary_report() const {
  std::lock_guard lock(mutex_);
  std::ostringstream out;
  out.precision(17);
  out << "trainings " << trainings_.size() << "\nfitness_records " << fitness_.size() << '\n';
  for (const auto& [key, score] : scores_) {
    out << key.repaired.to_string() << ' ' << key.unit.partitioning << ' ' << key.unit.fold << ' '
        << key.unit.seed << ' ' << score << '\n';
  }
  std::map<std::string, std::map<Setup, double>> by_raw;
  for (const auto& [raw, per_setup] : fitness_by_raw_) by_raw[raw.to_string()] = per_setup;
  for (const auto& [raw, per_setup] : by_raw)
    for (const auto& [setup, fitness] : per_setup) out << raw << ' ' << to_string(setup) << ' ' << fitness << '\n';
  return out.str();
}

std::vector<double> UnitEvaluator::score_batch(const Genotype& repaired, std::span<const TrainingUnit> units) {
  std::vector<double> out;
  out.reserve(units.size());
  for (const auto& unit : units) out.push_back(score(repaired, unit));
  return out;
}

namespace {

double mean_sorted_by_unit(std::vector<std::pair<TrainingUnit, double>> scored) {
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double sum = 0.0;
  for (const auto& [unit, s] : scored) sum += s;
  return sum / static_cast<double>(scored.size());
}

double clamp_score(double s) {
  if (std::isnan(s)) throw std::domain_error("evaluator returned NaN");
  return std::clamp(s, 0.0, 1.0);
}

// Scores every unit of the plan, filling misses through the evaluator.
// The ledger (if any) is charged only after all misses were scored.
std::vector<std::pair<TrainingUnit, double>> score_plan(const Genotype& raw, const Genotype& repaired,
                                                        const SplitPlan& plan, UnitEvaluator& evaluator,
                                                        EvaluationArchive* archive, BudgetLedger* ledger) {
  std::vector<std::pair<TrainingUnit, double>> scored;
  std::vector<TrainingUnit> missing;
  for (const auto& unit : plan.units) {
    if (archive) {
      if (const auto hit = archive->lookup(repaired, unit)) {
        scored.emplace_back(unit, *hit);
        continue;
      }
    }
    missing.push_back(unit);
  }
  if (ledger && static_cast<long long>(missing.size()) > ledger->remaining()) {
    throw BudgetExhausted("evaluation needs " + std::to_string(missing.size()) + " trainings, " +
                          std::to_string(ledger->remaining()) + " remain");
  }
  if (!missing.empty()) {
    std::vector<double> fresh = evaluator.score_batch(repaired, missing);
    if (fresh.size() != missing.size()) throw std::logic_error("evaluator returned wrong batch size");
    for (double& s : fresh) s = clamp_score(s);
    if (ledger && !ledger->try_consume(static_cast<long long>(missing.size())))
      throw BudgetExhausted("budget consumed concurrently");
    std::vector<std::pair<TrainingUnit, double>> ordered;
    for (std::size_t i = 0; i < missing.size(); ++i) ordered.emplace_back(missing[i], fresh[i]);
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [unit, s] : ordered) {
      if (archive) archive->record_training(raw, repaired, unit, s);
      scored.emplace_back(unit, s);
    }
  }
  return scored;
}

}  // namespace

std::size_t uncached_units(const Genotype& genotype, const SplitPlan& plan, const EvaluationArchive& archive) {
  const Genotype repaired = repair(genotype);
  return static_cast<std::size_t>(std::count_if(plan.units.begin(), plan.units.end(), [&](const TrainingUnit& u) {
    return !archive.lookup(repaired, u).has_value();
  }));
}

double evaluate_fitness(const Genotype& genotype, Setup setup, const SplitPlan& plan, UnitEvaluator& evaluator,
                        EvaluationArchive& archive, BudgetLedger& ledger) {
  if (plan.units.empty()) throw std::invalid_argument("empty split plan");
  const Genotype repaired = repair(genotype);
  const double fitness = mean_sorted_by_unit(score_plan(genotype, repaired, plan, evaluator, &archive, &ledger));
  archive.record_fitness(genotype, setup, fitness);
  return fitness;
}

BudgetedObjective::BudgetedObjective(Setup setup, SplitPlan plan, UnitEvaluator& evaluator,
                                     EvaluationArchive& archive, BudgetLedger& ledger, std::size_t max_calls)
    : setup_(setup),
      plan_(std::move(plan)),
      evaluator_(evaluator),
      archive_(archive),
      ledger_(ledger),
      max_calls_(max_calls) {}

double BudgetedObjective::evaluate(const Genotype& genotype) {
  if (calls_ >= max_calls_) throw BudgetExhausted("call cap reached");
  const long long before = ledger_.consumed();
  const double fitness = evaluate_fitness(genotype, setup_, plan_, evaluator_, archive_, ledger_);
  ++calls_;
  if (ledger_.consumed() > before) ++paid_;
  return fitness;
}

double independent_quality(const Genotype& genotype, UnitEvaluator& evaluator, const SplitPlan& holdout_plan,
                           EvaluationArchive* cache) {
  if (holdout_plan.role != PoolRole::Holdout) throw ConfigError("independent quality needs a holdout plan");
  if (holdout_plan.units.empty()) throw std::invalid_argument("empty holdout plan");
  const Genotype repaired = repair(genotype);
  return mean_sorted_by_unit(score_plan(genotype, repaired, holdout_plan, evaluator, cache, nullptr));
}

}  // namespace nas
