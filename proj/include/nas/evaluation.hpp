#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "nas/genotype.hpp"
#include "nas/objective.hpp"

namespace nas {

/// Invalid experiment or pool configuration.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class Setup { OneFold, CV, ThreeCV };

inline constexpr int kFoldsPerCv = 5;

std::string_view to_string(Setup setup);
/// Accepts "1fold", "cv", "3cv"; throws ConfigError otherwise.
Setup setup_from_string(std::string_view name);

/// 1, 5 or 15 network trainings.
int trainings_per_evaluation(Setup setup);
/// floor(budget / trainings_per_evaluation(setup)).
long long evaluations_allowed(long long budget, Setup setup);

/// One network training slot: which data partitioning, which validation fold
/// and which initialization/training seed.
struct TrainingUnit {
  int partitioning = 0;
  int fold = 0;
  int seed = 0;

  friend bool operator==(const TrainingUnit&, const TrainingUnit&) = default;
  friend auto operator<=>(const TrainingUnit&, const TrainingUnit&) = default;
};

/// Partitioning ids and seeds a plan may draw from.
struct SeedPool {
  std::vector<int> partitionings;
  std::vector<int> seeds;

  static SeedPool search_default();
  static SeedPool holdout_default();
};

bool pools_overlap(const SeedPool& a, const SeedPool& b);

enum class PoolRole { Search, Holdout };

struct SplitPlan {
  std::vector<TrainingUnit> units;
  PoolRole role = PoolRole::Search;
};

/// Shuffles the pool with rng_seed, then assigns nested units: OneFold uses
/// (p0, f0, s0); CV extends to folds 0..4 with seeds s0..s4; ThreeCV adds
/// partitionings p1, p2 with seeds s5..s14. Throws ConfigError when the
/// pool has fewer than 3 distinct partitionings or 15 distinct seeds.
SplitPlan make_split_plan(Setup setup, const SeedPool& pool, std::uint64_t rng_seed,
                          PoolRole role = PoolRole::Search);

/// Thread-safe count of executed trainings against a fixed allowance.
class BudgetLedger {
 public:
  explicit BudgetLedger(long long budget);

  long long budget() const { return budget_; }
  long long consumed() const;
  long long remaining() const;
  /// Consumes n trainings if all of them fit; otherwise leaves the ledger untouched.
  bool try_consume(long long n);

 private:
  long long budget_;
  long long consumed_ = 0;
  mutable std::mutex mutex_;
};

struct TrainingRecord {
  Genotype genotype;
  Genotype repaired;
  TrainingUnit unit;
  double score = 0.0;
  long long training_index = 0;
};

struct FitnessRecord {
  Genotype genotype;
  Setup setup = Setup::OneFold;
  double fitness = 0.0;
  long long eval_index = 0;
};

/// Cache of executed trainings plus the fitness values handed to a search
/// algorithm. All state is derivable from the append-only event log.
class EvaluationArchive {
 public:
  EvaluationArchive() = default;
  EvaluationArchive(const EvaluationArchive&) = delete;
  EvaluationArchive& operator=(const EvaluationArchive&) = delete;

  std::optional<double> lookup(const Genotype& repaired, const TrainingUnit& unit) const;
  /// Appends a training event; throws std::invalid_argument if the score is
  /// outside [0, 1] or the key was already recorded.
  void record_training(const Genotype& raw, const Genotype& repaired, const TrainingUnit& unit, double score);
  void record_fitness(const Genotype& raw, Setup setup, double fitness);

  std::size_t training_count() const;
  std::size_t fitness_count() const;
  std::vector<TrainingRecord> training_records() const;
  std::vector<FitnessRecord> fitness_records() const;
  /// Fitness last recorded for a raw genotype under a setup.
  std::optional<double> fitness_of(const Genotype& raw, Setup setup) const;

  /// JSON-lines event log in the order events happened.
  void write_log(std::ostream& out) const;
  std::string log_text() const;
  /// Rebuilds an archive from an event log; throws std::invalid_argument on malformed lines.
  static void replay(std::istream& in, EvaluationArchive& into);

  /// Deterministic digest of the cache contents, for replay comparisons.
  std::string summary_report() const;

 private:
  struct Key {
    Genotype repaired;
    TrainingUnit unit;
    friend auto operator<=>(const Key&, const Key&) = default;
  };
  struct Event {
    bool is_training = true;
    std::size_t index = 0;
  };

  mutable std::mutex mutex_;
  std::map<Key, double> scores_;
  std::unordered_map<Genotype, std::map<Setup, double>, GenotypeHash> fitness_by_raw_;
  std::vector<TrainingRecord> trainings_;
  std::vector<FitnessRecord> fitness_;
  std::vector<Event> events_;
};

/// Source of per-unit scores in [0, 1]. Implementations may score the units
/// of one batch concurrently.
class UnitEvaluator {
 public:
  virtual ~UnitEvaluator() = default;
  virtual double score(const Genotype& repaired, const TrainingUnit& unit) = 0;
  virtual std::vector<double> score_batch(const Genotype& repaired, std::span<const TrainingUnit> units);
};

/// Repairs, scores every plan unit through the cache or the evaluator, and
/// returns the mean unit score. Rejected evaluations change nothing.
double evaluate_fitness(const Genotype& genotype, Setup setup, const SplitPlan& plan, UnitEvaluator& evaluator,
                        EvaluationArchive& archive, BudgetLedger& ledger);

/// Number of plan units not yet in the archive for this genotype.
std::size_t uncached_units(const Genotype& genotype, const SplitPlan& plan, const EvaluationArchive& archive);

/// Objective adapter handed to search algorithms. Stops the search when the
/// ledger cannot pay for the next evaluation or after max_calls calls
/// (cache hits included), whichever comes first.
class BudgetedObjective final : public Objective {
 public:
  BudgetedObjective(Setup setup, SplitPlan plan, UnitEvaluator& evaluator, EvaluationArchive& archive,
                    BudgetLedger& ledger, std::size_t max_calls);

  double evaluate(const Genotype& genotype) override;

  std::size_t calls() const { return calls_; }
  /// Evaluations that executed at least one training.
  std::size_t paid_evaluations() const { return paid_; }

 private:
  Setup setup_;
  SplitPlan plan_;
  UnitEvaluator& evaluator_;
  EvaluationArchive& archive_;
  BudgetLedger& ledger_;
  std::size_t max_calls_;
  std::size_t calls_ = 0;
  std::size_t paid_ = 0;
};

/// Mean of the 15 holdout units of the holdout plan. Never touches a search
/// ledger. When cache is given, units are looked up and stored there.
double independent_quality(const Genotype& genotype, UnitEvaluator& evaluator, const SplitPlan& holdout_plan,
                           EvaluationArchive* cache = nullptr);

/// ThreeCV plan over the holdout pool; throws ConfigError if it shares a
/// partitioning id or seed with the search pool.
SplitPlan make_holdout_plan(const SeedPool& holdout_pool, const SeedPool& search_pool, std::uint64_t rng_seed = 0);

}  // namespace nas
