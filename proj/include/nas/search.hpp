#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nas/genotype.hpp"
#include "nas/objective.hpp"

namespace nas {

struct Solution {
  Genotype genotype;
  double fitness = 0.0;
};

/// What one search run produced. history holds every fitness the objective
/// returned, in call order; best is the first argmax of that history.
struct SearchState {
  std::uint64_t seed = 0;
  std::vector<Solution> history;
  std::optional<Solution> best;
  std::size_t surrogate_calls = 0;

  void record(const Genotype& genotype, double fitness);
};

/// Variation-side evaluation hook. Returns nullopt when a candidate is
/// rejected without a real evaluation (surrogate screening). May throw
/// BudgetExhausted.
using CandidateEvaluator = std::function<std::optional<double>(const Genotype&)>;

SearchState random_search(Objective& objective, std::uint64_t seed);

/// One sweep over all 24 variables in a fresh random order, keeping for each
/// the best value (ties keep the current one). Returns true if the solution
/// improved. The solution is updated in place only on strict improvement.
bool hill_climb_sweep(Solution& solution, const CandidateEvaluator& evaluate, SplitMix64& rng);

/// Sweeps until a sweep brings no improvement, then restarts from a fresh
/// random genotype; stops when the objective refuses an evaluation.
SearchState local_search(Objective& objective, std::uint64_t seed);

// --- Linkage learning -------------------------------------------------------

struct LinkageModel {
  /// Family of subsets, leaves first then merges in creation order.
  std::vector<std::vector<std::size_t>> fos;
};

/// Empirical mutual information (nats) between genes i and j.
double mutual_information(std::span<const Genotype> population, std::size_t i, std::size_t j);

/// UPGMA over pairwise mutual information; the root is left out, so a
/// non-degenerate population yields 2*24 - 2 = 46 subsets. Populations
/// with fewer than two distinct genotypes yield singletons only.
LinkageModel learn_linkage_tree(std::span<const Genotype> population);

/// Gene-pool optimal mixing: for each subset in random order, copy a random
/// donor's genes there; evaluate if anything changed; keep iff the fitness
/// does not decrease. Returns true if the fitness strictly increased.
bool gom_step(Solution& solution, const LinkageModel& model, std::span<const Solution> donors,
              const CandidateEvaluator& evaluate, SplitMix64& rng);

// --- Population pyramid -----------------------------------------------------

struct PyramidOptions {
  /// Called after every iteration with the fitness values of each level.
  std::function<void(const std::vector<std::vector<double>>&)> on_iteration;
};

SearchState p3_gomea(Objective& objective, std::uint64_t seed, const PyramidOptions& options = {});

// --- Surrogate-assisted variant ---------------------------------------------

/// Distance-weighted k-nearest-neighbour regression on Hamming distance.
class KnnSurrogate {
 public:
  explicit KnnSurrogate(std::size_t k = 10) : k_(k) {}
  void add(const Genotype& genotype, double fitness);
  std::size_t size() const { return points_.size(); }
  /// Requires size() > 0. Exact matches among the neighbours are averaged;
  /// otherwise weights are 1 / distance.
  double predict(const Genotype& genotype) const;

 private:
  std::size_t k_;
  std::vector<Solution> points_;
};

struct SagomeaOptions {
  std::size_t k_neighbours = 10;
  std::size_t bootstrap_evaluations = 10;
  double min_threshold = 1e-6;
  PyramidOptions pyramid;
};

SearchState sagomea(Objective& objective, std::uint64_t seed, const SagomeaOptions& options = {});

// --- Tree-structured Parzen estimator ---------------------------------------

struct TpeDensities {
  std::array<std::vector<double>, kNumGenes> good;
  std::array<std::vector<double>, kNumGenes> bad;
  std::size_t n_good = 0;
  std::size_t n_bad = 0;
};

/// Splits history at the gamma quantile (ceil(gamma * n), at least one
/// point, ties broken by call order) and fits add-one-smoothed categorical
/// densities per gene.
TpeDensities tpe_densities(std::span<const Solution> history, double gamma);

/// Samples n_candidates genotypes from the good densities and returns the
/// one with the largest product of good/bad ratios (first on ties).
Genotype tpe_propose(std::span<const Solution> history, double gamma, int n_candidates, SplitMix64& rng);

struct TpeOptions {
  double gamma = 0.25;
  int n_candidates = 24;
  std::size_t n_startup = 20;
};

SearchState tpe_search(Objective& objective, std::uint64_t seed, const TpeOptions& options = {});

// --- Dispatch ---------------------------------------------------------------

enum class Algorithm { Random, LocalSearch, Gomea, Tpe, Sagomea };

std::string_view to_string(Algorithm algorithm);
/// Accepts "random", "ls", "gomea", "tpe", "sagomea".
Algorithm algorithm_from_string(std::string_view name);

SearchState run_search(Algorithm algorithm, Objective& objective, std::uint64_t seed);

}  // namespace nas
