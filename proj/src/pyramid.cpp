#include <algorithm>
#include <cmath>
#include <limits>

#include "nas/search.hpp"

namespace nas {

namespace {

struct Level {
  std::vector<Solution> population;
  LinkageModel model;
  bool stale = true;

  bool contains(const Genotype& g) const {
    return std::any_of(population.begin(), population.end(), [&](const Solution& s) { return s.genotype == g; });
  }
  double best() const {
    double b = -std::numeric_limits<double>::infinity();
    for (const auto& s : population) b = std::max(b, s.fitness);
    return b;
  }
  const LinkageModel& linkage() {
    if (stale) {
      std::vector<Genotype> genotypes;
      genotypes.reserve(population.size());
      for (const auto& s : population) genotypes.push_back(s.genotype);
      model = learn_linkage_tree(genotypes);
      stale = false;
    }
    return model;
  }
};

class Pyramid {
 public:
  /// Adds unless an identical genotype is already on that level.
  void add(std::size_t level, const Solution& s) {
    if (level >= levels_.size()) levels_.resize(level + 1);
    if (levels_[level].contains(s.genotype)) return;
    levels_[level].population.push_back(s);
    levels_[level].stale = true;
  }
  std::size_t size() const { return levels_.size(); }
  Level& operator[](std::size_t i) { return levels_[i]; }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    for (const auto& level : levels_) {
      auto& row = out.emplace_back();
      for (const auto& s : level.population) row.push_back(s.fitness);
    }
    return out;
  }

 private:
  std::vector<Level> levels_;
};

// One P3 iteration: a fresh solution, one hill-climbing sweep, then a climb
// through the pyramid. A solution moves up when mixing strictly improved it
// or when it beats everything on the next level, which keeps level maxima
// non-decreasing with height.
void pyramid_iteration(Pyramid& pyramid, Solution current, const CandidateEvaluator& vary, SplitMix64& rng) {
  hill_climb_sweep(current, vary, rng);
  pyramid.add(0, current);
  for (std::size_t level = 0; level < pyramid.size(); ++level) {
    const bool improved = gom_step(current, pyramid[level].linkage(), pyramid[level].population, vary, rng);
    const bool beats_next = level + 1 >= pyramid.size() || current.fitness > pyramid[level + 1].best();
    if (improved || (beats_next && level + 1 < pyramid.size())) pyramid.add(level + 1, current);
  }
}

}  // namespace

SearchState p3_gomea(Objective& objective, std::uint64_t seed, const PyramidOptions& options) {
  SearchState state;
  state.seed = seed;
  SplitMix64 rng(seed);
  const CandidateEvaluator evaluate = [&](const Genotype& g) -> std::optional<double> {
    const double f = objective.evaluate(g);
    state.record(g, f);
    return f;
  };
  Pyramid pyramid;
  try {
    for (;;) {
      Solution fresh;
      fresh.genotype = random_genotype(rng);
      fresh.fitness = *evaluate(fresh.genotype);
      pyramid_iteration(pyramid, fresh, evaluate, rng);
      if (options.on_iteration) options.on_iteration(pyramid.snapshot());
    }
  } catch (const BudgetExhausted&) {
  }
  return state;
}

void KnnSurrogate::add(const Genotype& genotype, double fitness) { points_.push_back({genotype, fitness}); }

double KnnSurrogate::predict(const Genotype& genotype) const {
  std::vector<std::pair<int, std::size_t>> by_distance;
  by_distance.reserve(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) {
    int d = 0;
    for (std::size_t g = 0; g < kNumGenes; ++g) d += points_[i].genotype[g] != genotype[g];
    by_distance.emplace_back(d, i);
  }
  const std::size_t k = std::min(k_, by_distance.size());
  std::partial_sort(by_distance.begin(), by_distance.begin() + static_cast<std::ptrdiff_t>(k), by_distance.end());

  double exact_sum = 0.0;
  std::size_t exact = 0;
  double weighted = 0.0;
  double weights = 0.0;
  for (std::size_t n = 0; n < k; ++n) {
    const auto [d, i] = by_distance[n];
    if (d == 0) {
      exact_sum += points_[i].fitness;
      ++exact;
    } else {
      const double w = 1.0 / d;
      weighted += w * points_[i].fitness;
      weights += w;
    }
  }
  if (exact > 0) return exact_sum / static_cast<double>(exact);
  return weighted / weights;
}

SearchState sagomea(Objective& objective, std::uint64_t seed, const SagomeaOptions& options) {
  SearchState state;
  state.seed = seed;
  SplitMix64 rng(seed);
  KnnSurrogate surrogate(options.k_neighbours);
  double elitist = -std::numeric_limits<double>::infinity();
  double threshold = 0.0;
  bool threshold_ready = false;
  std::size_t epoch_real = 0;

  auto real = [&](const Genotype& g) {
    const double f = objective.evaluate(g);
    state.record(g, f);
    surrogate.add(g, f);
    if (f > elitist) {
      if (threshold_ready) threshold = std::max(threshold * 0.5, options.min_threshold);
      elitist = f;
    }
    if (!threshold_ready && state.history.size() >= options.bootstrap_evaluations) {
      double mean = 0.0;
      for (const auto& s : state.history) mean += s.fitness;
      mean /= static_cast<double>(state.history.size());
      double var = 0.0;
      for (const auto& s : state.history) var += (s.fitness - mean) * (s.fitness - mean);
      threshold = std::max(std::sqrt(var / static_cast<double>(state.history.size())), options.min_threshold);
      threshold_ready = true;
    }
    return f;
  };
  const CandidateEvaluator screened = [&](const Genotype& g) -> std::optional<double> {
    if (surrogate.size() < options.bootstrap_evaluations) return real(g);
    ++state.surrogate_calls;
    if (surrogate.predict(g) < elitist - threshold) return std::nullopt;
    ++epoch_real;
    return real(g);
  };

  Pyramid pyramid;
  try {
    for (;;) {
      epoch_real = 0;
      Solution fresh;
      fresh.genotype = random_genotype(rng);
      fresh.fitness = real(fresh.genotype);
      pyramid_iteration(pyramid, fresh, screened, rng);
      if (threshold_ready && epoch_real == 0) threshold *= 2.0;
      if (options.pyramid.on_iteration) options.pyramid.on_iteration(pyramid.snapshot());
    }
  } catch (const BudgetExhausted&) {
  }
  return state;
}

}  // namespace nas
