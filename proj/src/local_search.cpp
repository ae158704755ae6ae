#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "nas/search.hpp"

namespace nas {

void SearchState::record(const Genotype& genotype, double fitness) {
  history.push_back({genotype, fitness});
  if (!best || fitness > best->fitness) best = Solution{genotype, fitness};
}

namespace {

CandidateEvaluator tracking(Objective& objective, SearchState& state) {
  return [&objective, &state](const Genotype& g) -> std::optional<double> {
    const double f = objective.evaluate(g);
    state.record(g, f);
    return f;
  };
}

std::array<std::size_t, kNumGenes> shuffled_genes(SplitMix64& rng) {
  std::array<std::size_t, kNumGenes> order{};
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

}  // namespace

SearchState random_search(Objective& objective, std::uint64_t seed) {
  SearchState state;
  state.seed = seed;
  SplitMix64 rng(seed);
  const auto evaluate = tracking(objective, state);
  try {
    for (;;) evaluate(random_genotype(rng));
  } catch (const BudgetExhausted&) {
  }
  return state;
}

bool hill_climb_sweep(Solution& solution, const CandidateEvaluator& evaluate, SplitMix64& rng) {
  bool improved = false;
  for (std::size_t gene : shuffled_genes(rng)) {
    const int current = solution.genotype[gene];
    int best_value = current;
    double best_fitness = solution.fitness;
    for (int v = 0; v < gene_cardinality(gene); ++v) {
      if (v == current) continue;
      Genotype candidate = solution.genotype;
      candidate.set(gene, v);
      const auto f = evaluate(candidate);
      if (f && *f > best_fitness) {
        best_fitness = *f;
        best_value = v;
      }
    }
    if (best_value != current) {
      solution.genotype.set(gene, best_value);
      solution.fitness = best_fitness;
      improved = true;
    }
  }
  return improved;
}

SearchState local_search(Objective& objective, std::uint64_t seed) {
  SearchState state;
  state.seed = seed;
  SplitMix64 rng(seed);
  const auto evaluate = tracking(objective, state);
  try {
    for (;;) {
      Solution current;
      current.genotype = random_genotype(rng);
      current.fitness = *evaluate(current.genotype);
      while (hill_climb_sweep(current, evaluate, rng)) {
      }
    }
  } catch (const BudgetExhausted&) {
  }
  return state;
}

std::string_view to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::Random: return "random";
    case Algorithm::LocalSearch: return "ls";
    case Algorithm::Gomea: return "gomea";
    case Algorithm::Tpe: return "tpe";
    case Algorithm::Sagomea: return "sagomea";
  }
  return "?";
}

Algorithm algorithm_from_string(std::string_view name) {
  for (auto a : {Algorithm::Random, Algorithm::LocalSearch, Algorithm::Gomea, Algorithm::Tpe, Algorithm::Sagomea})
    if (to_string(a) == name) return a;
  throw std::invalid_argument("unknown algorithm '" + std::string(name) + "'");
}

SearchState run_search(Algorithm algorithm, Objective& objective, std::uint64_t seed) {
  switch (algorithm) {
    case Algorithm::Random: return random_search(objective, seed);
    case Algorithm::LocalSearch: return local_search(objective, seed);
    case Algorithm::Gomea: return p3_gomea(objective, seed);
    case Algorithm::Tpe: return tpe_search(objective, seed);
    case Algorithm::Sagomea: return sagomea(objective, seed);
  }
  throw std::invalid_argument("unknown algorithm");
}

}  // namespace nas
