#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "nas/search.hpp"

namespace nas {

TpeDensities tpe_densities(std::span<const Solution> history, double gamma) {
  if (history.empty()) throw std::invalid_argument("TPE needs a non-empty history");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in (0, 1]");

  const auto n = history.size();
  const auto n_good =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n))), 1, n);

  // Only the good/bad partition matters, so a selection suffices; ties are
  // broken by call order as a stable sort would.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto better = [&](std::size_t a, std::size_t b) {
    return history[a].fitness > history[b].fitness || (history[a].fitness == history[b].fitness && a < b);
  };
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_good - 1), order.end(), better);

  TpeDensities d;
  d.n_good = n_good;
  d.n_bad = n - n_good;
  for (std::size_t gene = 0; gene < kNumGenes; ++gene) {
    const auto card = static_cast<std::size_t>(gene_cardinality(gene));
    d.good[gene].assign(card, 1.0);
    d.bad[gene].assign(card, 1.0);
  }
  for (std::size_t r = 0; r < n; ++r) {
    const Genotype& g = history[order[r]].genotype;
    auto& counts = r < n_good ? d.good : d.bad;
    for (std::size_t gene = 0; gene < kNumGenes; ++gene) counts[gene][g[gene]] += 1.0;
  }
  for (std::size_t gene = 0; gene < kNumGenes; ++gene) {
    const auto card = static_cast<double>(gene_cardinality(gene));
    for (double& v : d.good[gene]) v /= static_cast<double>(d.n_good) + card;
    for (double& v : d.bad[gene]) v /= static_cast<double>(d.n_bad) + card;
  }
  return d;
}

Genotype tpe_propose(std::span<const Solution> history, double gamma, int n_candidates, SplitMix64& rng) {
  if (n_candidates < 1) throw std::invalid_argument("n_candidates must be positive");
  const TpeDensities d = tpe_densities(history, gamma);

  Genotype best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < n_candidates; ++c) {
    Genotype candidate;
    double score = 0.0;
    for (std::size_t gene = 0; gene < kNumGenes; ++gene) {
      const auto& l = d.good[gene];
      const double u = rng.uniform();
      double acc = 0.0;
      std::size_t v = 0;
      for (; v + 1 < l.size(); ++v) {
        acc += l[v];
        if (u < acc) break;
      }
      candidate.set(gene, static_cast<int>(v));
      score += std::log(l[v]) - std::log(d.bad[gene][v]);
    }
    if (score > best_score) {
      best_score = score;
      best = candidate;
    }
  }
  return best;
}

SearchState tpe_search(Objective& objective, std::uint64_t seed, const TpeOptions& options) {
  SearchState state;
  state.seed = seed;
  SplitMix64 rng(seed);
  try {
    for (;;) {
      const Genotype g = state.history.size() < std::max<std::size_t>(options.n_startup, 1)
                             ? random_genotype(rng)
                             : tpe_propose(state.history, options.gamma, options.n_candidates, rng);
      state.record(g, objective.evaluate(g));
    }
  } catch (const BudgetExhausted&) {
  }
  return state;
}

}  // namespace nas
