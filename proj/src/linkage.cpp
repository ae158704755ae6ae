#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "nas/search.hpp"

namespace nas {

double mutual_information(std::span<const Genotype> population, std::size_t i, std::size_t j) {
  if (population.empty()) return 0.0;
  constexpr int kMaxCard = kBlockCardinality;
  std::array<std::array<double, kMaxCard>, kMaxCard> joint{};
  std::array<double, kMaxCard> pi{};
  std::array<double, kMaxCard> pj{};
  const double w = 1.0 / static_cast<double>(population.size());
  for (const auto& g : population) {
    joint[g[i]][g[j]] += w;
    pi[g[i]] += w;
    pj[g[j]] += w;
  }
  double mi = 0.0;
  for (int a = 0; a < kMaxCard; ++a)
    for (int b = 0; b < kMaxCard; ++b)
      if (joint[a][b] > 0.0) mi += joint[a][b] * std::log(joint[a][b] / (pi[a] * pj[b]));
  return std::max(mi, 0.0);
}

LinkageModel learn_linkage_tree(std::span<const Genotype> population) {
  LinkageModel model;
  for (std::size_t i = 0; i < kNumGenes; ++i) model.fos.push_back({i});

  const bool degenerate = population.size() < 2 ||
                          std::all_of(population.begin(), population.end(),
                                      [&](const Genotype& g) { return g == population.front(); });
  if (degenerate) return model;

  std::array<std::array<double, kNumGenes>, kNumGenes> mi{};
  for (std::size_t i = 0; i < kNumGenes; ++i)
    for (std::size_t j = i + 1; j < kNumGenes; ++j) mi[i][j] = mi[j][i] = mutual_information(population, i, j);

  // Active clusters refer to fos entries; similarity is UPGMA (average linkage).
  std::vector<std::size_t> active(kNumGenes);
  for (std::size_t i = 0; i < kNumGenes; ++i) active[i] = i;
  std::vector<std::vector<double>> sim(kNumGenes, std::vector<double>(kNumGenes, 0.0));
  for (std::size_t i = 0; i < kNumGenes; ++i)
    for (std::size_t j = 0; j < kNumGenes; ++j) sim[i][j] = mi[i][j];

  while (active.size() > 1) {
    std::size_t best_a = 0;
    std::size_t best_b = 1;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < active.size(); ++a) {
      for (std::size_t b = a + 1; b < active.size(); ++b) {
        const double s = sim[active[a]][active[b]];
        if (s > best) {
          best = s;
          best_a = a;
          best_b = b;
        }
      }
    }
    const std::size_t ca = active[best_a];
    const std::size_t cb = active[best_b];
    std::vector<std::size_t> merged = model.fos[ca];
    merged.insert(merged.end(), model.fos[cb].begin(), model.fos[cb].end());
    std::sort(merged.begin(), merged.end());

    const std::size_t id = model.fos.size();
    const auto na = static_cast<double>(model.fos[ca].size());
    const auto nb = static_cast<double>(model.fos[cb].size());
    for (auto& row : sim) row.push_back(0.0);
    sim.emplace_back(sim.size() + 1, 0.0);
    for (std::size_t c : active) {
      if (c == ca || c == cb) continue;
      const double s = (na * sim[ca][c] + nb * sim[cb][c]) / (na + nb);
      sim[id][c] = sim[c][id] = s;
    }
    model.fos.push_back(std::move(merged));

    active.erase(active.begin() + static_cast<std::ptrdiff_t>(best_b));
    active[best_a] = id;
  }
  model.fos.pop_back();  // root
  return model;
}

bool gom_step(Solution& solution, const LinkageModel& model, std::span<const Solution> donors,
              const CandidateEvaluator& evaluate, SplitMix64& rng) {
  if (donors.empty()) return false;
  const double initial = solution.fitness;
  std::vector<std::size_t> order(model.fos.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  for (std::size_t idx : order) {
    const auto& subset = model.fos[idx];
    const Solution& donor = donors[rng.below(donors.size())];
    Genotype candidate = solution.genotype;
    for (std::size_t gene : subset) candidate.set(gene, donor.genotype[gene]);
    if (candidate == solution.genotype) continue;
    const auto f = evaluate(candidate);
    if (f && *f >= solution.fitness) {
      solution.genotype = candidate;
      solution.fitness = *f;
    }
  }
  return solution.fitness > initial;
}

}  // namespace nas
