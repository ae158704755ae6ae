#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nas/evaluation.hpp"
#include "nas/genotype.hpp"

namespace nas {

// ---------------------------------------------------------------------------
// Noise hashing
//
// The byte layout below is shared with out-of-process workers and must stay
// bit-exact:
//   tag byte ('S' seed, 'F' fold, 'I' interaction)
//   benchmark_seed as 8 bytes little-endian
//   the 24 genes of the repaired genotype, one byte each
//   then int64 little-endian ids: S -> seed; F -> partitioning, fold;
//                                 I -> partitioning, fold, seed
// hash = splitmix64_finalize(fnv1a64(bytes)); the high and low 32-bit halves
// give u1 = (hi + 0.5) / 2^32 and u2 = (lo + 0.5) / 2^32, and
// z = sqrt(-2 ln u1) * cos(2 pi u2).
// ---------------------------------------------------------------------------

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::uint64_t splitmix64_finalize(std::uint64_t x);
/// Box-Muller on the two 32-bit halves of a 64-bit hash.
double normal_from_hash(std::uint64_t hash);

enum class NoiseComponent : char { Seed = 'S', Fold = 'F', Interaction = 'I' };

std::vector<std::uint8_t> noise_key_bytes(NoiseComponent component, std::uint64_t benchmark_seed,
                                          const Genotype& genotype, const TrainingUnit& unit);
double noise_deviate(NoiseComponent component, std::uint64_t benchmark_seed, const Genotype& genotype,
                     const TrainingUnit& unit);

struct SyntheticBenchmarkParams {
  std::uint64_t benchmark_seed = 0;
  int k = 3;
  int m = 24;
  double sigma_seed = 0.010;
  double sigma_fold = 0.010;
  double sigma_interaction = 0.005;
  /// When set, the landscape mean is standardized with its exact moments
  /// under uniform genes and passed through a concave saturation;
  /// otherwise base fitness is the plain landscape mean.
  bool shaped = true;
  double center = 0.70;
  double scale = 0.0275;
  double curvature = 0.5;
};

/// NK-style additive landscape over the 24 genes with counter-hashed
/// seed/split noise on top. Pure and safe to call concurrently.
///
/// Subfunction s covers gene s mod 24 followed by k-1 further distinct genes
/// drawn with splitmix64(benchmark_seed).below(24); its table (mixed radix,
/// first gene most significant) is then filled with uniform() draws.
/// Subfunctions are generated in order.
///
/// Shaped base fitness: z = (mean - mu) / sd with mu, sd the exact mean and
/// standard deviation of the landscape mean over uniformly random genes, and
/// base = clamp(center + scale * (1 - exp(-curvature * z)) / curvature, 0, 1)
/// (center + scale * z when curvature is 0). The shaping is strictly
/// increasing, so it preserves the ranking of genotypes.
class SyntheticBenchmark final : public UnitEvaluator {
 public:
  explicit SyntheticBenchmark(SyntheticBenchmarkParams params);

  const SyntheticBenchmarkParams& params() const { return params_; }
  /// Mean of the m subfunction lookups.
  double landscape_mean(const Genotype& genotype) const;
  /// Landscape mean, shaped if configured; in [0, 1].
  double base_fitness(const Genotype& genotype) const;
  double shape(double landscape_mean) const;
  double landscape_mu() const { return mu_; }
  double landscape_sd() const { return sd_; }
  /// clamp(base + sigma_seed z1 + sigma_fold z2 + sigma_int z3, 0, 1).
  double noisy_score(const Genotype& genotype, const TrainingUnit& unit) const;

  double score(const Genotype& repaired, const TrainingUnit& unit) override { return noisy_score(repaired, unit); }

  struct Subfunction {
    std::vector<std::size_t> genes;
    std::vector<double> table;
  };
  const std::vector<Subfunction>& subfunctions() const { return subfunctions_; }

 private:
  SyntheticBenchmarkParams params_;
  std::vector<Subfunction> subfunctions_;
  double mu_ = 0.0;
  double sd_ = 0.0;
};

/// Raised by the tabular evaluator for a key it does not hold.
class MissingEntry : public std::out_of_range {
 public:
  MissingEntry(const Genotype& genotype, const TrainingUnit& unit);
  const Genotype& genotype() const { return genotype_; }
  const TrainingUnit& unit() const { return unit_; }

 private:
  Genotype genotype_;
  TrainingUnit unit_;
};

/// Precomputed scores keyed by (repaired genotype, unit), loaded from the
/// archive's training-record JSON-lines schema.
class TabularBenchmark final : public UnitEvaluator {
 public:
  TabularBenchmark() = default;
  /// Throws std::invalid_argument on malformed lines or conflicting duplicates.
  static TabularBenchmark load(std::istream& in);
  static TabularBenchmark load(const std::filesystem::path& path);
  static void write(std::ostream& out, const EvaluationArchive& archive);

  void insert(const Genotype& genotype, const TrainingUnit& unit, double score);
  /// The genotype is repaired before lookup. Throws MissingEntry.
  double lookup(const Genotype& genotype, const TrainingUnit& unit) const;
  std::size_t size() const { return table_.size(); }

  double score(const Genotype& repaired, const TrainingUnit& unit) override { return lookup(repaired, unit); }

 private:
  std::map<std::pair<Genotype, TrainingUnit>, double> table_;
};

}  // namespace nas
