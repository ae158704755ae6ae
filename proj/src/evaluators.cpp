#include "nas/evaluators.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>

#include <json.hpp>

namespace nas {

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64_finalize(std::uint64_t x) {
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double normal_from_hash(std::uint64_t hash) {
  const double u1 = (static_cast<double>(hash >> 32) + 0.5) * 0x1.0p-32;
  const double u2 = (static_cast<double>(hash & 0xffffffffULL) + 0.5) * 0x1.0p-32;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_i64(std::vector<std::uint8_t>& out, std::int64_t v) { put_u64(out, static_cast<std::uint64_t>(v)); }

}  // namespace

std::vector<std::uint8_t> noise_key_bytes(NoiseComponent component, std::uint64_t benchmark_seed,
                                          const Genotype& genotype, const TrainingUnit& unit) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(1 + 8 + kNumGenes + 24);
  bytes.push_back(static_cast<std::uint8_t>(component));
  put_u64(bytes, benchmark_seed);
  for (auto g : genotype.genes()) bytes.push_back(g);
  switch (component) {
    case NoiseComponent::Seed: put_i64(bytes, unit.seed); break;
    case NoiseComponent::Fold:
      put_i64(bytes, unit.partitioning);
      put_i64(bytes, unit.fold);
      break;
    case NoiseComponent::Interaction:
      put_i64(bytes, unit.partitioning);
      put_i64(bytes, unit.fold);
      put_i64(bytes, unit.seed);
      break;
  }
  return bytes;
}

double noise_deviate(NoiseComponent component, std::uint64_t benchmark_seed, const Genotype& genotype,
                     const TrainingUnit& unit) {
  return normal_from_hash(splitmix64_finalize(fnv1a64(noise_key_bytes(component, benchmark_seed, genotype, unit))));
}

namespace {

// E[f_a * f_b] over uniformly random genes, enumerating the union of both
// subfunctions' genes in mixed radix (first gene most significant).
double expected_product(const SyntheticBenchmark::Subfunction& a, const SyntheticBenchmark::Subfunction& b) {
  std::vector<std::size_t> genes = a.genes;
  for (auto g : b.genes)
    if (std::find(genes.begin(), genes.end(), g) == genes.end()) genes.push_back(g);
  std::size_t combos = 1;
  for (auto g : genes) combos *= static_cast<std::size_t>(gene_cardinality(g));

  std::vector<int> value(kNumGenes, 0);
  auto lookup = [&](const SyntheticBenchmark::Subfunction& f) {
    std::size_t index = 0;
    for (auto g : f.genes) index = index * static_cast<std::size_t>(gene_cardinality(g)) + static_cast<std::size_t>(value[g]);
    return f.table[index];
  };
  double sum = 0.0;
  for (std::size_t c = 0; c < combos; ++c) {
    std::size_t rest = c;
    for (std::size_t i = genes.size(); i-- > 0;) {
      const auto card = static_cast<std::size_t>(gene_cardinality(genes[i]));
      value[genes[i]] = static_cast<int>(rest % card);
      rest /= card;
    }
    sum += lookup(a) * lookup(b);
  }
  return sum / static_cast<double>(combos);
}

double table_mean(const SyntheticBenchmark::Subfunction& f) {
  double sum = 0.0;
  for (double v : f.table) sum += v;
  return sum / static_cast<double>(f.table.size());
}

}  // namespace

SyntheticBenchmark::SyntheticBenchmark(SyntheticBenchmarkParams params) : params_(params) {
  if (params_.k < 1 || params_.k > static_cast<int>(kNumGenes)) throw ConfigError("k must be in [1, 24]");
  if (params_.m < 1) throw ConfigError("m must be positive");
  if (params_.sigma_seed < 0 || params_.sigma_fold < 0 || params_.sigma_interaction < 0)
    throw ConfigError("noise magnitudes must be non-negative");
  if (params_.scale <= 0 || params_.curvature < 0) throw ConfigError("scale must be positive, curvature non-negative");

  SplitMix64 rng(params_.benchmark_seed);
  for (int s = 0; s < params_.m; ++s) {
    Subfunction sub;
    sub.genes.push_back(static_cast<std::size_t>(s) % kNumGenes);
    while (sub.genes.size() < static_cast<std::size_t>(params_.k)) {
      const auto g = static_cast<std::size_t>(rng.below(kNumGenes));
      if (std::find(sub.genes.begin(), sub.genes.end(), g) == sub.genes.end()) sub.genes.push_back(g);
    }
    std::size_t size = 1;
    for (auto g : sub.genes) size *= static_cast<std::size_t>(gene_cardinality(g));
    sub.table.resize(size);
    for (double& v : sub.table) v = rng.uniform();
    subfunctions_.push_back(std::move(sub));
  }

  std::vector<double> means;
  for (const auto& f : subfunctions_) means.push_back(table_mean(f));
  double mu_sum = 0.0;
  for (double m : means) mu_sum += m;
  double cov_sum = 0.0;
  for (std::size_t a = 0; a < subfunctions_.size(); ++a) {
    for (std::size_t b = 0; b < subfunctions_.size(); ++b) {
      const auto& ga = subfunctions_[a].genes;
      const bool shares = std::any_of(ga.begin(), ga.end(), [&](std::size_t g) {
        const auto& gb = subfunctions_[b].genes;
        return std::find(gb.begin(), gb.end(), g) != gb.end();
      });
      if (shares) cov_sum += expected_product(subfunctions_[a], subfunctions_[b]) - means[a] * means[b];
    }
  }
  const auto m = static_cast<double>(subfunctions_.size());
  mu_ = mu_sum / m;
  sd_ = std::sqrt(std::max(cov_sum, 0.0)) / m;
}

double SyntheticBenchmark::landscape_mean(const Genotype& genotype) const {
  double sum = 0.0;
  for (const auto& sub : subfunctions_) {
    std::size_t index = 0;
    for (auto g : sub.genes) index = index * static_cast<std::size_t>(gene_cardinality(g)) + genotype[g];
    sum += sub.table[index];
  }
  return sum / static_cast<double>(subfunctions_.size());
}

double SyntheticBenchmark::shape(double mean) const {
  if (!params_.shaped) return std::clamp(mean, 0.0, 1.0);
  const double z = sd_ > 0.0 ? (mean - mu_) / sd_ : 0.0;
  const double c = params_.curvature;
  const double lifted = c > 0.0 ? (1.0 - std::exp(-c * z)) / c : z;
  return std::clamp(params_.center + params_.scale * lifted, 0.0, 1.0);
}

double SyntheticBenchmark::base_fitness(const Genotype& genotype) const { return shape(landscape_mean(genotype)); }

double SyntheticBenchmark::noisy_score(const Genotype& genotype, const TrainingUnit& unit) const {
  double score = base_fitness(genotype);
  const auto seed = params_.benchmark_seed;
  if (params_.sigma_seed > 0) score += params_.sigma_seed * noise_deviate(NoiseComponent::Seed, seed, genotype, unit);
  if (params_.sigma_fold > 0) score += params_.sigma_fold * noise_deviate(NoiseComponent::Fold, seed, genotype, unit);
  if (params_.sigma_interaction > 0)
    score += params_.sigma_interaction * noise_deviate(NoiseComponent::Interaction, seed, genotype, unit);
  return std::clamp(score, 0.0, 1.0);
}

namespace {

std::string describe(const Genotype& g, const TrainingUnit& u) {
  return "genotype [" + g.to_string() + "] partitioning " + std::to_string(u.partitioning) + " fold " +
         std::to_string(u.fold) + " seed " + std::to_string(u.seed);
}

}  // namespace

MissingEntry::MissingEntry(const Genotype& genotype, const TrainingUnit& unit)
    : std::out_of_range("no tabular entry for " + describe(genotype, unit)), genotype_(genotype), unit_(unit) {}

void TabularBenchmark::insert(const Genotype& genotype, const TrainingUnit& unit, double score) {
  if (!(score >= 0.0 && score <= 1.0)) throw std::invalid_argument("tabular score outside [0, 1]");
  const auto [it, inserted] = table_.emplace(std::make_pair(repair(genotype), unit), score);
  if (!inserted && it->second != score)
    throw std::invalid_argument("conflicting tabular entries for " + describe(genotype, unit));
}

double TabularBenchmark::lookup(const Genotype& genotype, const TrainingUnit& unit) const {
  const Genotype repaired = repair(genotype);
  const auto it = table_.find({repaired, unit});
  if (it == table_.end()) throw MissingEntry(repaired, unit);
  return it->second;
}

TabularBenchmark TabularBenchmark::load(std::istream& in) {
  TabularBenchmark bench;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    try {
      const auto line = nlohmann::json::parse(text);
      if (!line.contains("partitioning")) continue;  // fitness records carry no unit
      const auto genes = line.contains("repaired") ? line.at("repaired") : line.at("genotype");
      const TrainingUnit unit{line.at("partitioning").get<int>(), line.at("fold").get<int>(),
                              line.at("seed").get<int>()};
      bench.insert(Genotype::from_ints(genes.get<std::vector<int>>()), unit, line.at("score").get<double>());
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("tabular line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("tabular line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return bench;
}

TabularBenchmark TabularBenchmark::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open tabular benchmark " + path.string());
  return load(in);
}

void TabularBenchmark::write(std::ostream& out, const EvaluationArchive& archive) {
  for (const auto& r : archive.training_records()) {
    nlohmann::ordered_json line;
    line["genotype"] = r.genotype.to_ints();
    line["repaired"] = r.repaired.to_ints();
    line["partitioning"] = r.unit.partitioning;
    line["fold"] = r.unit.fold;
    line["seed"] = r.unit.seed;
    line["score"] = r.score;
    line["training_index"] = r.training_index;
    out << line.dump() << '\n';
  }
}

}  // namespace nas
