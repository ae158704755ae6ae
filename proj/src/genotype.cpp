#include "nas/genotype.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <stdexcept>

namespace nas {

namespace {

constexpr std::string_view kKindNames[] = {"normal", "down", "up"};
constexpr std::string_view kBlockNames[] = {"identity", "vgg", "resnet", "xception", "efficientnet"};

void check_gene(std::size_t i, int value) {
  if (i >= kNumGenes) throw std::invalid_argument("gene index out of range");
  if (value < 0 || value >= gene_cardinality(i)) {
    throw std::invalid_argument("gene " + std::to_string(i) + " value " + std::to_string(value) +
                                " out of range");
  }
}

template <typename Int>
LevelTrace decode_levels_impl(std::span<const Int> genes) {
  LevelTrace trace;
  trace.levels.reserve(genes.size());
  int level = 0;
  for (std::size_t i = 0; i < genes.size(); ++i) {
    const int gene = static_cast<int>(genes[i]);
    if (gene < 0 || gene >= kTopologyCardinality) throw std::invalid_argument("topology gene out of range");
    int next = level;
    if (gene == static_cast<int>(CellKind::Down)) next = level + 1;
    if (gene == static_cast<int>(CellKind::Up)) next = level - 1;
    if (next < 0 || next > kMaxLevel) {
      trace.infeasible_positions.push_back(i);
      next = level;
    }
    level = next;
    trace.levels.push_back(level);
  }
  return trace;
}

}  // namespace

std::string_view to_string(CellKind kind) { return kKindNames[static_cast<int>(kind)]; }
std::string_view to_string(BlockType block) { return kBlockNames[static_cast<int>(block)]; }

CellKind cell_kind_from_string(std::string_view name) {
  for (int i = 0; i < 3; ++i)
    if (kKindNames[i] == name) return static_cast<CellKind>(i);
  throw std::invalid_argument("unknown cell kind: " + std::string(name));
}

BlockType block_type_from_string(std::string_view name) {
  for (int i = 0; i < 5; ++i)
    if (kBlockNames[i] == name) return static_cast<BlockType>(i);
  throw std::invalid_argument("unknown block type: " + std::string(name));
}

Genotype::Genotype(const Genes& genes) : genes_(genes) {
  for (std::size_t i = 0; i < kNumGenes; ++i) check_gene(i, genes_[i]);
}

Genotype::Genotype(std::span<const int> topology, std::span<const int> blocks) {
  if (topology.size() != kNumCells || blocks.size() != kNumCells)
    throw std::invalid_argument("genotype needs 12 topology and 12 block genes");
  for (std::size_t i = 0; i < kNumCells; ++i) {
    set(i, topology[i]);
    set(kNumCells + i, blocks[i]);
  }
}

Genotype Genotype::from_ints(std::span<const int> genes) {
  if (genes.size() != kNumGenes)
    throw std::invalid_argument("genotype needs 24 genes, got " + std::to_string(genes.size()));
  return Genotype(genes.first(kNumCells), genes.subspan(kNumCells));
}

Genotype Genotype::parse(std::string_view text) {
  std::vector<int> values;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    std::string_view field = text.substr(pos, comma - pos);
    while (!field.empty() && std::isspace(static_cast<unsigned char>(field.front()))) field.remove_prefix(1);
    while (!field.empty() && std::isspace(static_cast<unsigned char>(field.back()))) field.remove_suffix(1);
    int value = 0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size())
      throw std::invalid_argument("malformed genotype text: '" + std::string(text) + "'");
    values.push_back(value);
    pos = comma + 1;
  }
  return from_ints(values);
}

void Genotype::set(std::size_t i, int value) {
  check_gene(i, value);
  genes_[i] = static_cast<std::uint8_t>(value);
}

std::vector<int> Genotype::to_ints() const { return {genes_.begin(), genes_.end()}; }

std::string Genotype::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < kNumGenes; ++i) {
    if (i) out += ',';
    out += std::to_string(genes_[i]);
  }
  return out;
}

std::size_t GenotypeHash::operator()(const Genotype& g) const noexcept {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto v : g.genes()) {
    h ^= v;
    h *= 1099511628211ULL;
  }
  return static_cast<std::size_t>(h);
}

LevelTrace decode_levels(std::span<const std::uint8_t> topology_genes) {
  return decode_levels_impl(topology_genes);
}

LevelTrace decode_levels(std::span<const int> topology_genes) { return decode_levels_impl(topology_genes); }

Genotype repair(const Genotype& genotype) {
  Genotype out = genotype;
  for (std::size_t i : decode_levels(genotype.topology()).infeasible_positions) out.set(i, 0);
  return out;
}

bool is_feasible(const Genotype& genotype) { return decode_levels(genotype.topology()).feasible(); }

std::vector<SkipEdge> derive_skips(const LevelTrace& trace) {
  std::vector<SkipEdge> edges;
  const int n = static_cast<int>(trace.levels.size());
  for (int i = 2; i < n; ++i) {
    const int input_level = trace.levels[i - 1];
    for (int j = i - 2; j >= 0; --j) {
      if (trace.levels[j] == input_level) {
        edges.emplace_back(j, i);
        break;
      }
    }
  }
  return edges;
}

SplitMix64::result_type SplitMix64::operator()() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SplitMix64::uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

Genotype random_genotype(SplitMix64& rng) {
  Genotype::Genes genes{};
  for (std::size_t i = 0; i < kNumGenes; ++i)
    genes[i] = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(gene_cardinality(i))));
  return Genotype(genes);
}

std::uint64_t count_feasible_topologies(std::size_t n, int max_level) {
  std::vector<std::uint64_t> ways(static_cast<std::size_t>(max_level) + 1, 0);
  ways[0] = 1;
  for (std::size_t pos = 0; pos < n; ++pos) {
    std::vector<std::uint64_t> next(ways.size(), 0);
    for (int level = 0; level <= max_level; ++level) {
      const auto w = ways[static_cast<std::size_t>(level)];
      if (w == 0) continue;
      next[static_cast<std::size_t>(level)] += w;
      if (level + 1 <= max_level) next[static_cast<std::size_t>(level + 1)] += w;
      if (level - 1 >= 0) next[static_cast<std::size_t>(level - 1)] += w;
    }
    ways = std::move(next);
  }
  std::uint64_t total = 0;
  for (auto w : ways) total += w;
  return total;
}

}  // namespace nas
