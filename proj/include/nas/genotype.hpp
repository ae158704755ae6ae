#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nas {

inline constexpr std::size_t kNumCells = 12;
inline constexpr std::size_t kNumGenes = 2 * kNumCells;
inline constexpr int kTopologyCardinality = 3;
inline constexpr int kBlockCardinality = 5;
/// Levels run 0..kMaxLevel; the stem output sits at level 0.
inline constexpr int kMaxLevel = 4;

enum class CellKind : std::uint8_t { Normal = 0, Down = 1, Up = 2 };
enum class BlockType : std::uint8_t { Identity = 0, Vgg = 1, ResNet = 2, Xception = 3, EfficientNet = 4 };

std::string_view to_string(CellKind kind);
std::string_view to_string(BlockType block);
CellKind cell_kind_from_string(std::string_view name);
BlockType block_type_from_string(std::string_view name);

/// Cardinality of flat gene index i (topology genes first, then block genes).
constexpr int gene_cardinality(std::size_t i) {
  return i < kNumCells ? kTopologyCardinality : kBlockCardinality;
}

/// One architecture: 12 topology genes followed by 12 block genes.
///
/// Any value constructed through the public interface satisfies the range
/// invariants; feasibility of the topology is a separate concern (see repair).
class Genotype {
 public:
  using Genes = std::array<std::uint8_t, kNumGenes>;

  Genotype() { genes_.fill(0); }
  /// Throws std::invalid_argument if a gene is out of range.
  explicit Genotype(const Genes& genes);
  Genotype(std::span<const int> topology, std::span<const int> blocks);

  /// Throws std::invalid_argument on wrong length or out-of-range values.
  static Genotype from_ints(std::span<const int> genes);
  /// Parses "t0,...,t11,b0,...,b11" (whitespace tolerated).
  static Genotype parse(std::string_view text);

  std::uint8_t operator[](std::size_t i) const { return genes_[i]; }
  /// Throws std::invalid_argument if value is out of range for gene i.
  void set(std::size_t i, int value);

  std::span<const std::uint8_t, kNumCells> topology() const {
    return std::span<const std::uint8_t, kNumCells>(genes_.data(), kNumCells);
  }
  std::span<const std::uint8_t, kNumCells> blocks() const {
    return std::span<const std::uint8_t, kNumCells>(genes_.data() + kNumCells, kNumCells);
  }
  const Genes& genes() const { return genes_; }
  std::vector<int> to_ints() const;
  std::string to_string() const;

  friend bool operator==(const Genotype&, const Genotype&) = default;
  friend auto operator<=>(const Genotype&, const Genotype&) = default;

 private:
  Genes genes_;
};

struct GenotypeHash {
  std::size_t operator()(const Genotype& g) const noexcept;
};

struct LevelTrace {
  std::vector<int> levels;
  std::vector<std::size_t> infeasible_positions;

  bool feasible() const { return infeasible_positions.empty(); }
};

/// Greedy left-to-right level trace from l_{-1} = 0. An illegal move is
/// recorded and treated as normal so the trace can continue.
LevelTrace decode_levels(std::span<const std::uint8_t> topology_genes);
LevelTrace decode_levels(std::span<const int> topology_genes);

/// Replaces every illegal down/up gene of the greedy trace with normal.
Genotype repair(const Genotype& genotype);
bool is_feasible(const Genotype& genotype);

using SkipEdge = std::pair<int, int>;

/// For each cell i, at most one edge (j, i) from the latest j <= i-2 whose
/// output level equals cell i's input level. The stem is never a source.
std::vector<SkipEdge> derive_skips(const LevelTrace& trace);

/// Deterministic splitmix64 stream; portable across implementations.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()();
  /// Uniform double in [0, 1) from the top 53 bits.
  double uniform();
  /// Value in [0, n) by modulo reduction.
  std::uint64_t below(std::uint64_t n) { return (*this)() % n; }

 private:
  std::uint64_t state_;
};

/// Uniform over the raw space 3^12 x 5^12.
Genotype random_genotype(SplitMix64& rng);

/// Number of topology vectors of length n with no infeasible position,
/// by dynamic programming over (position, level).
std::uint64_t count_feasible_topologies(std::size_t n = kNumCells, int max_level = kMaxLevel);

}  // namespace nas
