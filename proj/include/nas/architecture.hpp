#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nas/genotype.hpp"

namespace nas {

struct TensorShape {
  int channels = 0;
  int width = 0;
  int height = 0;

  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

/// Feature-map shape at a level: (D * 2^l, W' / 2^l, H' / 2^l).
TensorShape shape_at_level(int level, int stem_channels, int width, int height);

struct CellSpec {
  int index = 0;
  CellKind kind = CellKind::Normal;
  BlockType block = BlockType::Identity;
  int in_level = 0;
  int out_level = 0;
  std::optional<int> skip_from;
  /// "none", "conv_k3_s2" (down) or "transpose_conv_k3_s2" (up).
  std::string resampling;
  TensorShape output_shape;

  friend bool operator==(const CellSpec&, const CellSpec&) = default;
};

struct ArchitectureGraph {
  std::vector<CellSpec> cells;
  std::vector<SkipEdge> skip_edges;
  int stem_channels = 32;
  int input_width = 128;
  int input_height = 128;

  friend bool operator==(const ArchitectureGraph&, const ArchitectureGraph&) = default;
};

/// Repairs the genotype, then decodes cells, skips and shapes. Identity
/// blocks keep the resampling implied by their topology gene.
ArchitectureGraph build_graph(const Genotype& genotype, int stem_channels = 32, int width = 128,
                              int height = 128);

/// Canonical compact JSON; identical graphs give identical bytes.
std::string serialize_graph(const ArchitectureGraph& graph);
/// Throws std::invalid_argument on schema violations.
ArchitectureGraph parse_graph(std::string_view text);

}  // namespace nas
