#include "nas/architecture.hpp"

#include <stdexcept>

#include <json.hpp>

namespace nas {

using json = nlohmann::ordered_json;

TensorShape shape_at_level(int level, int stem_channels, int width, int height) {
  return {stem_channels << level, width >> level, height >> level};
}

ArchitectureGraph build_graph(const Genotype& genotype, int stem_channels, int width, int height) {
  if (stem_channels <= 0 || width <= 0 || height <= 0)
    throw std::invalid_argument("stem channels and input dims must be positive");
  const Genotype fixed = repair(genotype);
  const LevelTrace trace = decode_levels(fixed.topology());

  ArchitectureGraph graph;
  graph.stem_channels = stem_channels;
  graph.input_width = width;
  graph.input_height = height;
  graph.skip_edges = derive_skips(trace);

  int in_level = 0;
  for (std::size_t i = 0; i < kNumCells; ++i) {
    CellSpec cell;
    cell.index = static_cast<int>(i);
    cell.kind = static_cast<CellKind>(fixed.topology()[i]);
    cell.block = static_cast<BlockType>(fixed.blocks()[i]);
    cell.in_level = in_level;
    cell.out_level = trace.levels[i];
    switch (cell.kind) {
      case CellKind::Normal: cell.resampling = "none"; break;
      case CellKind::Down: cell.resampling = "conv_k3_s2"; break;
      case CellKind::Up: cell.resampling = "transpose_conv_k3_s2"; break;
    }
    cell.output_shape = shape_at_level(cell.out_level, stem_channels, width, height);
    graph.cells.push_back(std::move(cell));
    in_level = trace.levels[i];
  }
  for (const auto& [from, to] : graph.skip_edges) graph.cells[static_cast<std::size_t>(to)].skip_from = from;
  return graph;
}

std::string serialize_graph(const ArchitectureGraph& graph) {
  json cells = json::array();
  for (const auto& c : graph.cells) {
    json cell;
    cell["index"] = c.index;
    cell["kind"] = to_string(c.kind);
    cell["block"] = to_string(c.block);
    cell["in_level"] = c.in_level;
    cell["out_level"] = c.out_level;
    cell["skip_from"] = c.skip_from ? json(*c.skip_from) : json(nullptr);
    cell["resampling"] = c.resampling;
    cell["shape"] = {c.output_shape.channels, c.output_shape.width, c.output_shape.height};
    cells.push_back(std::move(cell));
  }
  json skips = json::array();
  for (const auto& [from, to] : graph.skip_edges) skips.push_back({from, to});

  json doc;
  doc["n_cells"] = graph.cells.size();
  doc["stem_channels"] = graph.stem_channels;
  doc["input_width"] = graph.input_width;
  doc["input_height"] = graph.input_height;
  doc["cells"] = std::move(cells);
  doc["skips"] = std::move(skips);
  return doc.dump();
}

ArchitectureGraph parse_graph(std::string_view text) {
  try {
    const json doc = json::parse(text);
    ArchitectureGraph graph;
    graph.stem_channels = doc.at("stem_channels").get<int>();
    graph.input_width = doc.at("input_width").get<int>();
    graph.input_height = doc.at("input_height").get<int>();
    for (const auto& c : doc.at("cells")) {
      CellSpec cell;
      cell.index = c.at("index").get<int>();
      cell.kind = cell_kind_from_string(c.at("kind").get<std::string>());
      cell.block = block_type_from_string(c.at("block").get<std::string>());
      cell.in_level = c.at("in_level").get<int>();
      cell.out_level = c.at("out_level").get<int>();
      if (!c.at("skip_from").is_null()) cell.skip_from = c.at("skip_from").get<int>();
      cell.resampling = c.at("resampling").get<std::string>();
      const auto& shape = c.at("shape");
      cell.output_shape = {shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
      graph.cells.push_back(std::move(cell));
    }
    for (const auto& e : doc.at("skips")) graph.skip_edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    if (doc.at("n_cells").get<std::size_t>() != graph.cells.size())
      throw std::invalid_argument("n_cells does not match cell list");
    return graph;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("malformed architecture graph: ") + e.what());
  }
}

}  // namespace nas
