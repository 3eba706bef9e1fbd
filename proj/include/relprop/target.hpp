#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "relprop/graph.hpp"

namespace relprop {

enum class TargetMode { Segmentation, Detection };

// Spatial region of a segmentation head, one byte per pixel (0/1).
struct Region {
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::uint8_t> mask;

  bool at(std::int64_t y, std::int64_t x) const {
    return mask[static_cast<std::size_t>(y * w + x)] != 0;
  }
  std::int64_t count() const;
};

// What to explain: a class logit summed over a region of a segmentation
// head, or a single class logit at one cell of a detection head.
struct TargetSpec {
  std::string head;
  TargetMode mode = TargetMode::Segmentation;
  int class_index = 0;
  // Segmentation: nullopt means "use the predicted region of class_index".
  std::optional<Region> region;
  // Detection: (y, x) grid cell; must be set before selection.
  std::optional<std::pair<std::int64_t, std::int64_t>> cell;
};

// Fills in the predicted-region default (argmax class == class_index) for
// segmentation targets; checks indices for detection targets.
TargetSpec resolve_target(const ForwardTape& tape, const TargetSpec& target);

struct SelectedScalar {
  double value = 0.0;
  Tensor seed;  // head-shaped; logit values on the region, zero elsewhere
};

// The explained scalar and the LRP seed. The seed carries the logit values
// themselves so total initial relevance equals the scalar.
SelectedScalar select_scalar(const ForwardTape& tape, const TargetSpec& target);

// Indicator seed (1 on the region / cell) for gradient backpropagation of
// the same scalar.
Tensor seed_gradient(const ForwardTape& tape, const TargetSpec& target);

// Preferred explanation head: "seg", else "cls", else the single declared
// output; ConfigError when the choice is ambiguous.
std::string default_head(const Graph& graph);

// Cell of the strongest objectness logit, as (y, x) on the grid.
std::pair<std::int64_t, std::int64_t> argmax_cell(const Tensor& obj_map);

// Fills in every unspecified part of a target: head via default_head, mode
// inferred from the head name (seg -> segmentation, obj/cls/box ->
// detection, a given cell forces detection), segmentation class 1,
// detection cell by objectness argmax and class by the cell's strongest
// logit ("cls" head) or 0. The tape supplies the argmax values; it may be
// null when no default depends on activations (ConfigError otherwise).
TargetSpec default_target(
    const Graph& graph, const ForwardTape* tape,
    const std::optional<std::string>& head,
    std::optional<TargetMode> mode = std::nullopt,
    std::optional<int> class_index = std::nullopt,
    std::optional<std::pair<std::int64_t, std::int64_t>> cell = std::nullopt,
    std::optional<Region> region = std::nullopt);

inline TargetSpec default_target(
    const ForwardTape& tape, const std::optional<std::string>& head,
    std::optional<TargetMode> mode = std::nullopt,
    std::optional<int> class_index = std::nullopt,
    std::optional<std::pair<std::int64_t, std::int64_t>> cell = std::nullopt,
    std::optional<Region> region = std::nullopt) {
  return default_target(*tape.graph, &tape, head, mode, class_index, cell,
                        std::move(region));
}

}  // namespace relprop
