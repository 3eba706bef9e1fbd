#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "relprop/lrp.hpp"
#include "relprop/target.hpp"

namespace relprop {

// Per-channel relevance sums at one layer: one value per feature map.
struct ConceptVector {
  std::string sample_id;
  std::string layer_id;
  std::vector<double> values;
  TargetSpec target;
};

// One dataset sample's concept vector plus, per channel, the spatial
// argmax of relevance on that channel's map (row-major first maximum).
struct ConceptSample {
  std::string sample_id;
  ConceptVector vector;
  std::vector<std::pair<std::int64_t, std::int64_t>> argmax;  // (y, x)
};

struct ReferenceEntry {
  std::string sample_id;
  double value = 0.0;
  std::int64_t y = 0;  // argmax in the layer's grid
  std::int64_t x = 0;
};

// Top-k reference samples for one (layer, channel), sorted descending by
// concept relevance; ties resolve to the smaller sample id.
struct ReferenceSet {
  std::string layer_id;
  std::int64_t channel = 0;
  std::vector<ReferenceEntry> entries;
};

// Crop window centered on a point, shifted (not shrunk) at the borders;
// only smaller images yield a smaller window.
struct CropRect {
  std::int64_t y0 = 0;
  std::int64_t x0 = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
};

ConceptVector concept_vector(const RelevanceTape& tape,
                             const std::string& layer_id);

ConceptSample concept_sample(const RelevanceTape& tape,
                             const std::string& layer_id,
                             const std::string& sample_id);

// Input-space relevance with the backward pass restricted to `channels`
// of `layer_id`; the graph must have exactly one input.
Tensor conditional_heatmap(const ForwardTape& tape,
                           const std::string& layer_id,
                           const std::vector<std::int64_t>& channels,
                           const std::map<std::string, Tensor>& seeds,
                           const RuleAssignment& assignment);

// Channel-summed (1,1,H,W) view of an input relevance tensor.
Tensor flatten_heatmap(const Tensor& relevance);

ReferenceSet relmax_references(std::span<const ConceptSample> run,
                               const std::string& layer_id,
                               std::int64_t channel, int k);

CropRect crop_around(std::int64_t cy, std::int64_t cx, std::int64_t img_h,
                     std::int64_t img_w, std::int64_t size = 16);

// Diverging-colormap PNG of a (1,1,H,W) relevance map, symmetrically
// normalized by max |R|; zero maps to the neutral midpoint.
void render_heatmap(const Tensor& map2d, const std::filesystem::path& out);

}  // namespace relprop
