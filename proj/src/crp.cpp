#include "relprop/crp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "relprop/errors.hpp"
#include "relprop/image.hpp"

namespace relprop {

ConceptVector concept_vector(const RelevanceTape& tape,
                             const std::string& layer_id) {
  const Tensor& r = tape.relevance_of(layer_id);  // throws on unknown id
  ConceptVector out;
  out.layer_id = layer_id;
  out.values = spatial_sum(r).values;
  return out;
}

ConceptSample concept_sample(const RelevanceTape& tape,
                             const std::string& layer_id,
                             const std::string& sample_id) {
  ConceptSample out;
  out.sample_id = sample_id;
  out.vector = concept_vector(tape, layer_id);
  out.vector.sample_id = sample_id;

  const Tensor& r = tape.relevance_of(layer_id);
  const Shape4& s = r.shape();
  out.argmax.resize(static_cast<std::size_t>(s.c));
  for (std::int64_t c = 0; c < s.c; ++c) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t x = 0; x < s.w; ++x) {
        if (r.at(0, c, y, x) > best) {
          best = r.at(0, c, y, x);
          out.argmax[c] = {y, x};
        }
      }
    }
  }
  return out;
}

Tensor conditional_heatmap(const ForwardTape& tape,
                           const std::string& layer_id,
                           const std::vector<std::int64_t>& channels,
                           const std::map<std::string, Tensor>& seeds,
                           const RuleAssignment& assignment) {
  const std::vector<std::string> inputs = tape.graph->input_ids();
  if (inputs.size() != 1) {
    throw ConfigError("conditional_heatmap expects a single-input graph");
  }
  ChannelCondition cond{layer_id, channels};
  LrpResult res = lrp_backward(tape, seeds, assignment, cond);
  return res.tape.relevance_of(inputs[0]);
}

Tensor flatten_heatmap(const Tensor& relevance) {
  const Shape4& s = relevance.shape();
  Tensor out(Shape4{1, 1, s.h, s.w});
  for (std::int64_t c = 0; c < s.c; ++c) {
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t x = 0; x < s.w; ++x) {
        out.at(0, 0, y, x) += relevance.at(0, c, y, x);
      }
    }
  }
  return out;
}

ReferenceSet relmax_references(std::span<const ConceptSample> run,
                               const std::string& layer_id,
                               std::int64_t channel, int k) {
  if (k < 1) throw ConfigError("reference count k must be >= 1");
  ReferenceSet set;
  set.layer_id = layer_id;
  set.channel = channel;
  for (const ConceptSample& s : run) {
    if (s.vector.layer_id != layer_id) {
      throw ConfigError("concept sample '" + s.sample_id +
                        "' was extracted at layer '" + s.vector.layer_id +
                        "', not '" + layer_id + "'");
    }
    const auto c = static_cast<std::size_t>(channel);
    if (c >= s.vector.values.size()) {
      throw ConfigError("channel " + std::to_string(channel) +
                        " out of range at layer '" + layer_id + "'");
    }
    set.entries.push_back({s.sample_id, s.vector.values[c], s.argmax[c].first,
                           s.argmax[c].second});
  }
  std::sort(set.entries.begin(), set.entries.end(),
            [](const ReferenceEntry& a, const ReferenceEntry& b) {
              if (a.value != b.value) return a.value > b.value;
              return a.sample_id < b.sample_id;
            });
  if (set.entries.size() > static_cast<std::size_t>(k)) {
    set.entries.resize(static_cast<std::size_t>(k));
  }
  return set;
}

CropRect crop_around(std::int64_t cy, std::int64_t cx, std::int64_t img_h,
                     std::int64_t img_w, std::int64_t size) {
  CropRect r;
  r.h = std::min(size, img_h);
  r.w = std::min(size, img_w);
  r.y0 = std::clamp(cy - r.h / 2, std::int64_t{0}, img_h - r.h);
  r.x0 = std::clamp(cx - r.w / 2, std::int64_t{0}, img_w - r.w);
  return r;
}

void render_heatmap(const Tensor& map2d, const std::filesystem::path& out) {
  const Shape4& s = map2d.shape();
  if (s.n != 1 || s.c != 1) {
    throw ShapeError("render_heatmap expects a (1,1,H,W) map, got " + s.str());
  }
  // Diverging blue-white-red ramp; extremes follow the usual coolwarm ends.
  constexpr double kCool[3] = {59, 76, 192};
  constexpr double kNeutral[3] = {255, 255, 255};
  constexpr double kWarm[3] = {180, 4, 38};

  const double m = map2d.max_abs();
  ImageU8 img;
  img.h = s.h;
  img.w = s.w;
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(3 * s.h * s.w));
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      const double v = m == 0.0 ? 0.0 : map2d.at(0, 0, y, x) / m;
      const double* end = v >= 0.0 ? kWarm : kCool;
      const double t = std::abs(v);
      for (int c = 0; c < 3; ++c) {
        const double mixed = kNeutral[c] + (end[c] - kNeutral[c]) * t;
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(mixed));
      }
    }
  }
  write_png(out, img);
}

}  // namespace relprop
