#include "relprop/target.hpp"

#include "relprop/errors.hpp"

namespace relprop {

std::int64_t Region::count() const {
  std::int64_t c = 0;
  for (std::uint8_t m : mask) c += (m != 0);
  return c;
}

static const Tensor& head_logits(const ForwardTape& tape,
                                 const TargetSpec& target) {
  const Node& head = tape.graph->node(target.head);
  if (head.kind != NodeKind::Output) {
    throw ConfigError("target head '" + target.head +
                      "' is not an Output node");
  }
  return tape.output_of(target.head);
}

TargetSpec resolve_target(const ForwardTape& tape, const TargetSpec& target) {
  const Tensor& logits = head_logits(tape, target);
  const Shape4& s = logits.shape();
  if (target.class_index < 0 || target.class_index >= s.c) {
    throw ConfigError("class index " + std::to_string(target.class_index) +
                      " out of range for head with " + std::to_string(s.c) +
                      " channels");
  }
  TargetSpec out = target;
  if (target.mode == TargetMode::Detection) {
    if (!target.cell) {
      throw ConfigError("detection target needs a grid cell");
    }
    auto [cy, cx] = *target.cell;
    if (cy < 0 || cy >= s.h || cx < 0 || cx >= s.w) {
      throw ConfigError("cell (" + std::to_string(cy) + "," +
                        std::to_string(cx) + ") outside head grid " + s.str());
    }
    return out;
  }
  if (target.region) {
    if (target.region->h != s.h || target.region->w != s.w) {
      throw ConfigError("region extent " + std::to_string(target.region->h) +
                        "x" + std::to_string(target.region->w) +
                        " does not match head grid " + s.str());
    }
    return out;
  }
  // Predicted-region default: pixels where class_index wins the argmax.
  Region r;
  r.h = s.h;
  r.w = s.w;
  r.mask.assign(static_cast<std::size_t>(s.h * s.w), 0);
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      int best = 0;
      double best_v = logits.at(0, 0, y, x);
      for (std::int64_t c = 1; c < s.c; ++c) {
        if (logits.at(0, c, y, x) > best_v) {
          best_v = logits.at(0, c, y, x);
          best = static_cast<int>(c);
        }
      }
      if (best == target.class_index) {
        r.mask[static_cast<std::size_t>(y * s.w + x)] = 1;
      }
    }
  }
  out.region = std::move(r);
  return out;
}

SelectedScalar select_scalar(const ForwardTape& tape,
                             const TargetSpec& target) {
  TargetSpec t = resolve_target(tape, target);
  const Tensor& logits = head_logits(tape, t);
  const Shape4& s = logits.shape();
  SelectedScalar sel;
  sel.seed = Tensor(s);
  if (t.mode == TargetMode::Detection) {
    auto [cy, cx] = *t.cell;
    const double v = logits.at(0, t.class_index, cy, cx);
    sel.value = v;
    sel.seed.at(0, t.class_index, cy, cx) = v;
    return sel;
  }
  if (t.region->count() == 0) {
    throw DataError("target region for class " +
                    std::to_string(t.class_index) +
                    " is empty: nothing to explain");
  }
  double total = 0.0;
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      if (!t.region->at(y, x)) continue;
      const double v = logits.at(0, t.class_index, y, x);
      total += v;
      sel.seed.at(0, t.class_index, y, x) = v;
    }
  }
  sel.value = total;
  return sel;
}

Tensor seed_gradient(const ForwardTape& tape, const TargetSpec& target) {
  TargetSpec t = resolve_target(tape, target);
  const Tensor& logits = head_logits(tape, t);
  Tensor seed(logits.shape());
  if (t.mode == TargetMode::Detection) {
    auto [cy, cx] = *t.cell;
    seed.at(0, t.class_index, cy, cx) = 1.0;
    return seed;
  }
  if (t.region->count() == 0) {
    throw DataError("target region for class " +
                    std::to_string(t.class_index) +
                    " is empty: nothing to explain");
  }
  const Shape4& s = logits.shape();
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      if (t.region->at(y, x)) seed.at(0, t.class_index, y, x) = 1.0;
    }
  }
  return seed;
}

std::string default_head(const Graph& graph) {
  const auto& outs = graph.output_ids();
  for (const std::string& id : outs) {
    if (id == "seg") return id;
  }
  for (const std::string& id : outs) {
    if (id == "cls") return id;
  }
  if (outs.size() == 1) return outs[0];
  std::string all;
  for (const std::string& id : outs) {
    if (!all.empty()) all += ", ";
    all += id;
  }
  throw ConfigError("cannot pick a default head (outputs: " + all +
                    "); name one explicitly");
}

std::pair<std::int64_t, std::int64_t> argmax_cell(const Tensor& obj_map) {
  const Shape4& s = obj_map.shape();
  std::pair<std::int64_t, std::int64_t> best{0, 0};
  double best_v = obj_map.at(0, 0, 0, 0);
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      if (obj_map.at(0, 0, y, x) > best_v) {
        best_v = obj_map.at(0, 0, y, x);
        best = {y, x};
      }
    }
  }
  return best;
}

TargetSpec default_target(
    const Graph& g, const ForwardTape* tape,
    const std::optional<std::string>& head, std::optional<TargetMode> mode,
    std::optional<int> class_index,
    std::optional<std::pair<std::int64_t, std::int64_t>> cell,
    std::optional<Region> region) {
  TargetSpec spec;
  spec.head = head ? *head : default_head(g);
  if (!g.has_node(spec.head)) {
    throw ConfigError("unknown head '" + spec.head + "'");
  }
  if (mode) {
    spec.mode = *mode;
  } else if (spec.head == "seg") {
    spec.mode = TargetMode::Segmentation;
  } else if (spec.head == "obj" || spec.head == "cls" || spec.head == "box") {
    spec.mode = TargetMode::Detection;
  } else if (cell) {
    spec.mode = TargetMode::Detection;
  } else if (region) {
    spec.mode = TargetMode::Segmentation;
  } else {
    throw ConfigError("cannot infer the target mode for head '" + spec.head +
                      "'");
  }
  if (spec.mode == TargetMode::Segmentation) {
    spec.class_index = class_index.value_or(1);
    spec.region = std::move(region);
    return spec;
  }
  if (cell) {
    spec.cell = *cell;
  } else {
    bool has_obj = false;
    for (const std::string& id : g.output_ids()) {
      if (id == "obj") has_obj = true;
    }
    if (!has_obj) {
      throw ConfigError(
          "a cell is required: no 'obj' head to take the argmax from");
    }
    if (!tape) {
      throw ConfigError(
          "a cell is required: no activations to take the argmax from");
    }
    spec.cell = argmax_cell(tape->output_of("obj"));
  }
  if (class_index) {
    spec.class_index = *class_index;
  } else if (spec.head == "cls") {
    if (!tape) {
      throw ConfigError(
          "a class is required: no activations to take the argmax from");
    }
    const Tensor& cls = tape->output_of("cls");
    const auto [cy, cx] = *spec.cell;
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < cls.shape().c; ++c) {
      if (cls.at(0, c, cy, cx) > cls.at(0, best, cy, cx)) best = c;
    }
    spec.class_index = static_cast<int>(best);
  } else {
    spec.class_index = 0;
  }
  return spec;
}

}  // namespace relprop
