// relprop command-line tool: data generation, training, explanation,
// prototype fitting/assignment and perturbation benchmarks. Every artifact
// is a pure function of flags + inputs, so reruns are byte-identical.
// Exit codes: 0 success, 2 configuration/usage error, 3 data error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "relprop/artifacts.hpp"
#include "relprop/crp.hpp"
#include "relprop/errors.hpp"
#include "relprop/fixtures.hpp"
#include "relprop/graph.hpp"
#include "relprop/graph_io.hpp"
#include "relprop/image.hpp"
#include "relprop/lrp.hpp"
#include "relprop/pcx.hpp"
#include "relprop/perturb.hpp"
#include "relprop/target.hpp"
#include "relprop/tensor.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

using namespace relprop;

struct GlobalOpts {
  std::string out;
  std::uint64_t seed = 0;
  int jobs = 1;
};

fs::path require_out(const GlobalOpts& g) {
  if (g.out.empty()) throw ConfigError("missing --out");
  fs::create_directories(g.out);
  return fs::path(g.out);
}

void write_json_file(const fs::path& path, const ordered_json& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

// --- rule flags ------------------------------------------------------------

// Kind defaults ("--rule Conv2D=epsilon:0.01") and per-node overrides
// ("--node-rule head2=zplus") on top of the standard assignment.
RuleAssignment parse_assignment(const std::vector<std::string>& kind_rules,
                                const std::vector<std::string>& node_rules) {
  RuleAssignment a = RuleAssignment::standard();
  for (const std::string& entry : kind_rules) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--rule expects Kind=rule[:param], got '" + entry +
                        "'");
    }
    const std::string kind_name = entry.substr(0, eq);
    const auto kind = node_kind_from_name(kind_name);
    if (!kind) {
      throw ConfigError("unknown node kind '" + kind_name + "' in --rule");
    }
    a.defaults[*kind] = parse_rule(entry.substr(eq + 1));
  }
  for (const std::string& entry : node_rules) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--node-rule expects node=rule[:param], got '" +
                        entry + "'");
    }
    a.overrides[entry.substr(0, eq)] = parse_rule(entry.substr(eq + 1));
  }
  return a;
}

// --- target flags ----------------------------------------------------------

struct TargetOpts {
  std::string head;
  std::string mode;                // "", segmentation, detection
  int cls = -1;                    // -1: per-head default
  std::vector<std::int64_t> cell;  // empty or {y, x}
};

void add_target_flags(CLI::App* cmd, TargetOpts& t) {
  cmd->add_option("--head", t.head,
                  "Output head to explain (default: seg, else cls)");
  cmd->add_option("--mode", t.mode, "Target mode: segmentation | detection")
      ->check(CLI::IsMember({"segmentation", "detection", "seg", "det"}));
  cmd->add_option("--class", t.cls,
                  "Class index (segmentation default 1 = flood; detection "
                  "default: argmax at the cell)");
  cmd->add_option("--cell", t.cell,
                  "Detection grid cell y x (default: argmax objectness)")
      ->expected(2);
}

std::optional<TargetMode> mode_flag(const TargetOpts& t) {
  if (t.mode == "segmentation" || t.mode == "seg") {
    return TargetMode::Segmentation;
  }
  if (t.mode == "detection" || t.mode == "det") return TargetMode::Detection;
  return std::nullopt;
}

TargetMode target_mode(const TargetOpts& t, const std::string& head) {
  if (const auto m = mode_flag(t)) return *m;
  if (head == "seg") return TargetMode::Segmentation;
  if (head == "obj" || head == "cls" || head == "box") {
    return TargetMode::Detection;
  }
  throw ConfigError("cannot infer --mode for head '" + head +
                    "'; pass --mode");
}

// Fills head/mode/class/cell defaults. The tape may be null when no
// argmax default depends on it.
TargetSpec build_target(const Graph& g, const ForwardTape* tape,
                        const TargetOpts& t) {
  std::optional<std::pair<std::int64_t, std::int64_t>> cell;
  if (!t.cell.empty()) cell = std::pair{t.cell[0], t.cell[1]};
  return default_target(
      g, tape, t.head.empty() ? std::nullopt : std::optional{t.head},
      mode_flag(t), t.cls >= 0 ? std::optional{t.cls} : std::nullopt, cell);
}

ordered_json target_json(const TargetSpec& t) {
  ordered_json j;
  j["head"] = t.head;
  j["mode"] =
      t.mode == TargetMode::Segmentation ? "segmentation" : "detection";
  j["class"] = t.class_index;
  if (t.cell) j["cell"] = {t.cell->first, t.cell->second};
  if (t.region) j["region_pixels"] = t.region->count();
  return j;
}

// --- layer defaults --------------------------------------------------------

std::vector<std::string> conv_ancestors(const Graph& g,
                                        const std::string& head) {
  std::set<std::string> seen{head};
  std::vector<std::string> stack{head};
  while (!stack.empty()) {
    const Node& n = g.node(stack.back());
    stack.pop_back();
    for (const std::string& in : n.inputs) {
      if (seen.insert(in).second) stack.push_back(in);
    }
  }
  std::vector<std::string> convs;
  for (const Node& n : g.nodes()) {
    if (n.kind == NodeKind::Conv2D && seen.count(n.id)) convs.push_back(n.id);
  }
  return convs;
}

// Default concept layer: the conv right before the head's final conv.
std::string penultimate_conv(const Graph& g, const std::string& head) {
  const std::vector<std::string> convs = conv_ancestors(g, head);
  if (convs.size() >= 2) return convs[convs.size() - 2];
  if (convs.size() == 1) return convs[0];
  throw ConfigError("no conv layer feeds head '" + head + "'; pass --layers");
}

std::vector<std::string> resolve_layers(const Graph& g,
                                        const std::vector<std::string>& layers,
                                        const std::string& head) {
  if (layers.empty()) return {penultimate_conv(g, head)};
  for (const std::string& id : layers) {
    if (!g.has_node(id)) throw ConfigError("unknown layer '" + id + "'");
  }
  return layers;
}

// --- input loading ---------------------------------------------------------

struct InputOpts {
  std::string image;
  std::string data;
  std::int64_t index = -1;
};

void add_input_flags(CLI::App* cmd, InputOpts& in) {
  cmd->add_option("--image", in.image, "Input image (PNG)");
  cmd->add_option("--data", in.data, "Dataset directory");
  cmd->add_option("--index", in.index, "Sample index within --data");
}

std::string frame_id(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04lld", static_cast<long long>(index));
  return buf;
}

std::pair<std::string, Tensor> load_input(const InputOpts& in) {
  if (!in.image.empty() && !in.data.empty()) {
    throw ConfigError("pass either --image or --data, not both");
  }
  if (!in.image.empty()) {
    return {fs::path(in.image).stem().string(),
            image_to_tensor(read_png(in.image))};
  }
  if (!in.data.empty()) {
    if (in.index < 0) throw ConfigError("--data needs --index");
    const std::string id = frame_id(in.index);
    return {id, image_to_tensor(
                    read_png(fs::path(in.data) / "images" / (id + ".png")))};
  }
  throw ConfigError("missing input: pass --image or --data with --index");
}

ordered_json input_json(const InputOpts& in) {
  ordered_json j;
  if (!in.image.empty()) {
    j["image"] = in.image;
  } else {
    j["data"] = in.data;
    j["index"] = in.index;
  }
  return j;
}

Graph load_model_flag(const std::string& dir) {
  if (dir.empty()) throw ConfigError("missing --model");
  return load_model_dir(dir);
}

// Channel indices sorted by |value| descending, ties to the lower index.
std::vector<std::int64_t> top_channels(const std::vector<double>& values) {
  std::vector<std::int64_t> order(values.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = static_cast<std::int64_t>(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     return std::abs(values[static_cast<std::size_t>(a)]) >
                            std::abs(values[static_cast<std::size_t>(b)]);
                   });
  return order;
}

// --- gen-data --------------------------------------------------------------

struct GenOpts {
  std::int64_t n = 0;
  SceneConfig scene;
};

void cmd_gen_data(const GlobalOpts& g, const GenOpts& o) {
  validate(o.scene);
  const fs::path out = require_out(g);
  write_dataset(o.scene, o.n, g.seed, out, g.jobs);
  std::printf("wrote %lld samples to %s\n", static_cast<long long>(o.n),
              out.string().c_str());
}

// --- train -----------------------------------------------------------------

struct TrainOpts {
  std::string arch = "toy-pid";
  std::string mode = "handcrafted";
  std::int64_t width = 6;
  std::int64_t image_size = 64;
  std::string data;
  std::int64_t epochs = 0;
  double lr = 0.05;
};

void cmd_train(const GlobalOpts& g, const TrainOpts& o) {
  const fs::path out = require_out(g);
  ToyModelSpec spec;
  spec.arch = o.arch;
  spec.width = o.width;
  spec.image_size = o.image_size;
  spec.seed = g.seed;
  if (o.mode == "handcrafted") {
    spec.mode = WeightMode::Handcrafted;
  } else if (o.mode == "random") {
    spec.mode = WeightMode::Random;
  } else {
    throw ConfigError("unknown --mode '" + o.mode +
                      "': expected handcrafted | random");
  }
  if (spec.mode == WeightMode::Handcrafted && o.epochs > 0) {
    throw ConfigError("--epochs needs --mode random; handcrafted weights "
                      "are fixed");
  }

  Graph graph = build_toy_model(spec);

  std::optional<Dataset> data;
  if (!o.data.empty()) {
    data = load_dataset(o.data);
    if (data->image_size != spec.image_size) {
      throw ConfigError("dataset image size " +
                        std::to_string(data->image_size) +
                        " != model image size " +
                        std::to_string(spec.image_size));
    }
  }

  TrainResult result;
  if (o.epochs > 0) {
    if (!data) throw ConfigError("--epochs needs --data");
    TrainConfig tc;
    tc.epochs = o.epochs;
    tc.lr = o.lr;
    tc.seed = g.seed;
    result = train_sgd(graph, *data, tc);
  }

  save_model_dir(graph, out);

  bool seg_head = false;
  for (const std::string& id : graph.output_ids()) {
    if (id == "seg") seg_head = true;
  }

  ordered_json j;
  j["format_version"] = 1;
  j["kind"] = "relprop-training";
  ordered_json cfg;
  cfg["arch"] = o.arch;
  cfg["mode"] = o.mode;
  cfg["width"] = o.width;
  cfg["image_size"] = o.image_size;
  cfg["seed"] = g.seed;
  cfg["epochs"] = o.epochs;
  cfg["lr"] = o.lr;
  if (!o.data.empty()) cfg["data"] = o.data;
  j["config"] = cfg;
  j["loss_history"] = result.loss_history;
  j["diverged"] = result.diverged;
  j["note"] = result.note;
  if (data && !result.diverged) {
    ordered_json metrics;
    if (seg_head) {
      metrics["pixel_accuracy"] = pixel_accuracy(graph, *data);
    } else {
      std::int64_t with_cars = 0;
      for (const DatasetSample& s : data->samples) {
        if (!s.cars.empty()) ++with_cars;
      }
      if (with_cars > 0) {
        metrics["detection_hit_rate"] = detection_hit_rate(graph, *data);
      }
    }
    j["metrics"] = metrics;
  }
  write_json_file(out / "training.json", j);

  std::printf("model written to %s\n", out.string().c_str());
  if (!result.loss_history.empty()) {
    std::printf("final loss %.6f after %zu epochs\n",
                result.loss_history.back(), result.loss_history.size());
  }
  if (result.diverged) throw DataError("training diverged: " + result.note);
}

// --- explain ---------------------------------------------------------------

struct ExplainOpts {
  std::string model;
  InputOpts input;
  TargetOpts target;
  std::vector<std::string> layers;
  std::vector<std::string> rules;
  std::vector<std::string> node_rules;
  int top = 3;
};

void cmd_explain(const GlobalOpts& g, const ExplainOpts& o) {
  const fs::path out = require_out(g);
  const Graph graph = load_model_flag(o.model);
  const auto [sample_id, input] = load_input(o.input);
  const RuleAssignment assignment = parse_assignment(o.rules, o.node_rules);

  const ForwardTape tape = forward(graph, input);
  const TargetSpec resolved =
      resolve_target(tape, build_target(graph, &tape, o.target));
  const SelectedScalar sel = select_scalar(tape, resolved);
  const std::vector<std::string> layers =
      resolve_layers(graph, o.layers, resolved.head);

  const std::map<std::string, Tensor> seeds{{resolved.head, sel.seed}};
  const LrpResult res = lrp_backward(tape, seeds, assignment);

  const std::string input_id = graph.input_ids().at(0);
  render_heatmap(flatten_heatmap(res.tape.relevance_of(input_id)),
                 out / "heatmap_full.png");

  ordered_json layers_json = ordered_json::array();
  for (const std::string& layer : layers) {
    const ConceptVector cv = concept_vector(res.tape, layer);
    const std::vector<std::int64_t> order = top_channels(cv.values);
    const std::size_t keep =
        std::min<std::size_t>(order.size(),
                              static_cast<std::size_t>(std::max(o.top, 0)));
    ordered_json tops = ordered_json::array();
    for (std::size_t i = 0; i < keep; ++i) {
      const std::int64_t ch = order[i];
      const Tensor cond =
          conditional_heatmap(tape, layer, {ch}, seeds, assignment);
      const std::string file =
          "heatmap_" + layer + "_ch" + std::to_string(ch) + ".png";
      render_heatmap(flatten_heatmap(cond), out / file);
      ordered_json t;
      t["channel"] = ch;
      t["value"] = cv.values[static_cast<std::size_t>(ch)];
      t["heatmap"] = file;
      tops.push_back(t);
    }
    ordered_json lj;
    lj["layer"] = layer;
    lj["values"] = cv.values;
    lj["top"] = tops;
    layers_json.push_back(lj);
  }

  double max_node_residual = 0.0;
  for (const NodeLedger& ledger : res.report.nodes) {
    max_node_residual =
        std::max(max_node_residual,
                 std::abs(ledger.incoming - ledger.outgoing -
                          ledger.absorbed));
  }

  ordered_json j;
  j["format_version"] = 1;
  j["kind"] = "relprop-explanation";
  ordered_json cfg;
  cfg["model"] = o.model;
  cfg["input"] = input_json(o.input);
  cfg["layers"] = layers;
  cfg["rules"] = o.rules;
  cfg["node_rules"] = o.node_rules;
  cfg["top"] = o.top;
  cfg["seed"] = g.seed;
  j["config"] = cfg;
  j["sample"] = sample_id;
  j["target"] = target_json(resolved);
  j["scalar"] = sel.value;
  ordered_json cons;
  cons["seed_total"] = res.report.seed_total;
  cons["input_total"] = res.report.input_total;
  cons["absorbed_total"] = res.report.absorbed_total;
  cons["residual"] = res.report.seed_total - res.report.input_total -
                     res.report.absorbed_total;
  cons["max_node_residual"] = max_node_residual;
  cons["flagged"] = res.report.flagged;
  j["conservation"] = cons;
  j["layers"] = layers_json;
  j["heatmap_full"] = "heatmap_full.png";
  write_json_file(out / "explanation.json", j);

  std::printf("explained %s: scalar %.6g, input relevance %.6g\n",
              sample_id.c_str(), sel.value, res.report.input_total);
}

// --- prototypes fit --------------------------------------------------------

struct FitOpts {
  std::string model;
  std::string data;
  std::string layer;
  int k = 0;  // 0: 10 for segmentation targets, 4 for detection
  double q = 5.0;
  int references = 8;
  int top = 5;
  TargetOpts target;
  std::vector<std::string> rules;
  std::vector<std::string> node_rules;
};

void cmd_fit(const GlobalOpts& g, const FitOpts& o) {
  const fs::path out = require_out(g);
  const Graph graph = load_model_flag(o.model);
  if (o.data.empty()) throw ConfigError("missing --data");
  const Dataset data = load_dataset(o.data);
  const RuleAssignment assignment = parse_assignment(o.rules, o.node_rules);

  const std::string head =
      o.target.head.empty() ? default_head(graph) : o.target.head;
  const TargetMode mode = target_mode(o.target, head);
  const std::string layer =
      o.layer.empty() ? penultimate_conv(graph, head) : o.layer;
  if (!graph.has_node(layer)) {
    throw ConfigError("unknown --layer '" + layer + "'");
  }
  const int k =
      o.k > 0 ? o.k : (mode == TargetMode::Segmentation ? 10 : 4);

  std::string context = head + ":";
  if (o.target.cls >= 0) {
    context += std::to_string(o.target.cls);
  } else {
    context += mode == TargetMode::Segmentation ? "1" : "argmax";
  }

  std::vector<ConceptVector> vectors;
  std::vector<ConceptSample> samples;
  std::map<std::string, Tensor> seed_by_sample;
  std::map<std::string, const DatasetSample*> sample_by_name;
  std::int64_t layer_h = 0;
  std::int64_t layer_w = 0;
  ordered_json samples_json = ordered_json::array();
  ordered_json skipped = ordered_json::array();
  for (const DatasetSample& s : data.samples) {
    sample_by_name[s.name] = &s;
    const ForwardTape tape = forward(graph, s.image);
    if (layer_h == 0) {
      layer_h = tape.output_of(layer).shape().h;
      layer_w = tape.output_of(layer).shape().w;
    }
    try {
      const TargetSpec resolved =
          resolve_target(tape, build_target(graph, &tape, o.target));
      const SelectedScalar sel = select_scalar(tape, resolved);
      const std::map<std::string, Tensor> seeds{{resolved.head, sel.seed}};
      const LrpResult res = lrp_backward(tape, seeds, assignment);
      ConceptSample cs = concept_sample(res.tape, layer, s.name);
      cs.vector.target = resolved;

      ordered_json sj;
      sj["sample"] = s.name;
      sj["class"] = resolved.class_index;
      sj["scalar"] = sel.value;
      sj["values"] = cs.vector.values;
      ordered_json argmax = ordered_json::array();
      for (const auto& [y, x] : cs.argmax) argmax.push_back({y, x});
      sj["argmax"] = argmax;
      samples_json.push_back(sj);

      vectors.push_back(cs.vector);
      seed_by_sample.emplace(s.name, sel.seed);
      samples.push_back(std::move(cs));
    } catch (const DataError& e) {
      ordered_json sk;
      sk["sample"] = s.name;
      sk["reason"] = e.what();
      skipped.push_back(sk);
    }
  }
  if (vectors.empty()) {
    throw DataError("no usable concept vectors in " + o.data);
  }

  const ConceptMatrix matrix = make_concept_matrix(vectors, context);
  const GmmModel gmm = fit_gmm(matrix, k, g.seed);
  const PrototypeSummary summary = prototype_summary(gmm, matrix, o.top);
  const OutlierCalibration calibration =
      calibrate_outliers(gmm, matrix, o.q);
  std::vector<int> assignments;
  assignments.reserve(matrix.rows.size());
  for (const std::vector<double>& row : matrix.rows) {
    assignments.push_back(static_cast<int>(assign(row, gmm).component));
  }

  PrototypeStore store;
  store.layer_id = layer;
  store.context = context;
  store.seed = g.seed;
  store.gmm = gmm;
  store.summary = summary;
  store.calibration = calibration;
  store.sample_ids = matrix.sample_ids;
  store.assignments = assignments;
  store.excluded = matrix.excluded;
  save_prototype_store(store, out / "prototypes.json");

  // Reference sets per channel, rendered as concept-conditioned heatmaps
  // cropped around the relevance argmax (mapped back to image pixels).
  const std::size_t channels = vectors.front().values.size();
  std::vector<ReferenceSet> ref_sets;
  ordered_json refs_json = ordered_json::array();
  if (o.references > 0) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      ref_sets.push_back(relmax_references(samples, layer,
                                           static_cast<std::int64_t>(ch),
                                           o.references));
    }
    std::map<std::string, std::vector<std::int64_t>> by_sample;
    for (const ReferenceSet& rs : ref_sets) {
      for (const ReferenceEntry& e : rs.entries) {
        by_sample[e.sample_id].push_back(rs.channel);
      }
    }
    for (const auto& [sid, chans] : by_sample) {
      const DatasetSample& s = *sample_by_name.at(sid);
      const ForwardTape tape = forward(graph, s.image);
      const std::map<std::string, Tensor> seeds{
          {head, seed_by_sample.at(sid)}};
      for (const std::int64_t ch : chans) {
        const Tensor cond =
            conditional_heatmap(tape, layer, {ch}, seeds, assignment);
        const std::string file = "heatmap_" + sid + "_" + layer + "_" +
                                 std::to_string(ch) + ".png";
        render_heatmap(flatten_heatmap(cond), out / file);
      }
    }
    for (const ReferenceSet& rs : ref_sets) {
      ordered_json entries = ordered_json::array();
      for (const ReferenceEntry& e : rs.entries) {
        const std::int64_t cy =
            (2 * e.y + 1) * data.image_size / (2 * layer_h);
        const std::int64_t cx =
            (2 * e.x + 1) * data.image_size / (2 * layer_w);
        const CropRect crop =
            crop_around(cy, cx, data.image_size, data.image_size);
        ordered_json ej;
        ej["sample"] = e.sample_id;
        ej["value"] = e.value;
        ej["argmax"] = {e.y, e.x};
        ordered_json cj;
        cj["y0"] = crop.y0;
        cj["x0"] = crop.x0;
        cj["h"] = crop.h;
        cj["w"] = crop.w;
        ej["crop"] = cj;
        ej["heatmap"] = "heatmap_" + e.sample_id + "_" + layer + "_" +
                        std::to_string(rs.channel) + ".png";
        entries.push_back(ej);
      }
      ordered_json rj;
      rj["channel"] = rs.channel;
      rj["entries"] = entries;
      refs_json.push_back(rj);
    }
  }

  ordered_json cj;
  cj["format_version"] = 1;
  cj["kind"] = "relprop-concepts";
  ordered_json cfg;
  cfg["model"] = o.model;
  cfg["data"] = o.data;
  cfg["layer"] = layer;
  cfg["context"] = context;
  cfg["k"] = k;
  cfg["q"] = o.q;
  cfg["references"] = o.references;
  cfg["top"] = o.top;
  cfg["rules"] = o.rules;
  cfg["node_rules"] = o.node_rules;
  cfg["seed"] = g.seed;
  cj["config"] = cfg;
  cj["layer"] = layer;
  cj["context"] = context;
  cj["channels"] = channels;
  cj["samples"] = samples_json;
  cj["excluded"] = matrix.excluded;
  cj["skipped"] = skipped;
  cj["references"] = refs_json;
  write_json_file(out / "concepts.json", cj);

  std::printf("fit K=%d on %zu concept vectors (%zu excluded, %zu skipped)\n",
              k, matrix.rows.size(), matrix.excluded.size(), skipped.size());
  for (std::size_t i = 0; i < summary.components.size(); ++i) {
    std::printf("  component %zu: coverage %.1f%%, cosine to mean %+.3f\n", i,
                summary.components[i].coverage_pct,
                summary.components[i].cosine_to_mean);
  }
}

// --- prototypes assign -----------------------------------------------------

struct AssignOpts {
  std::string store;
  std::string model;
  InputOpts input;
  TargetOpts target;
  std::vector<std::string> rules;
  std::vector<std::string> node_rules;
  int top = 10;
};

void cmd_assign(const GlobalOpts& g, const AssignOpts& o) {
  const fs::path out = require_out(g);
  if (o.store.empty()) throw ConfigError("missing --store");
  const PrototypeStore store = load_prototype_store(o.store);
  const Graph graph = load_model_flag(o.model);
  const auto [sample_id, input] = load_input(o.input);
  const RuleAssignment assignment = parse_assignment(o.rules, o.node_rules);
  if (!graph.has_node(store.layer_id)) {
    throw DataError("model has no layer '" + store.layer_id +
                    "' referenced by the store");
  }

  const ForwardTape tape = forward(graph, input);
  const TargetSpec resolved =
      resolve_target(tape, build_target(graph, &tape, o.target));
  const SelectedScalar sel = select_scalar(tape, resolved);
  const LrpResult res =
      lrp_backward(tape, {{resolved.head, sel.seed}}, assignment);
  const ConceptVector cv = concept_vector(res.tape, store.layer_id);

  double norm = 0.0;
  for (const double v : cv.values) norm += std::abs(v);
  if (norm == 0.0) {
    throw DataError("concept vector is identically zero; nothing to assign");
  }
  const std::vector<double> row = normalize_l1(cv.values);

  const GmmAssignment ga = assign(row, store.gmm);
  const OutlierScore score = outlier_score(row, store.gmm, store.calibration);
  const DiffReport diff = difference_to_prototype(row, store.gmm,
                                                  ga.component);

  ordered_json j;
  j["format_version"] = 1;
  j["kind"] = "relprop-assignment";
  ordered_json cfg;
  cfg["store"] = o.store;
  cfg["model"] = o.model;
  cfg["input"] = input_json(o.input);
  cfg["top"] = o.top;
  cfg["rules"] = o.rules;
  cfg["node_rules"] = o.node_rules;
  cfg["seed"] = g.seed;
  j["config"] = cfg;
  j["sample"] = sample_id;
  j["layer"] = store.layer_id;
  j["context"] = store.context;
  j["target"] = target_json(resolved);
  j["component"] = ga.component;
  j["log_likelihood"] = ga.log_likelihood;
  j["responsibilities"] = ga.responsibilities;
  j["percentile"] = score.percentile;
  j["flagged"] = score.flagged;
  ordered_json diff_json = ordered_json::array();
  const std::size_t keep =
      std::min<std::size_t>(diff.entries.size(),
                            static_cast<std::size_t>(std::max(o.top, 0)));
  for (std::size_t i = 0; i < keep; ++i) {
    const DiffEntry& e = diff.entries[i];
    ordered_json dj;
    dj["concept"] = e.concept_index;
    dj["test"] = e.test_value;
    dj["prototype"] = e.prototype_value;
    dj["delta"] = e.delta;
    diff_json.push_back(dj);
  }
  j["diff"] = diff_json;
  write_json_file(out / "assignment.json", j);

  std::printf("%s -> component %lld, log-likelihood %.4f, percentile %.1f%s\n",
              sample_id.c_str(), static_cast<long long>(ga.component),
              ga.log_likelihood, score.percentile,
              score.flagged ? " (outlier)" : "");
}

// --- eval-perturb ----------------------------------------------------------

struct EvalOpts {
  std::string model;
  std::string data;
  std::vector<std::string> layers;
  std::vector<std::string> methods{"lrp", "gradient", "gradcam", "activation",
                                   "random"};
  std::int64_t n = 0;  // 0: the whole dataset
  TargetOpts target;
  std::vector<std::string> rules;
  std::vector<std::string> node_rules;
};

std::vector<ScoreMethod> parse_methods(const std::vector<std::string>& names,
                                       const RuleAssignment& assignment,
                                       std::uint64_t seed) {
  std::vector<ScoreMethod> out;
  for (const std::string& name : names) {
    if (name == "lrp") {
      out.push_back(ScoreMethod::lrp(assignment));
    } else if (name == "gradient") {
      out.push_back(ScoreMethod::gradient());
    } else if (name == "gradcam") {
      out.push_back(ScoreMethod::gradcam());
    } else if (name == "activation") {
      out.push_back(ScoreMethod::activation());
    } else if (name == "random") {
      out.push_back(ScoreMethod::random(seed));
    } else {
      throw ConfigError("unknown method '" + name +
                        "': valid methods are lrp, gradient, gradcam, "
                        "activation, random");
    }
  }
  if (out.empty()) throw ConfigError("no methods given");
  return out;
}

void cmd_eval(const GlobalOpts& g, const EvalOpts& o) {
  const fs::path out = require_out(g);
  const Graph graph = load_model_flag(o.model);
  if (o.data.empty()) throw ConfigError("missing --data");
  const Dataset data = load_dataset(o.data);
  const RuleAssignment assignment = parse_assignment(o.rules, o.node_rules);
  const std::vector<ScoreMethod> methods =
      parse_methods(o.methods, assignment, g.seed);

  const std::string head =
      o.target.head.empty() ? default_head(graph) : o.target.head;
  const TargetMode mode = target_mode(o.target, head);
  const std::vector<std::string> layers =
      resolve_layers(graph, o.layers, head);
  const bool needs_tape = mode == TargetMode::Detection &&
                          (o.target.cell.empty() || o.target.cls < 0);

  std::vector<BenchSample> samples;
  samples.reserve(data.samples.size());
  for (const DatasetSample& s : data.samples) {
    ForwardTape tape;
    if (needs_tape) tape = forward(graph, s.image);
    BenchSample b;
    b.id = s.name;
    b.input = s.image;
    b.target =
        build_target(graph, needs_tape ? &tape : nullptr, o.target);
    samples.push_back(std::move(b));
  }

  BenchConfig config;
  config.layers = layers;
  config.methods = methods;
  config.sample_count = o.n == 0 ? samples.size()
                                 : static_cast<std::size_t>(o.n);
  config.seed = g.seed;
  const BenchReport report = run_benchmark(graph, samples, config);

  ordered_json cfg;
  cfg["model"] = o.model;
  cfg["data"] = o.data;
  cfg["layers"] = layers;
  cfg["methods"] = o.methods;
  cfg["n"] = config.sample_count;
  cfg["head"] = head;
  cfg["mode"] =
      mode == TargetMode::Segmentation ? "segmentation" : "detection";
  cfg["rules"] = o.rules;
  cfg["node_rules"] = o.node_rules;
  cfg["seed"] = g.seed;
  write_bench_report(report, aoc_sign_tests(report), cfg,
                     out / "bench_report.json");
  write_curves_csv(report, out / "curves.csv");
  write_png(out / "bench_chart.png", render_bench_chart(report));

  for (const MethodLayerStat& stat : report.stats) {
    std::printf("%s @ %s: mean AOC %+.5f, mean AUC %+.5f over %zu samples\n",
                stat.method.c_str(), stat.layer_id.c_str(), stat.mean_aoc,
                stat.mean_auc, stat.samples);
  }
}

}  // namespace

int main(int argc, char** argv) {
  GlobalOpts g;
  CLI::App app{"Layer-wise relevance propagation over toy conv graphs"};
  app.set_config("--config", "",
                 "Key=value config file; command-line flags win");
  app.require_subcommand(1);
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed,
                 "Master seed; all randomness derives from it");
  app.add_option("--jobs", g.jobs, "Worker thread bound")
      ->check(CLI::PositiveNumber);

  auto gen = std::make_shared<GenOpts>();
  {
    CLI::App* cmd =
        app.add_subcommand("gen-data", "Render a synthetic scene dataset");
    cmd->fallthrough();
    cmd->add_option("--n", gen->n, "Sample count")->required();
    cmd->add_option("--image-size", gen->scene.image_size,
                    "Square image size");
    cmd->add_option("--noise", gen->scene.noise,
                    "Per-pixel color jitter amplitude");
    cmd->add_option("--palette", gen->scene.palette, "Car colors")
        ->delimiter(',');
    cmd->add_option("--min-cars", gen->scene.car_count.lo,
                    "Fewest cars per scene");
    cmd->add_option("--max-cars", gen->scene.car_count.hi,
                    "Most cars per scene");
    cmd->callback([&g, gen] { cmd_gen_data(g, *gen); });
  }

  auto train = std::make_shared<TrainOpts>();
  {
    CLI::App* cmd =
        app.add_subcommand("train", "Build (and optionally train) a toy model");
    cmd->fallthrough();
    cmd->add_option("--arch", train->arch, "Architecture: toy-pid | toy-det");
    cmd->add_option("--mode", train->mode,
                    "Weight mode: handcrafted | random");
    cmd->add_option("--width", train->width, "Feature channels");
    cmd->add_option("--image-size", train->image_size, "Input image size");
    cmd->add_option("--data", train->data, "Training dataset directory");
    cmd->add_option("--epochs", train->epochs,
                    "Gradient-descent epochs (0: keep initial weights)");
    cmd->add_option("--lr", train->lr, "Learning rate");
    cmd->callback([&g, train] { cmd_train(g, *train); });
  }

  auto explain = std::make_shared<ExplainOpts>();
  {
    CLI::App* cmd =
        app.add_subcommand("explain", "Relevance explanation for one input");
    cmd->fallthrough();
    cmd->add_option("--model", explain->model, "Model directory");
    add_input_flags(cmd, explain->input);
    add_target_flags(cmd, explain->target);
    cmd->add_option("--layers", explain->layers,
                    "Concept layers (default: penultimate conv)")
        ->delimiter(',');
    cmd->add_option("--rule", explain->rules,
                    "Per-kind rule, Kind=rule[:param]");
    cmd->add_option("--node-rule", explain->node_rules,
                    "Per-node rule, node=rule[:param]");
    cmd->add_option("--top", explain->top,
                    "Concept-conditioned heatmaps per layer");
    cmd->callback([&g, explain] { cmd_explain(g, *explain); });
  }

  auto fit = std::make_shared<FitOpts>();
  auto assign_opts = std::make_shared<AssignOpts>();
  {
    CLI::App* proto =
        app.add_subcommand("prototypes", "Dataset-wide prediction prototypes");
    proto->require_subcommand(1);
    proto->fallthrough();

    CLI::App* cmd = proto->add_subcommand(
        "fit", "Extract concept vectors and fit a Gaussian mixture");
    cmd->fallthrough();
    cmd->add_option("--model", fit->model, "Model directory");
    cmd->add_option("--data", fit->data, "Dataset directory");
    cmd->add_option("--layer", fit->layer,
                    "Concept layer (default: penultimate conv)");
    cmd->add_option("--k", fit->k,
                    "Mixture components (default: 10 segmentation, "
                    "4 detection)");
    cmd->add_option("--q", fit->q, "Outlier percentile in (0, 50]");
    cmd->add_option("--references", fit->references,
                    "Reference samples per channel (0: skip)");
    cmd->add_option("--top", fit->top, "Top concepts per prototype");
    add_target_flags(cmd, fit->target);
    cmd->add_option("--rule", fit->rules, "Per-kind rule, Kind=rule[:param]");
    cmd->add_option("--node-rule", fit->node_rules,
                    "Per-node rule, node=rule[:param]");
    cmd->callback([&g, fit] { cmd_fit(g, *fit); });

    CLI::App* acmd = proto->add_subcommand(
        "assign", "Assign one input to a fitted prototype");
    acmd->fallthrough();
    acmd->add_option("--store", assign_opts->store,
                     "prototypes.json from a fit run");
    acmd->add_option("--model", assign_opts->model, "Model directory");
    add_input_flags(acmd, assign_opts->input);
    add_target_flags(acmd, assign_opts->target);
    acmd->add_option("--rule", assign_opts->rules,
                     "Per-kind rule, Kind=rule[:param]");
    acmd->add_option("--node-rule", assign_opts->node_rules,
                     "Per-node rule, node=rule[:param]");
    acmd->add_option("--top", assign_opts->top,
                     "Difference-to-prototype entries to keep");
    acmd->callback([&g, assign_opts] { cmd_assign(g, *assign_opts); });
  }

  auto eval = std::make_shared<EvalOpts>();
  {
    CLI::App* cmd = app.add_subcommand(
        "eval-perturb", "Perturbation-based faithfulness benchmark");
    cmd->fallthrough();
    cmd->add_option("--model", eval->model, "Model directory");
    cmd->add_option("--data", eval->data, "Dataset directory");
    cmd->add_option("--layers", eval->layers,
                    "Layers to perturb (default: penultimate conv)")
        ->delimiter(',');
    cmd->add_option("--methods", eval->methods,
                    "Scoring methods (lrp, gradient, gradcam, activation, "
                    "random)")
        ->delimiter(',');
    cmd->add_option("--n", eval->n, "Samples to evaluate (0: all)");
    add_target_flags(cmd, eval->target);
    cmd->add_option("--rule", eval->rules, "Per-kind rule, Kind=rule[:param]");
    cmd->add_option("--node-rule", eval->node_rules,
                    "Per-node rule, node=rule[:param]");
    cmd->callback([&g, eval] { cmd_eval(g, *eval); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
