#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "relprop/crp.hpp"
#include "relprop/errors.hpp"
#include "relprop/fixtures.hpp"
#include "relprop/gradient.hpp"
#include "relprop/graph.hpp"
#include "relprop/graph_io.hpp"
#include "relprop/lrp.hpp"
#include "relprop/pcx.hpp"
#include "relprop/perturb.hpp"
#include "relprop/target.hpp"

namespace py = pybind11;

namespace {

using namespace relprop;

using DoubleArray =
    py::array_t<double, py::array::c_style | py::array::forcecast>;

// --- numpy conversions -----------------------------------------------------

Tensor tensor_from(const DoubleArray& a) {
  const py::buffer_info info = a.request();
  Shape4 s;
  if (info.ndim == 3) {
    s = {1, info.shape[0], info.shape[1], info.shape[2]};
  } else if (info.ndim == 4) {
    s = {info.shape[0], info.shape[1], info.shape[2], info.shape[3]};
  } else {
    throw ConfigError("expected a (c, h, w) or (n, c, h, w) array, got " +
                      std::to_string(info.ndim) + " dimensions");
  }
  const double* src = static_cast<const double*>(info.ptr);
  return Tensor(s, std::vector<double>(src, src + s.count()));
}

py::array_t<double> to_numpy(const Tensor& t) {
  const Shape4& s = t.shape();
  py::array_t<double> a(std::vector<py::ssize_t>{
      static_cast<py::ssize_t>(s.n), static_cast<py::ssize_t>(s.c),
      static_cast<py::ssize_t>(s.h), static_cast<py::ssize_t>(s.w)});
  std::copy(t.values().begin(), t.values().end(), a.mutable_data());
  return a;
}

py::array_t<double> vec_to_numpy(std::span<const double> v) {
  py::array_t<double> a(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

std::vector<double> vec_from(const DoubleArray& a) {
  const py::buffer_info info = a.request();
  if (info.ndim != 1) throw ConfigError("expected a 1-d vector");
  const double* src = static_cast<const double*>(info.ptr);
  return std::vector<double>(src, src + info.shape[0]);
}

py::array_t<double> rows_to_numpy(const std::vector<std::vector<double>>& rows) {
  const py::ssize_t n = static_cast<py::ssize_t>(rows.size());
  const py::ssize_t c = n ? static_cast<py::ssize_t>(rows[0].size()) : 0;
  py::array_t<double> a(std::vector<py::ssize_t>{n, c});
  double* dst = a.mutable_data();
  for (const auto& r : rows) dst = std::copy(r.begin(), r.end(), dst);
  return a;
}

ConceptMatrix matrix_from(const DoubleArray& rows) {
  const py::buffer_info info = rows.request();
  if (info.ndim != 2) {
    throw ConfigError("expected an (n, c) matrix of concept vectors");
  }
  const double* src = static_cast<const double*>(info.ptr);
  ConceptMatrix m;
  m.rows.reserve(static_cast<std::size_t>(info.shape[0]));
  for (py::ssize_t i = 0; i < info.shape[0]; ++i) {
    m.rows.emplace_back(src + i * info.shape[1], src + (i + 1) * info.shape[1]);
    char id[16];
    std::snprintf(id, sizeof id, "%04lld", static_cast<long long>(i));
    m.sample_ids.push_back(id);
  }
  return m;
}

py::array_t<std::uint8_t> mask_to_numpy(const std::vector<std::uint8_t>& mask,
                                        std::int64_t size) {
  py::array_t<std::uint8_t> a(std::vector<py::ssize_t>{
      static_cast<py::ssize_t>(size), static_cast<py::ssize_t>(size)});
  std::copy(mask.begin(), mask.end(), a.mutable_data());
  return a;
}

py::list boxes_list(const std::vector<CarBox>& cars) {
  py::list out;
  for (const CarBox& b : cars) {
    py::dict d;
    d["x"] = b.x;
    d["y"] = b.y;
    d["w"] = b.w;
    d["h"] = b.h;
    d["color"] = b.color;
    out.append(d);
  }
  return out;
}

// --- option parsing --------------------------------------------------------

std::optional<TargetMode> mode_from(const std::optional<std::string>& mode) {
  if (!mode) return std::nullopt;
  if (*mode == "segmentation" || *mode == "seg") {
    return TargetMode::Segmentation;
  }
  if (*mode == "detection" || *mode == "det") return TargetMode::Detection;
  throw ConfigError("mode must be 'segmentation' or 'detection'");
}

std::string mode_name(TargetMode m) {
  return m == TargetMode::Segmentation ? "segmentation" : "detection";
}

std::optional<Region> region_from(const std::optional<DoubleArray>& region) {
  if (!region) return std::nullopt;
  const py::buffer_info info = region->request();
  if (info.ndim != 2) throw ConfigError("region must be an (h, w) array");
  Region r;
  r.h = info.shape[0];
  r.w = info.shape[1];
  r.mask.resize(static_cast<std::size_t>(r.h * r.w));
  const double* src = static_cast<const double*>(info.ptr);
  for (std::size_t i = 0; i < r.mask.size(); ++i) {
    r.mask[i] = src[i] != 0.0 ? 1 : 0;
  }
  return r;
}

using RuleMap = std::map<std::string, std::string>;

RuleAssignment assignment_from(const std::optional<RuleMap>& rules,
                               const std::optional<RuleMap>& node_rules) {
  RuleAssignment a = RuleAssignment::standard();
  if (rules) {
    for (const auto& [kind_name, spec] : *rules) {
      const auto kind = node_kind_from_name(kind_name);
      if (!kind) {
        throw ConfigError("unknown node kind '" + kind_name + "' in rules");
      }
      a.defaults[*kind] = parse_rule(spec);
    }
  }
  if (node_rules) {
    for (const auto& [node, spec] : *node_rules) {
      a.overrides[node] = parse_rule(spec);
    }
  }
  return a;
}

ScoreMethod method_from(const std::string& name,
                        const RuleAssignment& assignment, std::uint64_t seed) {
  if (name == "lrp") return ScoreMethod::lrp(assignment);
  if (name == "gradient") return ScoreMethod::gradient();
  if (name == "gradcam") return ScoreMethod::gradcam();
  if (name == "activation") return ScoreMethod::activation();
  if (name == "random") return ScoreMethod::random(seed);
  throw ConfigError("unknown method '" + name +
                    "': valid methods are lrp, gradient, gradcam, "
                    "activation, random");
}

WeightMode weight_mode(const std::string& mode) {
  if (mode == "handcrafted") return WeightMode::Handcrafted;
  if (mode == "random") return WeightMode::Random;
  throw ConfigError("mode must be 'handcrafted' or 'random'");
}

std::optional<ChannelCondition> condition_from(
    const std::optional<std::pair<std::string, std::vector<std::int64_t>>>&
        c) {
  if (!c) return std::nullopt;
  return ChannelCondition{c->first, c->second};
}

SceneConfig scene_config(std::int64_t image_size, double noise,
                         std::int64_t min_cars, std::int64_t max_cars,
                         const std::optional<std::vector<std::string>>&
                             palette) {
  SceneConfig cfg;
  cfg.image_size = image_size;
  cfg.noise = noise;
  cfg.car_count = {min_cars, max_cars};
  if (palette) cfg.palette = *palette;
  validate(cfg);
  return cfg;
}

std::string single_input(const Graph& g) {
  const auto ids = g.input_ids();
  if (ids.size() != 1) {
    throw ConfigError("the graph must have exactly one input");
  }
  return ids[0];
}

// --- result wrappers -------------------------------------------------------

struct Explanation {
  LrpResult result;
  TargetSpec target;
  double scalar = 0.0;
};

double max_node_residual(const ConservationReport& r) {
  double m = 0.0;
  for (const NodeLedger& n : r.nodes) {
    m = std::max(m, std::abs(n.incoming - n.outgoing - n.absorbed));
  }
  return m;
}

py::dict conservation_dict(const ConservationReport& r) {
  py::dict d;
  d["seed_total"] = r.seed_total;
  d["input_total"] = r.input_total;
  d["absorbed_total"] = r.absorbed_total;
  d["residual"] = r.seed_total - r.input_total - r.absorbed_total;
  d["max_node_residual"] = max_node_residual(r);
  d["flagged"] = r.flagged;
  return d;
}

py::dict curve_dict(const PerturbCurve& c) {
  py::dict d;
  d["logits"] = vec_to_numpy(c.logits);
  py::list steps;
  for (const auto& s : c.steps) steps.append(py::cast(s));
  d["steps"] = steps;
  if (c.direction == Direction::Deletion) {
    d["aoc"] = aoc(c);
  } else {
    d["auc"] = auc(c);
  }
  return d;
}

TargetSpec target_or_default(const ForwardTape& tape,
                             const std::optional<TargetSpec>& target) {
  return target ? *target : default_target(tape, std::nullopt);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() =
      "Layer-wise relevance propagation over small convolutional graphs.\n"
      "Images and feature maps are float64 numpy arrays in (n, c, h, w)\n"
      "order; functions also accept (c, h, w) for a single sample.";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const ShapeError& e) {
      PyErr_SetString(PyExc_ValueError, e.what());
    } catch (const Error& e) {
      PyErr_SetString(PyExc_RuntimeError, e.what());
    }
  });

  m.attr("CLASS_BACKGROUND") = kClassBackground;
  m.attr("CLASS_FLOOD") = kClassFlood;
  m.attr("CLASS_ROAD") = kClassRoad;

  py::class_<Graph>(m, "Graph", "Convolutional computation graph.")
      .def_property_readonly("input_ids",
                             [](const Graph& g) { return g.input_ids(); })
      .def_property_readonly(
          "output_ids", [](const Graph& g) { return g.output_ids(); })
      .def_property_readonly("node_ids",
                             [](const Graph& g) {
                               std::vector<std::string> ids;
                               ids.reserve(g.nodes().size());
                               for (const Node& n : g.nodes()) {
                                 ids.push_back(n.id);
                               }
                               return ids;
                             })
      .def_property_readonly("meta", [](const Graph& g) { return g.meta; })
      .def(
          "node_kind",
          [](const Graph& g, const std::string& id) {
            return std::string(node_kind_name(g.node(id).kind));
          },
          py::arg("node"))
      .def("validate", [](const Graph& g) { return g.validate(); },
           "Structural violations found, empty when the graph is sound.")
      .def("__repr__", [](const Graph& g) {
        std::string outs;
        for (const std::string& id : g.output_ids()) {
          if (!outs.empty()) outs += ", ";
          outs += id;
        }
        return "<relprop.Graph " + std::to_string(g.nodes().size()) +
               " nodes, outputs [" + outs + "]>";
      });

  py::class_<ForwardTape>(m, "ForwardTape",
                          "Activations of one forward pass.")
      .def(
          "output",
          [](const ForwardTape& t, const std::string& id) {
            return to_numpy(t.output_of(id));
          },
          py::arg("node"), "Activation tensor of the named node.");

  py::class_<TargetSpec>(m, "Target",
                         "What to explain: a class over a region of a "
                         "segmentation head, or a class logit at one cell "
                         "of a detection head.")
      .def_property_readonly("head",
                             [](const TargetSpec& t) { return t.head; })
      .def_property_readonly(
          "mode", [](const TargetSpec& t) { return mode_name(t.mode); })
      .def_property_readonly(
          "class_index", [](const TargetSpec& t) { return t.class_index; })
      .def_property_readonly("cell",
                             [](const TargetSpec& t) -> py::object {
                               if (!t.cell) return py::none();
                               return py::make_tuple(t.cell->first,
                                                     t.cell->second);
                             })
      .def("__repr__", [](const TargetSpec& t) {
        std::string r = "<relprop.Target " + t.head + " " + mode_name(t.mode) +
                        " class " + std::to_string(t.class_index);
        if (t.cell) {
          r += " cell (" + std::to_string(t.cell->first) + ", " +
               std::to_string(t.cell->second) + ")";
        }
        return r + ">";
      });

  py::class_<Explanation>(m, "Explanation",
                          "One LRP backward pass: relevance per node plus "
                          "the conservation ledger.")
      .def_property_readonly("scalar",
                             [](const Explanation& e) { return e.scalar; })
      .def_property_readonly("target",
                             [](const Explanation& e) { return e.target; })
      .def_property_readonly(
          "conservation",
          [](const Explanation& e) { return conservation_dict(e.result.report); })
      .def_property_readonly("input_relevance",
                             [](const Explanation& e) {
                               const RelevanceTape& t = e.result.tape;
                               return to_numpy(t.relevance_of(
                                   single_input(*t.graph)));
                             })
      .def(
          "relevance",
          [](const Explanation& e, const std::string& id) {
            return to_numpy(e.result.tape.relevance_of(id));
          },
          py::arg("node"), "Relevance tensor at the named node.")
      .def(
          "concept_vector",
          [](const Explanation& e, const std::string& layer) {
            return vec_to_numpy(concept_vector(e.result.tape, layer).values);
          },
          py::arg("layer"),
          "Per-channel relevance sums at the named layer.")
      .def(
          "concept_argmax",
          [](const Explanation& e, const std::string& layer) {
            return concept_sample(e.result.tape, layer, "").argmax;
          },
          py::arg("layer"),
          "Per-channel (y, x) argmax of relevance on the layer's grid.")
      .def("__repr__", [](const Explanation& e) {
        return "<relprop.Explanation head " + e.target.head + " scalar " +
               std::to_string(e.scalar) + ">";
      });

  py::class_<OutlierCalibration>(m, "OutlierCalibration",
                                 "Log-likelihood threshold at the q-th "
                                 "percentile of the training scores.")
      .def_property_readonly(
          "threshold",
          [](const OutlierCalibration& c) { return c.threshold; })
      .def_property_readonly("q",
                             [](const OutlierCalibration& c) { return c.q; })
      .def_property_readonly("train_loglik",
                             [](const OutlierCalibration& c) {
                               return vec_to_numpy(c.train_loglik);
                             });

  py::class_<GmmModel>(m, "Gmm",
                       "Diagonal-covariance Gaussian mixture over concept "
                       "vectors.")
      .def_property_readonly("k", [](const GmmModel& g) { return g.k; })
      .def_property_readonly(
          "weights", [](const GmmModel& g) { return vec_to_numpy(g.weights); })
      .def_property_readonly(
          "means", [](const GmmModel& g) { return rows_to_numpy(g.means); })
      .def_property_readonly(
          "variances",
          [](const GmmModel& g) { return rows_to_numpy(g.variances); })
      .def_property_readonly(
          "loglik_history",
          [](const GmmModel& g) { return g.loglik_history; })
      .def_property_readonly("notes",
                             [](const GmmModel& g) { return g.notes; })
      .def(
          "assign",
          [](const GmmModel& g, const DoubleArray& v) {
            const GmmAssignment a = assign(vec_from(v), g);
            py::dict d;
            d["component"] = a.component;
            d["log_likelihood"] = a.log_likelihood;
            d["responsibilities"] = vec_to_numpy(a.responsibilities);
            return d;
          },
          py::arg("vector"),
          "Most responsible component, log-likelihood and the full "
          "responsibility vector.")
      .def(
          "mean_log_likelihood",
          [](const GmmModel& g, const DoubleArray& rows) {
            return mean_log_likelihood(g, matrix_from(rows));
          },
          py::arg("rows"))
      .def(
          "summary",
          [](const GmmModel& g, const DoubleArray& rows, int top) {
            const PrototypeSummary s =
                prototype_summary(g, matrix_from(rows), top);
            py::list comps;
            for (const auto& c : s.components) {
              py::dict e;
              e["coverage_pct"] = c.coverage_pct;
              e["cosine_to_mean"] = c.cosine_to_mean;
              e["top_concepts"] = c.top_concepts;
              comps.append(e);
            }
            py::dict d;
            d["components"] = comps;
            d["class_mean"] = vec_to_numpy(s.class_mean);
            return d;
          },
          py::arg("rows"), py::arg("top") = 5,
          "Coverage, cosine-to-class-mean and top concepts per component.")
      .def(
          "calibrate",
          [](const GmmModel& g, const DoubleArray& rows, double q) {
            return calibrate_outliers(g, matrix_from(rows), q);
          },
          py::arg("rows"), py::arg("q") = 5.0)
      .def(
          "outlier_score",
          [](const GmmModel& g, const DoubleArray& v,
             const OutlierCalibration& cal) {
            const OutlierScore s = outlier_score(vec_from(v), g, cal);
            py::dict d;
            d["log_likelihood"] = s.log_likelihood;
            d["percentile"] = s.percentile;
            d["flagged"] = s.flagged;
            return d;
          },
          py::arg("vector"), py::arg("calibration"))
      .def(
          "diff",
          [](const GmmModel& g, const DoubleArray& v,
             std::int64_t component) {
            const DiffReport r =
                difference_to_prototype(vec_from(v), g, component);
            py::list out;
            for (const DiffEntry& e : r.entries) {
              py::dict d;
              d["concept"] = e.concept_index;
              d["test"] = e.test_value;
              d["prototype"] = e.prototype_value;
              d["delta"] = e.delta;
              out.append(d);
            }
            return out;
          },
          py::arg("vector"), py::arg("component"),
          "Concept-wise differences to the component mean, by |delta|.")
      .def("__repr__", [](const GmmModel& g) {
        const std::size_t c = g.means.empty() ? 0 : g.means[0].size();
        return "<relprop.Gmm k=" + std::to_string(g.k) + ", " +
               std::to_string(c) + " concepts>";
      });

  // --- fixtures ------------------------------------------------------------

  m.def(
      "build_toy_model",
      [](const std::string& arch, std::int64_t width, const std::string& mode,
         std::uint64_t seed, std::int64_t image_size) {
        ToyModelSpec spec;
        spec.arch = arch;
        spec.width = width;
        spec.mode = weight_mode(mode);
        spec.seed = seed;
        spec.image_size = image_size;
        return build_toy_model(spec);
      },
      py::arg("arch") = "toy-pid", py::arg("width") = 6,
      py::arg("mode") = "handcrafted", py::arg("seed") = 0,
      py::arg("image_size") = 64,
      "Builds toy-pid (gated two-branch segmentation) or toy-det (grid "
      "detector), with handcrafted or random weights.");

  m.def(
      "load_model",
      [](const std::filesystem::path& dir) { return load_model_dir(dir); },
      py::arg("path"), "Loads model.json + weights.bin from a directory.");

  m.def(
      "save_model",
      [](const Graph& g, const std::filesystem::path& dir) {
        save_model_dir(g, dir);
      },
      py::arg("graph"), py::arg("path"));

  m.def(
      "render_scene",
      [](std::uint64_t seed, std::int64_t image_size, double noise,
         std::int64_t min_cars, std::int64_t max_cars,
         const std::optional<std::vector<std::string>>& palette) {
        const SceneConfig cfg =
            scene_config(image_size, noise, min_cars, max_cars, palette);
        const Scene s = render_scene(cfg, seed);
        return py::make_tuple(to_numpy(s.image),
                              mask_to_numpy(s.mask, cfg.image_size),
                              boxes_list(s.cars));
      },
      py::arg("seed"), py::arg("image_size") = 64, py::arg("noise") = 0.015,
      py::arg("min_cars") = 0, py::arg("max_cars") = 2,
      py::arg("palette") = py::none(),
      "One synthetic scene: (image, mask, boxes). Classes: 0 background, "
      "1 flood, 2 road.");

  m.def(
      "write_dataset",
      [](const std::filesystem::path& dir, std::int64_t n, std::uint64_t seed,
         std::int64_t image_size, double noise, std::int64_t min_cars,
         std::int64_t max_cars,
         const std::optional<std::vector<std::string>>& palette, int jobs) {
        write_dataset(scene_config(image_size, noise, min_cars, max_cars,
                                   palette),
                      n, seed, dir, jobs);
      },
      py::arg("path"), py::arg("n"), py::arg("seed"),
      py::arg("image_size") = 64, py::arg("noise") = 0.015,
      py::arg("min_cars") = 0, py::arg("max_cars") = 2,
      py::arg("palette") = py::none(), py::arg("jobs") = 1,
      "Writes images/, masks/, boxes.json and manifest.json.");

  m.def(
      "load_dataset",
      [](const std::filesystem::path& dir) {
        const Dataset d = load_dataset(dir);
        py::list samples;
        for (const DatasetSample& s : d.samples) {
          py::dict e;
          e["name"] = s.name;
          e["image"] = to_numpy(s.image);
          e["mask"] = mask_to_numpy(s.mask, d.image_size);
          e["boxes"] = boxes_list(s.cars);
          samples.append(e);
        }
        py::dict out;
        out["image_size"] = d.image_size;
        out["seed"] = d.seed;
        out["samples"] = samples;
        return out;
      },
      py::arg("path"));

  m.def(
      "train",
      [](Graph& g, const std::filesystem::path& data, std::int64_t epochs,
         double lr, std::uint64_t seed) {
        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.seed = seed;
        const TrainResult r = train_sgd(g, load_dataset(data), cfg);
        py::dict out;
        out["loss_history"] = vec_to_numpy(r.loss_history);
        out["diverged"] = r.diverged;
        out["note"] = r.note;
        return out;
      },
      py::arg("graph"), py::arg("data"), py::arg("epochs") = 30,
      py::arg("lr") = 0.05, py::arg("seed") = 0,
      "In-place SGD on a dataset directory; returns the loss history.");

  // --- forward, targets, LRP ----------------------------------------------

  m.def(
      "forward",
      [](const Graph& g, const DoubleArray& image) {
        return forward(g, tensor_from(image));
      },
      py::arg("graph"), py::arg("image"), py::keep_alive<0, 1>(),
      "Runs every node once; returns the activation tape.");

  m.def(
      "target",
      [](const ForwardTape& tape, const std::optional<std::string>& head,
         const std::optional<std::string>& mode, std::optional<int>
             class_index,
         std::optional<std::pair<std::int64_t, std::int64_t>> cell,
         const std::optional<DoubleArray>& region) {
        return default_target(tape, head, mode_from(mode), class_index, cell,
                              region_from(region));
      },
      py::arg("tape"), py::arg("head") = py::none(),
      py::arg("mode") = py::none(), py::arg("class_index") = py::none(),
      py::arg("cell") = py::none(), py::arg("region") = py::none(),
      "Fills in target defaults: head seg/cls, segmentation class 1 "
      "(flood), detection cell and class by argmax. region is an (h, w) "
      "mask restricting a segmentation target.");

  m.def(
      "select",
      [](const ForwardTape& tape, const std::optional<TargetSpec>& target) {
        return select_scalar(tape,
                             resolve_target(tape, target_or_default(
                                                      tape, target)))
            .value;
      },
      py::arg("tape"), py::arg("target") = py::none(),
      "The explained scalar: the class logit summed over the region, or "
      "the logit at the cell.");

  m.def(
      "lrp",
      [](const ForwardTape& tape, const std::optional<TargetSpec>& target,
         const std::optional<RuleMap>& rules,
         const std::optional<RuleMap>& node_rules,
         const std::optional<std::pair<std::string,
                                       std::vector<std::int64_t>>>&
             condition) {
        const TargetSpec resolved =
            resolve_target(tape, target_or_default(tape, target));
        const SelectedScalar sel = select_scalar(tape, resolved);
        Explanation e;
        e.result =
            lrp_backward(tape, resolved.head, sel.seed,
                         assignment_from(rules, node_rules),
                         condition_from(condition));
        e.target = resolved;
        e.scalar = sel.value;
        return e;
      },
      py::arg("tape"), py::arg("target") = py::none(),
      py::arg("rules") = py::none(), py::arg("node_rules") = py::none(),
      py::arg("condition") = py::none(), py::keep_alive<0, 1>(),
      "LRP backward pass. rules maps node kinds to rule specs "
      "(\"epsilon:0.01\", \"zplus\", ...), node_rules maps node ids; "
      "condition = (layer, channels) restricts the pass to those channels.");

  m.def(
      "gradient",
      [](const ForwardTape& tape, const std::optional<TargetSpec>& target) {
        const GradientTape grads =
            backward_gradient(tape, target_or_default(tape, target));
        return to_numpy(grads.grad_of(single_input(*tape.graph)));
      },
      py::arg("tape"), py::arg("target") = py::none(),
      "Exact gradient of the target scalar w.r.t. the input.");

  m.def(
      "conditional_heatmap",
      [](const ForwardTape& tape, const std::string& layer,
         const std::vector<std::int64_t>& channels,
         const std::optional<TargetSpec>& target,
         const std::optional<RuleMap>& rules,
         const std::optional<RuleMap>& node_rules) {
        const TargetSpec resolved =
            resolve_target(tape, target_or_default(tape, target));
        const SelectedScalar sel = select_scalar(tape, resolved);
        return to_numpy(conditional_heatmap(
            tape, layer, channels, {{resolved.head, sel.seed}},
            assignment_from(rules, node_rules)));
      },
      py::arg("tape"), py::arg("layer"), py::arg("channels"),
      py::arg("target") = py::none(), py::arg("rules") = py::none(),
      py::arg("node_rules") = py::none(),
      "Input relevance with the backward pass restricted to the given "
      "channels of one layer.");

  m.def(
      "render_heatmap",
      [](const DoubleArray& map, const std::filesystem::path& path) {
        const py::buffer_info info = map.request();
        Tensor t;
        if (info.ndim == 2) {
          const double* src = static_cast<const double*>(info.ptr);
          t = Tensor({1, 1, info.shape[0], info.shape[1]},
                     std::vector<double>(
                         src, src + info.shape[0] * info.shape[1]));
        } else {
          t = flatten_heatmap(tensor_from(map));
        }
        render_heatmap(t, path);
      },
      py::arg("map"), py::arg("path"),
      "Diverging-colormap PNG of a relevance map; channels are summed "
      "first.");

  // --- concept prototypes --------------------------------------------------

  m.def(
      "normalize_l1",
      [](const DoubleArray& v) { return vec_to_numpy(normalize_l1(vec_from(v))); },
      py::arg("vector"));

  m.def(
      "cosine_similarity",
      [](const DoubleArray& a, const DoubleArray& b) {
        return cosine_similarity(vec_from(a), vec_from(b));
      },
      py::arg("a"), py::arg("b"));

  m.def(
      "fit_gmm",
      [](const DoubleArray& rows, int k, std::uint64_t seed, int max_iter,
         double tol) { return fit_gmm(matrix_from(rows), k, seed, max_iter, tol); },
      py::arg("rows"), py::arg("k"), py::arg("seed") = 0,
      py::arg("max_iter") = 300, py::arg("tol") = 1e-8,
      "EM fit of a diagonal GMM on the (n, c) rows.");

  // --- perturbation benchmark ----------------------------------------------

  m.def(
      "channel_scores",
      [](const ForwardTape& tape, const std::string& layer,
         const std::optional<TargetSpec>& target, const std::string& method,
         std::uint64_t seed, const std::optional<RuleMap>& rules,
         const std::optional<RuleMap>& node_rules) {
        const ScoreMethod sm =
            method_from(method, assignment_from(rules, node_rules), seed);
        return vec_to_numpy(
            channel_scores(tape, layer, target_or_default(tape, target), sm)
                .values);
      },
      py::arg("tape"), py::arg("layer"), py::arg("target") = py::none(),
      py::arg("method") = "lrp", py::arg("seed") = 0,
      py::arg("rules") = py::none(), py::arg("node_rules") = py::none(),
      "Per-channel importance at one layer (methods: lrp, gradient, "
      "gradcam, activation, random).");

  m.def(
      "rank_channels",
      [](const DoubleArray& scores) {
        ChannelVector cv;
        cv.values = vec_from(scores);
        return rank_channels(cv);
      },
      py::arg("scores"), "Most-relevant-first order, ties to lower index.");

  m.def(
      "deletion_curve",
      [](const Graph& g, const DoubleArray& image, const std::string& layer,
         const std::vector<std::int64_t>& order,
         const std::optional<TargetSpec>& target) {
        const Tensor input = tensor_from(image);
        TargetSpec spec;
        if (target) {
          spec = *target;
        } else {
          const ForwardTape tape = forward(g, input);
          spec = default_target(tape, std::nullopt);
        }
        return curve_dict(deletion_curve(g, input, layer, spec, order));
      },
      py::arg("graph"), py::arg("image"), py::arg("layer"), py::arg("order"),
      py::arg("target") = py::none(),
      "Logit trajectory while channels are zeroed in rank order; includes "
      "the area over the curve.");

  m.def(
      "insertion_curve",
      [](const Graph& g, const DoubleArray& image, const std::string& layer,
         const std::vector<std::int64_t>& order,
         const std::optional<TargetSpec>& target) {
        const Tensor input = tensor_from(image);
        TargetSpec spec;
        if (target) {
          spec = *target;
        } else {
          const ForwardTape tape = forward(g, input);
          spec = default_target(tape, std::nullopt);
        }
        return curve_dict(insertion_curve(g, input, layer, spec, order));
      },
      py::arg("graph"), py::arg("image"), py::arg("layer"), py::arg("order"),
      py::arg("target") = py::none(),
      "Logit trajectory while channels are restored in rank order; "
      "includes the area under the curve.");

  m.def(
      "paired_sign_test",
      [](const DoubleArray& a, const DoubleArray& b) {
        return paired_sign_test(vec_from(a), vec_from(b));
      },
      py::arg("a"), py::arg("b"),
      "One-sided exact binomial test that a exceeds b pairwise.");
}
