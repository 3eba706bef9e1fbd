#include "relprop/graph_io.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "relprop/errors.hpp"

namespace relprop {

using ordered_json = nlohmann::ordered_json;

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f),
                                   std::istreambuf_iterator<char>());
}

// f32 little-endian <-> f64
std::vector<double> widen_f32(const std::vector<std::uint8_t>& blob,
                              std::size_t byte_offset, std::size_t count,
                              const std::string& what) {
  const std::size_t bytes = count * 4;
  if (byte_offset + bytes > blob.size()) {
    throw DataError(what + ": weight slice [" + std::to_string(byte_offset) +
                    ", " + std::to_string(byte_offset + bytes) +
                    ") exceeds blob size " + std::to_string(blob.size()));
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* p = blob.data() + byte_offset + i * 4;
    const std::uint32_t u = std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
                            std::uint32_t(p[2]) << 16 |
                            std::uint32_t(p[3]) << 24;
    float f;
    std::memcpy(&f, &u, 4);
    out[i] = static_cast<double>(f);
  }
  return out;
}

void append_f32(std::vector<std::uint8_t>& blob, std::span<const double> v) {
  for (double d : v) {
    const float f = static_cast<float>(d);
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    blob.push_back(static_cast<std::uint8_t>(u & 0xff));
    blob.push_back(static_cast<std::uint8_t>((u >> 8) & 0xff));
    blob.push_back(static_cast<std::uint8_t>((u >> 16) & 0xff));
    blob.push_back(static_cast<std::uint8_t>((u >> 24) & 0xff));
  }
}

Shape4 shape_from_json(const ordered_json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 4) {
    throw DataError(what + ": shape must be a 4-element array");
  }
  return Shape4{j[0].get<std::int64_t>(), j[1].get<std::int64_t>(),
                j[2].get<std::int64_t>(), j[3].get<std::int64_t>()};
}

}  // namespace

Graph load_model(const std::filesystem::path& manifest,
                 const std::filesystem::path& weights) {
  ordered_json j;
  {
    std::ifstream f(manifest);
    if (!f) throw DataError("cannot open '" + manifest.string() + "'");
    try {
      f >> j;
    } catch (const std::exception& e) {
      throw DataError("parse error in '" + manifest.string() +
                      "': " + e.what());
    }
  }
  if (!j.contains("format_version") || j["format_version"].get<int>() != 1) {
    throw DataError("manifest '" + manifest.string() +
                    "': unsupported or missing format_version (expected 1)");
  }
  const std::vector<std::uint8_t> blob = read_file(weights);

  Graph g;
  if (!j.contains("inputs") || !j["inputs"].is_array()) {
    throw DataError("manifest: missing 'inputs' array");
  }
  for (const auto& in : j["inputs"]) {
    Node n;
    n.id = in.at("id").get<std::string>();
    n.kind = NodeKind::Input;
    n.input_shape = shape_from_json(in.at("shape"), "input '" + n.id + "'");
    g.add(std::move(n));
  }
  if (!j.contains("nodes") || !j["nodes"].is_array()) {
    throw DataError("manifest: missing 'nodes' array");
  }
  // Nodes may be declared in any order; add with deferred reference checks
  // and topo-sort afterwards.
  std::vector<Node> pending;
  for (const auto& nj : j["nodes"]) {
    Node n;
    n.id = nj.at("id").get<std::string>();
    const std::string kind = nj.at("kind").get<std::string>();
    auto k = node_kind_from_name(kind);
    if (!k || *k == NodeKind::Input) {
      throw DataError("node '" + n.id + "': unknown kind '" + kind + "'");
    }
    n.kind = *k;
    if (nj.contains("inputs")) {
      for (const auto& s : nj["inputs"]) {
        n.inputs.push_back(s.get<std::string>());
      }
    }
    const ordered_json params =
        nj.contains("params") ? nj["params"] : ordered_json::object();
    if (n.kind == NodeKind::Conv2D) {
      n.conv.stride = params.value("stride", 1);
      n.conv.pad = params.value("pad", 0);
      if (n.conv.stride < 1 || n.conv.pad < 0) {
        throw DataError("node '" + n.id + "': invalid stride/pad");
      }
    } else if (n.kind == NodeKind::GatedMul) {
      const std::string mode = params.value("gate_mode", "sigmoid");
      if (mode == "sigmoid") {
        n.gate_mode = GateMode::Sigmoid;
      } else if (mode == "one_minus_sigmoid") {
        n.gate_mode = GateMode::OneMinusSigmoid;
      } else {
        throw DataError("node '" + n.id + "': unknown gate_mode '" + mode +
                        "'");
      }
    } else if (n.kind == NodeKind::BilinearResize) {
      if (!params.contains("out_h") || !params.contains("out_w")) {
        throw DataError("node '" + n.id + "': resize needs out_h/out_w");
      }
      n.resize.out_h = params["out_h"].get<std::int64_t>();
      n.resize.out_w = params["out_w"].get<std::int64_t>();
      n.resize.align_corners = params.value("align_corners", true);
    }
    if (nj.contains("weight_refs")) {
      for (const auto& wr : nj["weight_refs"]) {
        const std::string name = wr.at("name").get<std::string>();
        const std::size_t off = wr.at("byte_offset").get<std::size_t>();
        if (name == "weight") {
          Shape4 ws =
              shape_from_json(wr.at("shape"), "node '" + n.id + "' weight");
          std::vector<double> vals = widen_f32(
              blob, off, static_cast<std::size_t>(ws.count()),
              "node '" + n.id + "' weight");
          n.weight = Tensor(ws, std::move(vals));
        } else if (name == "bias") {
          const auto& sj = wr.at("shape");
          if (!sj.is_array() || sj.size() != 1) {
            throw DataError("node '" + n.id +
                            "' bias: shape must be a 1-element array");
          }
          const std::size_t count = sj[0].get<std::size_t>();
          n.bias = widen_f32(blob, off, count, "node '" + n.id + "' bias");
        } else {
          throw DataError("node '" + n.id + "': unknown weight_ref '" + name +
                          "'");
        }
      }
    }
    pending.push_back(std::move(n));
  }
  for (Node& n : pending) {
    g.add_unordered(std::move(n));
  }
  g.topo_sort();

  if (!j.contains("outputs") || !j["outputs"].is_array()) {
    throw DataError("manifest: missing 'outputs' array");
  }
  for (const auto& o : j["outputs"]) {
    g.declare_output(o.get<std::string>());
  }
  if (j.contains("meta")) {
    for (const auto& [k2, v] : j["meta"].items()) {
      g.meta[k2] = v.get<std::string>();
    }
  }

  std::vector<std::string> errors = g.validate();
  if (!errors.empty()) {
    std::string msg = "model validation failed:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw DataError(msg);
  }
  return g;
}

void save_model(const Graph& graph, const std::filesystem::path& manifest,
                const std::filesystem::path& weights) {
  ordered_json j;
  j["format_version"] = 1;
  j["inputs"] = ordered_json::array();
  j["nodes"] = ordered_json::array();
  std::vector<std::uint8_t> blob;
  for (const Node& n : graph.nodes()) {
    if (n.kind == NodeKind::Input) {
      j["inputs"].push_back(
          {{"id", n.id},
           {"shape", {n.input_shape.n, n.input_shape.c, n.input_shape.h,
                      n.input_shape.w}}});
      continue;
    }
    ordered_json nj;
    nj["id"] = n.id;
    nj["kind"] = node_kind_name(n.kind);
    ordered_json params = ordered_json::object();
    if (n.kind == NodeKind::Conv2D) {
      params["stride"] = n.conv.stride;
      params["pad"] = n.conv.pad;
    } else if (n.kind == NodeKind::GatedMul) {
      params["gate_mode"] = n.gate_mode == GateMode::Sigmoid
                                ? "sigmoid"
                                : "one_minus_sigmoid";
    } else if (n.kind == NodeKind::BilinearResize) {
      params["out_h"] = n.resize.out_h;
      params["out_w"] = n.resize.out_w;
      params["align_corners"] = n.resize.align_corners;
    }
    if (!params.empty()) nj["params"] = params;
    nj["inputs"] = n.inputs;
    if (n.kind == NodeKind::Conv2D) {
      ordered_json refs = ordered_json::array();
      const Shape4& ws = n.weight.shape();
      refs.push_back({{"name", "weight"},
                      {"shape", {ws.n, ws.c, ws.h, ws.w}},
                      {"byte_offset", blob.size()}});
      append_f32(blob, n.weight.values());
      if (!n.bias.empty()) {
        refs.push_back({{"name", "bias"},
                        {"shape", {n.bias.size()}},
                        {"byte_offset", blob.size()}});
        append_f32(blob, n.bias);
      }
      nj["weight_refs"] = refs;
    }
    j["nodes"].push_back(nj);
  }
  j["outputs"] = graph.output_ids();
  if (!graph.meta.empty()) {
    ordered_json meta = ordered_json::object();
    for (const auto& [k, v] : graph.meta) meta[k] = v;
    j["meta"] = meta;
  }

  std::filesystem::create_directories(manifest.parent_path().empty()
                                          ? "."
                                          : manifest.parent_path());
  {
    std::ofstream f(manifest);
    if (!f) throw DataError("cannot write '" + manifest.string() + "'");
    f << j.dump(2) << "\n";
  }
  {
    std::ofstream f(weights, std::ios::binary);
    if (!f) throw DataError("cannot write '" + weights.string() + "'");
    f.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size()));
  }
}

Graph load_model_dir(const std::filesystem::path& dir) {
  return load_model(dir / "model.json", dir / "weights.bin");
}

void save_model_dir(const Graph& graph, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_model(graph, dir / "model.json", dir / "weights.bin");
}

}  // namespace relprop
