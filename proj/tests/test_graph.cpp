#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "relprop/errors.hpp"
#include "relprop/gradient.hpp"
#include "relprop/graph.hpp"
#include "relprop/graph_io.hpp"
#include "relprop/target.hpp"

using namespace relprop;
using oracles::max_abs_diff;
using oracles::random_tensor;

namespace {

Node input_node(const std::string& id, Shape4 shape) {
  Node n;
  n.id = id;
  n.kind = NodeKind::Input;
  n.input_shape = shape;
  return n;
}

Node conv_node(const std::string& id, const std::string& src, Tensor weight,
               std::vector<double> bias, int stride = 1, int pad = 0) {
  Node n;
  n.id = id;
  n.kind = NodeKind::Conv2D;
  n.inputs = {src};
  n.weight = std::move(weight);
  n.bias = std::move(bias);
  n.conv = {stride, pad};
  return n;
}

Node unary_node(const std::string& id, NodeKind kind, const std::string& src) {
  Node n;
  n.id = id;
  n.kind = kind;
  n.inputs = {src};
  return n;
}

Node binary_node(const std::string& id, NodeKind kind, const std::string& a,
                 const std::string& b,
                 GateMode mode = GateMode::Sigmoid) {
  Node n;
  n.id = id;
  n.kind = kind;
  n.inputs = {a, b};
  n.gate_mode = mode;
  return n;
}

Node resize_node(const std::string& id, const std::string& src,
                 std::int64_t h, std::int64_t w, bool align = true) {
  Node n;
  n.id = id;
  n.kind = NodeKind::BilinearResize;
  n.inputs = {src};
  n.resize = {h, w, align};
  return n;
}

// A compact graph touching every node kind, used for end-to-end checks.
Graph all_kinds_graph(std::uint64_t seed) {
  Rng rng(seed);
  Graph g;
  g.add(input_node("in", Shape4{1, 2, 8, 8}));
  g.add(conv_node("c1", "in", random_tensor(Shape4{4, 2, 3, 3}, rng, -0.5, 0.5),
                  {0.1, -0.2, 0.05, 0.0}, 2, 1));
  g.add(unary_node("r1", NodeKind::ReLU, "c1"));
  g.add(conv_node("c2", "r1", random_tensor(Shape4{4, 4, 1, 1}, rng, -1, 1),
                  {}));
  g.add(binary_node("g1", NodeKind::GatedMul, "r1", "c2"));
  g.add(conv_node("c3", "r1", random_tensor(Shape4{4, 4, 1, 1}, rng, -1, 1),
                  {0.0, 0.1, -0.1, 0.2}));
  g.add(binary_node("g2", NodeKind::GatedMul, "g1", "c3",
                    GateMode::OneMinusSigmoid));
  g.add(binary_node("a1", NodeKind::Add, "g2", "r1"));
  Node cc;
  cc.id = "cc";
  cc.kind = NodeKind::ConcatC;
  cc.inputs = {"a1", "r1"};
  g.add(std::move(cc));
  g.add(conv_node("cls", "cc", random_tensor(Shape4{2, 8, 1, 1}, rng, -1, 1),
                  {0.05, -0.05}));
  g.add(unary_node("sg", NodeKind::Sigmoid, "cls"));
  g.add(resize_node("up", "sg", 6, 6));
  g.add(unary_node("out", NodeKind::Output, "up"));
  g.declare_output("out");
  return g;
}

TargetSpec full_region_target(const std::string& head, int cls,
                              std::int64_t h, std::int64_t w) {
  TargetSpec t;
  t.head = head;
  t.mode = TargetMode::Segmentation;
  t.class_index = cls;
  Region r;
  r.h = h;
  r.w = w;
  r.mask.assign(static_cast<std::size_t>(h * w), 1);
  t.region = r;
  return t;
}

// Central finite differences against the analytic input gradient.
double fd_max_rel_error(const Graph& g, const Tensor& input,
                        const TargetSpec& target, double step = 1e-5) {
  ForwardTape tape = forward(g, input);
  GradientTape grads = backward_gradient(tape, target);
  const Tensor& analytic = grads.grad_of(g.input_ids()[0]);

  double worst = 0.0;
  Tensor probe = input;
  for (std::int64_t i = 0; i < input.size(); ++i) {
    const double keep = probe.values()[i];
    probe.values()[i] = keep + step;
    const double up = select_scalar(forward(g, probe), target).value;
    probe.values()[i] = keep - step;
    const double dn = select_scalar(forward(g, probe), target).value;
    probe.values()[i] = keep;
    const double fd = (up - dn) / (2 * step);
    const double a = analytic.values()[i];
    const double denom = std::max(std::abs(fd) + std::abs(a), 1e-6);
    worst = std::max(worst, std::abs(fd - a) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("forward of a single ReLU graph") {
  Graph g;
  g.add(input_node("in", Shape4{1, 1, 1, 2}));
  g.add(unary_node("r", NodeKind::ReLU, "in"));
  g.add(unary_node("out", NodeKind::Output, "r"));
  g.declare_output("out");
  ForwardTape tape = forward(g, Tensor(Shape4{1, 1, 1, 2}, {-1, 2}));
  CHECK(tape.output_of("out").at(0, 0, 0, 0) == 0.0);
  CHECK(tape.output_of("out").at(0, 0, 0, 1) == 2.0);
  CHECK(tape.outputs.size() == g.nodes().size());
}

TEST_CASE("forward is deterministic") {
  Graph g = all_kinds_graph(2);
  Rng rng(9);
  Tensor x = random_tensor(Shape4{1, 2, 8, 8}, rng);
  ForwardTape t1 = forward(g, x);
  ForwardTape t2 = forward(g, x);
  for (std::size_t i = 0; i < t1.outputs.size(); ++i) {
    CHECK(max_abs_diff(t1.outputs[i], t2.outputs[i]) == 0.0);
  }
}

TEST_CASE("forward_from recomputes only downstream nodes") {
  Graph g = all_kinds_graph(3);
  Rng rng(10);
  Tensor x = random_tensor(Shape4{1, 2, 8, 8}, rng);
  ForwardTape base = forward(g, x);

  // Replace r1's output with a zeroed copy and compare against a full
  // forward of a graph whose r1 value is forced the same way: emulate by
  // replacing and checking the head against recomputation through tape.
  Tensor replacement(base.output_of("r1").shape());
  ForwardTape patched = forward_from(g, base, "r1", replacement);

  // Upstream entries must be shared values, head must differ.
  CHECK(max_abs_diff(patched.output_of("c1"), base.output_of("c1")) == 0.0);
  CHECK(max_abs_diff(patched.output_of("out"), base.output_of("out")) > 0.0);

  // Patching with the original value must reproduce the base tape exactly.
  ForwardTape same = forward_from(g, base, "r1", base.output_of("r1"));
  CHECK(max_abs_diff(same.output_of("out"), base.output_of("out")) == 0.0);
}

TEST_CASE("validate flags cycles") {
  Graph g;
  g.add(input_node("in", Shape4{1, 1, 2, 2}));
  Node a = unary_node("a", NodeKind::ReLU, "b");
  Node b;
  b.id = "b";
  b.kind = NodeKind::Add;
  b.inputs = {"in", "a"};
  g.add_unordered(std::move(a));
  g.add_unordered(std::move(b));
  g.add_unordered(unary_node("out", NodeKind::Output, "b"));
  g.declare_output("out");
  CHECK_THROWS_AS(g.topo_sort(), DataError);
  bool mentions_cycle = false;
  for (const std::string& e : g.validate()) {
    if (e.find("cycle") != std::string::npos) mentions_cycle = true;
  }
  CHECK(mentions_cycle);
}

TEST_CASE("validate flags arity violations") {
  Graph g;
  g.add(input_node("in", Shape4{1, 1, 2, 2}));
  Node gm;
  gm.id = "gm";
  gm.kind = NodeKind::GatedMul;
  gm.inputs = {"in"};  // needs two
  g.add(std::move(gm));
  g.add(unary_node("out", NodeKind::Output, "gm"));
  g.declare_output("out");
  std::vector<std::string> errors = g.validate();
  bool found = false;
  for (const std::string& e : errors) {
    if (e.find("gm") != std::string::npos &&
        e.find("expects 2") != std::string::npos) {
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("validate collects every violation") {
  Graph g;
  g.add(input_node("in", Shape4{1, 2, 4, 4}));
  // Bad conv (wrong channels) and a dangling output reference.
  g.add(conv_node("c", "in", Tensor(Shape4{1, 3, 1, 1}), {}));
  g.add(unary_node("out", NodeKind::Output, "c"));
  g.declare_output("out");
  g.declare_output("ghost");
  std::vector<std::string> errors = g.validate();
  CHECK(errors.size() >= 2);
}

TEST_CASE("all-kinds graph validates cleanly") {
  Graph g = all_kinds_graph(1);
  CHECK(g.validate().empty());
}

TEST_CASE("model save/load round trip preserves forward outputs") {
  Graph g = all_kinds_graph(4);
  auto dir = std::filesystem::temp_directory_path() / "relprop_roundtrip";
  std::filesystem::create_directories(dir);
  save_model_dir(g, dir);
  Graph loaded = load_model_dir(dir);

  Rng rng(21);
  Tensor x = random_tensor(Shape4{1, 2, 8, 8}, rng);
  Tensor a = forward(g, x).output_of("out");
  Tensor b = forward(loaded, x).output_of("out");
  CHECK(max_abs_diff(a, b) < 1e-6);  // weights pass through 32-bit storage
}

TEST_CASE("manifest with one conv node loads") {
  auto dir = std::filesystem::temp_directory_path() / "relprop_one_conv";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "model.json");
    f << R"({
      "format_version": 1,
      "inputs": [{"id": "in", "shape": [1, 1, 2, 2]}],
      "nodes": [
        {"id": "c", "kind": "Conv2D", "params": {"stride": 1, "pad": 0},
         "inputs": ["in"],
         "weight_refs": [{"name": "weight", "shape": [1, 1, 1, 1],
                          "byte_offset": 0}]},
        {"id": "out", "kind": "Output", "inputs": ["c"]}
      ],
      "outputs": ["out"]
    })";
  }
  {
    std::ofstream f(dir / "weights.bin", std::ios::binary);
    const float one = 1.0f;
    f.write(reinterpret_cast<const char*>(&one), 4);
  }
  Graph g = load_model_dir(dir);
  CHECK(g.nodes().size() == 3);
  Tensor y = forward(g, Tensor(Shape4{1, 1, 2, 2}, {1, 2, 3, 4}))
                 .output_of("out");
  CHECK(y.at(0, 0, 1, 1) == 4.0);
}

TEST_CASE("manifest referencing a missing node fails with its id") {
  auto dir = std::filesystem::temp_directory_path() / "relprop_missing";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "model.json");
    f << R"({
      "format_version": 1,
      "inputs": [{"id": "in", "shape": [1, 1, 2, 2]}],
      "nodes": [{"id": "r", "kind": "ReLU", "inputs": ["nope"]},
                {"id": "out", "kind": "Output", "inputs": ["r"]}],
      "outputs": ["out"]
    })";
  }
  { std::ofstream f(dir / "weights.bin", std::ios::binary); }
  try {
    load_model_dir(dir);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("nope") != std::string::npos);
  }
}

TEST_CASE("weight slice beyond the blob fails with the node name") {
  auto dir = std::filesystem::temp_directory_path() / "relprop_shortblob";
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "model.json");
    f << R"({
      "format_version": 1,
      "inputs": [{"id": "in", "shape": [1, 1, 2, 2]}],
      "nodes": [
        {"id": "c", "kind": "Conv2D", "inputs": ["in"],
         "weight_refs": [{"name": "weight", "shape": [1, 1, 2, 2],
                          "byte_offset": 8}]},
        {"id": "out", "kind": "Output", "inputs": ["c"]}
      ],
      "outputs": ["out"]
    })";
  }
  {
    std::ofstream f(dir / "weights.bin", std::ios::binary);
    const float pad[2] = {0, 0};
    f.write(reinterpret_cast<const char*>(pad), 8);
  }
  try {
    load_model_dir(dir);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("'c'") != std::string::npos);
  }
}

TEST_CASE("select_scalar on a single-pixel region") {
  Graph g;
  g.add(input_node("in", Shape4{1, 1, 2, 2}));
  g.add(unary_node("out", NodeKind::Output, "in"));
  g.declare_output("out");
  ForwardTape tape = forward(g, Tensor(Shape4{1, 1, 2, 2}, {0, 0, 0, 2.5}));

  TargetSpec t;
  t.head = "out";
  t.class_index = 0;
  Region r;
  r.h = 2;
  r.w = 2;
  r.mask = {0, 0, 0, 1};
  t.region = r;
  SelectedScalar sel = select_scalar(tape, t);
  CHECK(sel.value == 2.5);
  int nonzero = 0;
  for (double v : sel.seed.values()) nonzero += (v != 0.0);
  CHECK(nonzero == 1);
  CHECK(sel.seed.at(0, 0, 1, 1) == 2.5);
}

TEST_CASE("select_scalar sums a constant map over the region") {
  Graph g;
  g.add(input_node("in", Shape4{1, 1, 3, 3}));
  g.add(unary_node("out", NodeKind::Output, "in"));
  g.declare_output("out");
  ForwardTape tape = forward(g, Tensor::full(Shape4{1, 1, 3, 3}, 1.5));
  TargetSpec t = full_region_target("out", 0, 3, 3);
  t.region->mask = {1, 1, 0, 0, 1, 0, 0, 0, 1};  // m = 4 pixels
  CHECK(select_scalar(tape, t).value == doctest::Approx(6.0));
}

TEST_CASE("select_scalar matches a loop oracle on random input") {
  Graph g;
  g.add(input_node("in", Shape4{1, 3, 4, 5}));
  g.add(unary_node("out", NodeKind::Output, "in"));
  g.declare_output("out");
  Rng rng(33);
  Tensor logits = random_tensor(Shape4{1, 3, 4, 5}, rng);
  ForwardTape tape = forward(g, logits);

  TargetSpec t = full_region_target("out", 2, 4, 5);
  for (auto& m : t.region->mask) m = rng.uniform() < 0.5 ? 1 : 0;
  if (t.region->count() == 0) t.region->mask[0] = 1;

  double want = 0.0;
  for (std::int64_t y = 0; y < 4; ++y) {
    for (std::int64_t x = 0; x < 5; ++x) {
      if (t.region->at(y, x)) want += logits.at(0, 2, y, x);
    }
  }
  CHECK(select_scalar(tape, t).value == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("select_scalar rejects an empty region") {
  Graph g;
  g.add(input_node("in", Shape4{1, 1, 2, 2}));
  g.add(unary_node("out", NodeKind::Output, "in"));
  g.declare_output("out");
  ForwardTape tape = forward(g, Tensor::full(Shape4{1, 1, 2, 2}, 1.0));
  TargetSpec t = full_region_target("out", 0, 2, 2);
  t.region->mask = {0, 0, 0, 0};
  CHECK_THROWS_AS(select_scalar(tape, t), DataError);
}

TEST_CASE("detection target picks one cell") {
  Graph g;
  g.add(input_node("in", Shape4{1, 2, 3, 3}));
  g.add(unary_node("out", NodeKind::Output, "in"));
  g.declare_output("out");
  Rng rng(5);
  Tensor logits = random_tensor(Shape4{1, 2, 3, 3}, rng);
  ForwardTape tape = forward(g, logits);
  TargetSpec t;
  t.head = "out";
  t.mode = TargetMode::Detection;
  t.class_index = 1;
  t.cell = {{2, 0}};
  SelectedScalar sel = select_scalar(tape, t);
  CHECK(sel.value == logits.at(0, 1, 2, 0));
  CHECK(sel.seed.at(0, 1, 2, 0) == sel.value);

  t.cell = {{5, 0}};
  CHECK_THROWS_AS(select_scalar(tape, t), ConfigError);
}

TEST_CASE("gradient closed form: y = relu(w*x)") {
  Graph g;
  g.add(input_node("in", Shape4{1, 1, 1, 1}));
  g.add(conv_node("c", "in", Tensor(Shape4{1, 1, 1, 1}, {2.0}), {}));
  g.add(unary_node("r", NodeKind::ReLU, "c"));
  g.add(unary_node("out", NodeKind::Output, "r"));
  g.declare_output("out");
  ForwardTape tape = forward(g, Tensor(Shape4{1, 1, 1, 1}, {3.0}));
  TargetSpec t = full_region_target("out", 0, 1, 1);
  GradientTape gt = backward_gradient(tape, t);
  CHECK(gt.grad_of("in").at(0, 0, 0, 0) == doctest::Approx(2.0));
}

TEST_CASE("gradient closed form: gated product dy/dg at x=1, g=0") {
  Graph g;
  g.add(input_node("x", Shape4{1, 1, 1, 1}));
  g.add(input_node("gate", Shape4{1, 1, 1, 1}));
  g.add(binary_node("gm", NodeKind::GatedMul, "x", "gate"));
  g.add(unary_node("out", NodeKind::Output, "gm"));
  g.declare_output("out");
  std::map<std::string, Tensor> feeds{
      {"x", Tensor(Shape4{1, 1, 1, 1}, {1.0})},
      {"gate", Tensor(Shape4{1, 1, 1, 1}, {0.0})}};
  ForwardTape tape = forward(g, feeds);
  TargetSpec t = full_region_target("out", 0, 1, 1);
  GradientTape gt = backward_gradient(tape, t);
  CHECK(gt.grad_of("gate").at(0, 0, 0, 0) == doctest::Approx(0.25));
  CHECK(gt.grad_of("x").at(0, 0, 0, 0) == doctest::Approx(0.5));
}

TEST_CASE("finite differences per node kind") {
  Rng rng(77);
  struct Case {
    const char* name;
    Graph g;
    Shape4 in_shape;
  };
  std::vector<Case> cases;

  {
    Graph g;
    g.add(input_node("in", Shape4{1, 2, 5, 5}));
    g.add(conv_node("c", "in",
                    random_tensor(Shape4{3, 2, 3, 3}, rng, -0.7, 0.7),
                    {0.1, -0.3, 0.2}, 2, 1));
    g.add(unary_node("out", NodeKind::Output, "c"));
    g.declare_output("out");
    cases.push_back({"conv", std::move(g), Shape4{1, 2, 5, 5}});
  }
  {
    Graph g;
    g.add(input_node("in", Shape4{1, 2, 4, 4}));
    g.add(unary_node("r", NodeKind::ReLU, "in"));
    g.add(unary_node("out", NodeKind::Output, "r"));
    g.declare_output("out");
    cases.push_back({"relu", std::move(g), Shape4{1, 2, 4, 4}});
  }
  {
    Graph g;
    g.add(input_node("in", Shape4{1, 2, 4, 4}));
    g.add(unary_node("s", NodeKind::Sigmoid, "in"));
    g.add(unary_node("out", NodeKind::Output, "s"));
    g.declare_output("out");
    cases.push_back({"sigmoid", std::move(g), Shape4{1, 2, 4, 4}});
  }
  {
    Graph g;
    g.add(input_node("in", Shape4{1, 2, 4, 4}));
    g.add(conv_node("c", "in", random_tensor(Shape4{2, 2, 1, 1}, rng, -1, 1),
                    {}));
    g.add(binary_node("a", NodeKind::Add, "in", "c"));
    g.add(unary_node("out", NodeKind::Output, "a"));
    g.declare_output("out");
    cases.push_back({"add", std::move(g), Shape4{1, 2, 4, 4}});
  }
  for (GateMode mode : {GateMode::Sigmoid, GateMode::OneMinusSigmoid}) {
    Graph g;
    g.add(input_node("in", Shape4{1, 2, 4, 4}));
    g.add(conv_node("c", "in", random_tensor(Shape4{2, 2, 1, 1}, rng, -1, 1),
                    {}));
    g.add(binary_node("gm", NodeKind::GatedMul, "in", "c", mode));
    g.add(unary_node("out", NodeKind::Output, "gm"));
    g.declare_output("out");
    cases.push_back({"gatedmul", std::move(g), Shape4{1, 2, 4, 4}});
  }
  {
    Graph g;
    g.add(input_node("in", Shape4{1, 2, 4, 4}));
    Node cc;
    cc.id = "cc";
    cc.kind = NodeKind::ConcatC;
    cc.inputs = {"in", "in"};
    g.add(std::move(cc));
    g.add(conv_node("c", "cc", random_tensor(Shape4{2, 4, 1, 1}, rng, -1, 1),
                    {}));
    g.add(unary_node("out", NodeKind::Output, "c"));
    g.declare_output("out");
    cases.push_back({"concat", std::move(g), Shape4{1, 2, 4, 4}});
  }
  for (bool align : {true, false}) {
    Graph g;
    g.add(input_node("in", Shape4{1, 2, 4, 4}));
    g.add(resize_node("up", "in", 7, 9, align));
    g.add(unary_node("out", NodeKind::Output, "up"));
    g.declare_output("out");
    cases.push_back({"resize", std::move(g), Shape4{1, 2, 4, 4}});
  }

  for (Case& c : cases) {
    CAPTURE(c.name);
    Tensor x = random_tensor(c.in_shape, rng, -1.5, 1.5);
    ForwardTape tape = forward(c.g, x);
    const Shape4& hs = tape.output_of("out").shape();
    TargetSpec t = full_region_target("out", 0, hs.h, hs.w);
    CHECK(fd_max_rel_error(c.g, x, t) < 1e-4);
  }
}

TEST_CASE("finite differences on the full all-kinds graph") {
  Graph g = all_kinds_graph(5);
  Rng rng(12);
  Tensor x = random_tensor(Shape4{1, 2, 8, 8}, rng, -1, 1);
  TargetSpec t = full_region_target("out", 1, 6, 6);
  CHECK(fd_max_rel_error(g, x, t) < 1e-4);
}

TEST_CASE("weight and bias gradients match finite differences") {
  Rng rng(55);
  Graph g;
  g.add(input_node("in", Shape4{1, 2, 4, 4}));
  g.add(conv_node("c", "in", random_tensor(Shape4{3, 2, 3, 3}, rng, -0.5, 0.5),
                  {0.1, 0.0, -0.2}, 1, 1));
  g.add(unary_node("r", NodeKind::ReLU, "c"));
  g.add(unary_node("out", NodeKind::Output, "r"));
  g.declare_output("out");
  Tensor x = random_tensor(Shape4{1, 2, 4, 4}, rng);
  TargetSpec t = full_region_target("out", 0, 4, 4);

  ForwardTape tape = forward(g, x);
  GradientTape gt = backward_gradient(tape, t);
  const std::size_t ci = g.index_of("c");
  const Tensor& wg = gt.weight_grads.at(ci);
  const std::vector<double>& bg = gt.bias_grads.at(ci);

  const double step = 1e-5;
  Node& conv = g.nodes()[g.index_of("c")];
  double worst = 0.0;
  for (std::int64_t i = 0; i < conv.weight.size(); ++i) {
    const double keep = conv.weight.values()[i];
    conv.weight.values()[i] = keep + step;
    const double up = select_scalar(forward(g, x), t).value;
    conv.weight.values()[i] = keep - step;
    const double dn = select_scalar(forward(g, x), t).value;
    conv.weight.values()[i] = keep;
    const double fd = (up - dn) / (2 * step);
    const double a = wg.values()[i];
    worst = std::max(worst,
                     std::abs(fd - a) / std::max(std::abs(fd) + std::abs(a),
                                                 1e-6));
  }
  for (std::size_t i = 0; i < conv.bias.size(); ++i) {
    const double keep = conv.bias[i];
    conv.bias[i] = keep + step;
    const double up = select_scalar(forward(g, x), t).value;
    conv.bias[i] = keep - step;
    const double dn = select_scalar(forward(g, x), t).value;
    conv.bias[i] = keep;
    const double fd = (up - dn) / (2 * step);
    worst = std::max(worst, std::abs(fd - bg[i]) /
                                std::max(std::abs(fd) + std::abs(bg[i]),
                                         1e-6));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("gradient is linear in the target scale") {
  Graph g = all_kinds_graph(6);
  Rng rng(14);
  Tensor x = random_tensor(Shape4{1, 2, 8, 8}, rng);
  ForwardTape tape = forward(g, x);
  TargetSpec t = full_region_target("out", 0, 6, 6);

  Tensor seed = seed_gradient(tape, t);
  Tensor seed3 = seed;
  for (double& v : seed3.values()) v *= 3.0;
  GradientTape g1 = backward_gradient(tape, {{"out", seed}});
  GradientTape g3 = backward_gradient(tape, {{"out", seed3}});
  const Tensor& a = g1.grad_of("in");
  const Tensor& b = g3.grad_of("in");
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(3.0 * a.values()[i] - b.values()[i]));
  }
  CHECK(worst < 1e-12);
}
