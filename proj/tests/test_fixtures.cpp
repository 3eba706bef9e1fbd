#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "relprop/errors.hpp"
#include "relprop/fixtures.hpp"
#include "relprop/lrp.hpp"
#include "relprop/target.hpp"

using namespace relprop;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Tensor uniform_color(double r, double g, double b, std::int64_t s = 64) {
  Tensor t(Shape4{1, 3, s, s});
  for (std::int64_t y = 0; y < s; ++y) {
    for (std::int64_t x = 0; x < s; ++x) {
      t.at(0, 0, y, x) = r;
      t.at(0, 1, y, x) = g;
      t.at(0, 2, y, x) = b;
    }
  }
  return t;
}

std::int64_t seg_argmax(const Tensor& logits, std::int64_t y, std::int64_t x) {
  std::int64_t best = 0;
  for (std::int64_t c = 1; c < logits.shape().c; ++c) {
    if (logits.at(0, c, y, x) > logits.at(0, best, y, x)) best = c;
  }
  return best;
}

}  // namespace

TEST_CASE("config validation rejects nonsense") {
  SceneConfig c;
  c.noise = 2.0;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = SceneConfig{};
  c.palette.clear();
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = SceneConfig{};
  c.palette = {"chartreuse"};
  CHECK_THROWS_AS(validate(c), DataError);
  c = SceneConfig{};
  c.car_count = {0, 3};
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = SceneConfig{};
  c.image_size = 60;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = SceneConfig{};
  c.flood_radius = {2.0, 20.0};
  CHECK_THROWS_AS(validate(c), ConfigError);
  CHECK_NOTHROW(validate(SceneConfig{}));
}

TEST_CASE("expected class fractions are consistent") {
  SceneConfig c;
  std::vector<double> f = expected_class_fractions(c);
  REQUIRE(f.size() == 3);
  CHECK(f[0] + f[1] + f[2] == doctest::Approx(1.0));
  CHECK(f[kClassRoad] == doctest::Approx(10.0 / 64.0));
  CHECK(f[kClassFlood] == doctest::Approx(1.5 * M_PI * 36.0 / 4096.0));
}

TEST_CASE("scene rendering is deterministic") {
  SceneConfig c;
  Scene a = render_scene(c, 5);
  Scene b = render_scene(c, 5);
  REQUIRE(a.image.values().size() == b.image.values().size());
  for (std::size_t i = 0; i < a.image.values().size(); ++i) {
    CHECK(a.image.values()[i] == b.image.values()[i]);
  }
  CHECK(a.mask == b.mask);
  REQUIRE(a.cars.size() == b.cars.size());
  for (std::size_t i = 0; i < a.cars.size(); ++i) {
    CHECK(a.cars[i].x == b.cars[i].x);
    CHECK(a.cars[i].color == b.cars[i].color);
  }

  Scene other = render_scene(c, 6);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.image.values().size(); ++i) {
    diff = std::max(diff,
                    std::abs(a.image.values()[i] - other.image.values()[i]));
  }
  CHECK(diff > 0.05);
}

TEST_CASE("scenes contain the advertised structure") {
  SceneConfig c;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Scene s = render_scene(c, seed);
    std::set<int> classes(s.mask.begin(), s.mask.end());
    CHECK(classes.count(kClassBackground) == 1);
    CHECK(classes.count(kClassFlood) == 1);
    CHECK(classes.count(kClassRoad) == 1);
    CHECK(classes.size() <= 3);
    CHECK(s.cars.size() <= 2);
    for (const CarBox& car : s.cars) {
      CHECK(car.x >= 0);
      CHECK(car.y >= 0);
      CHECK(car.x + car.w <= c.image_size);
      CHECK(car.y + car.h <= c.image_size);
      CHECK_NOTHROW(car_color(car.color));
    }
    if (s.cars.size() == 2) {
      const CarBox& l = s.cars[0];
      const CarBox& r = s.cars[1];
      const bool disjoint_x = l.x + l.w <= r.x || r.x + r.w <= l.x;
      CHECK(disjoint_x);
    }
  }
}

TEST_CASE("zero-car configs produce empty box lists") {
  SceneConfig c;
  c.car_count = {0, 0};
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    CHECK(render_scene(c, seed).cars.empty());
  }
}

TEST_CASE("class pixel frequencies match the configured areas") {
  SceneConfig c;
  Dataset data = synth_dataset(c, 500, 42);
  std::vector<double> counts(3, 0.0);
  double total = 0.0;
  for (const DatasetSample& s : data.samples) {
    for (std::uint8_t v : s.mask) counts[v] += 1.0;
    total += static_cast<double>(s.mask.size());
  }
  const std::vector<double> expected = expected_class_fractions(c);
  for (int cls = 0; cls < 3; ++cls) {
    const double measured = counts[cls] / total;
    CHECK(std::abs(measured - expected[cls]) <= 0.10 * expected[cls]);
  }
}

TEST_CASE("dataset write and load round trip") {
  SceneConfig c;
  c.car_count = {1, 2};
  fs::path dir = fresh_dir("relprop_ds_a");
  write_dataset(c, 4, 3, dir);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "boxes.json"));
  CHECK(fs::exists(dir / "images" / "0003.png"));
  CHECK(fs::exists(dir / "masks" / "0003.png"));

  Dataset data = load_dataset(dir);
  CHECK(data.image_size == 64);
  CHECK(data.seed == 3);
  REQUIRE(data.samples.size() == 4);

  for (std::int64_t i = 0; i < 4; ++i) {
    Scene direct = render_scene(c, derive_seed(3, i));
    const DatasetSample& loaded = data.samples[static_cast<std::size_t>(i)];
    CHECK(loaded.mask == direct.mask);
    REQUIRE(loaded.cars.size() == direct.cars.size());
    for (std::size_t k = 0; k < loaded.cars.size(); ++k) {
      CHECK(loaded.cars[k].x == direct.cars[k].x);
      CHECK(loaded.cars[k].y == direct.cars[k].y);
      CHECK(loaded.cars[k].w == direct.cars[k].w);
      CHECK(loaded.cars[k].h == direct.cars[k].h);
      CHECK(loaded.cars[k].color == direct.cars[k].color);
    }
    // PNG is 8-bit, so colors survive up to half a quantization step.
    double max_err = 0.0;
    for (std::size_t j = 0; j < loaded.image.values().size(); ++j) {
      max_err = std::max(max_err, std::abs(loaded.image.values()[j] -
                                           direct.image.values()[j]));
    }
    CHECK(max_err <= 0.5 / 255.0 + 1e-9);
  }
}

TEST_CASE("dataset trees are byte-identical across reruns and job counts") {
  SceneConfig c;
  fs::path a = fresh_dir("relprop_ds_b");
  fs::path b = fresh_dir("relprop_ds_c");
  fs::path p = fresh_dir("relprop_ds_d");
  write_dataset(c, 5, 11, a, 1);
  write_dataset(c, 5, 11, b, 1);
  write_dataset(c, 5, 11, p, 3);
  std::vector<std::string> rel{"manifest.json", "boxes.json"};
  for (int i = 0; i < 5; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "images/%04d.png", i);
    rel.emplace_back(buf);
    std::snprintf(buf, sizeof(buf), "masks/%04d.png", i);
    rel.emplace_back(buf);
  }
  for (const std::string& r : rel) {
    CAPTURE(r);
    const std::string ref = slurp(a / r);
    CHECK(ref == slurp(b / r));
    CHECK(ref == slurp(p / r));
  }
}

TEST_CASE("bad dataset directories are reported") {
  fs::path dir = fresh_dir("relprop_ds_bad");
  CHECK_THROWS_AS(load_dataset(dir), DataError);
  std::ofstream(dir / "manifest.json") << "{ not json";
  CHECK_THROWS_AS(load_dataset(dir), DataError);
  CHECK_THROWS_AS(write_dataset(SceneConfig{}, 0, 0, dir), ConfigError);
}

TEST_CASE("toy-pid graph has the advertised structure") {
  Graph g = build_toy_pid(ToyModelSpec{});
  CHECK(g.validate().empty());

  int adds = 0, gates = 0, cats = 0, resizes = 0;
  bool sigmoid_gate = false, one_minus_gate = false;
  for (const Node& n : g.nodes()) {
    if (n.kind == NodeKind::Add) ++adds;
    if (n.kind == NodeKind::ConcatC) ++cats;
    if (n.kind == NodeKind::BilinearResize) ++resizes;
    if (n.kind == NodeKind::GatedMul) {
      ++gates;
      if (n.gate_mode == GateMode::Sigmoid) sigmoid_gate = true;
      if (n.gate_mode == GateMode::OneMinusSigmoid) one_minus_gate = true;
    }
  }
  CHECK(adds >= 1);
  CHECK(gates == 2);
  CHECK(sigmoid_gate);
  CHECK(one_minus_gate);
  CHECK(cats >= 1);
  CHECK(resizes == 2);
  CHECK(g.node("stem1").conv.stride == 2);
  CHECK(g.node("stem2").conv.stride == 2);

  ForwardTape tape = forward(g, uniform_color(0.5, 0.5, 0.5));
  CHECK(tape.output_of("seg").shape().str() == "(1,3,64,64)");
}

TEST_CASE("handcrafted toy-pid classifies canonical colors") {
  Graph g = build_toy_pid(ToyModelSpec{});
  struct Probe {
    double r, g, b;
    std::int64_t cls;
  };
  const Probe probes[] = {
      {0.20, 0.55, 0.15, kClassBackground},  // vegetation green
      {0.10, 0.25, 0.70, kClassFlood},       // water blue
      {0.45, 0.45, 0.48, kClassRoad},        // asphalt gray
  };
  for (const Probe& p : probes) {
    CAPTURE(p.cls);
    ForwardTape tape = forward(g, uniform_color(p.r, p.g, p.b));
    const Tensor& seg = tape.output_of("seg");
    CHECK(seg_argmax(seg, 32, 32) == p.cls);
    CHECK(seg_argmax(seg, 5, 60) == p.cls);
  }
}

TEST_CASE("handcrafted toy-pid segments a synthetic set well") {
  Graph g = build_toy_pid(ToyModelSpec{});
  Dataset data = synth_dataset(SceneConfig{}, 30, 0);
  CHECK(pixel_accuracy(g, data) >= 0.9);
}

TEST_CASE("weight modes are deterministic and checked") {
  ToyModelSpec spec;
  spec.mode = WeightMode::Random;
  spec.seed = 7;
  Graph a = build_toy_pid(spec);
  Graph b = build_toy_pid(spec);
  for (std::size_t i = 0; i < a.nodes().size(); ++i) {
    const auto& wa = a.nodes()[i].weight.values();
    const auto& wb = b.nodes()[i].weight.values();
    REQUIRE(wa.size() == wb.size());
    for (std::size_t j = 0; j < wa.size(); ++j) CHECK(wa[j] == wb[j]);
  }
  spec.seed = 8;
  Graph other = build_toy_pid(spec);
  CHECK(other.node("p_conv").weight.values()[0] !=
        a.node("p_conv").weight.values()[0]);

  ToyModelSpec narrow;
  narrow.width = 4;
  CHECK_THROWS_AS(build_toy_pid(narrow), ConfigError);
  ToyModelSpec unknown;
  unknown.arch = "resnet";
  CHECK_THROWS_AS(build_toy_model(unknown), ConfigError);
}

TEST_CASE("toy-detector structure and grid heads") {
  Graph g = build_toy_detector(ToyModelSpec{"toy-det"});
  CHECK(g.validate().empty());
  ForwardTape tape = forward(g, uniform_color(0.2, 0.55, 0.15));
  CHECK(tape.output_of("obj").shape().str() == "(1,1,8,8)");
  CHECK(tape.output_of("cls").shape().str() == "(1,3,8,8)");
  CHECK(tape.output_of("box").shape().str() == "(1,4,8,8)");
  CHECK(tape.output_of("obj").max_abs() > 0.0);
  // No cars anywhere: objectness stays below zero on every cell.
  const Tensor& obj = tape.output_of("obj");
  for (std::int64_t y = 0; y < 8; ++y)
    for (std::int64_t x = 0; x < 8; ++x) CHECK(obj.at(0, 0, y, x) < 0.0);
}

TEST_CASE("handcrafted detector localizes single cars") {
  SceneConfig c;
  c.car_count = {1, 1};
  Dataset data = synth_dataset(c, 40, 0);
  Graph g = build_toy_detector(ToyModelSpec{"toy-det"});
  CHECK(detection_hit_rate(g, data) >= 0.9);
}

TEST_CASE("detector classifies car colors at the detected cell") {
  Graph g = build_toy_detector(ToyModelSpec{"toy-det"});
  for (const std::string color : {"white", "dark", "red"}) {
    CAPTURE(color);
    SceneConfig c;
    c.car_count = {1, 1};
    c.palette = {color};
    Dataset data = synth_dataset(c, 20, 11);
    int correct = 0;
    for (const DatasetSample& s : data.samples) {
      ForwardTape tape = forward(g, s.image);
      const auto [cy, cx] = argmax_cell(tape.output_of("obj"));
      const Tensor& cls = tape.output_of("cls");
      std::int64_t best = 0;
      for (std::int64_t k = 1; k < 3; ++k) {
        if (cls.at(0, k, cy, cx) > cls.at(0, best, cy, cx)) best = k;
      }
      correct += best == car_color_index(color) ? 1 : 0;
    }
    CHECK(correct >= 18);
  }
}

TEST_CASE("training strictly reduces the loss early on") {
  ToyModelSpec spec;
  spec.mode = WeightMode::Random;
  Graph g = build_toy_pid(spec);
  Dataset data = synth_dataset(SceneConfig{}, 20, 0);
  TrainResult r = train_sgd(g, data, TrainConfig{6, 0.01, 0});
  REQUIRE(r.loss_history.size() == 6);
  CHECK_FALSE(r.diverged);
  for (int i = 0; i < 5; ++i) {
    CHECK(r.loss_history[i + 1] < r.loss_history[i]);
  }
}

TEST_CASE("trained toy-pid generalizes to held-out scenes") {
  ToyModelSpec spec;
  spec.mode = WeightMode::Random;
  Graph g = build_toy_pid(spec);
  Dataset train = synth_dataset(SceneConfig{}, 40, 0);
  Dataset held = synth_dataset(SceneConfig{}, 30, 1);
  TrainResult r = train_sgd(g, train, TrainConfig{20, 0.05, 0});
  CHECK_FALSE(r.diverged);
  CHECK(pixel_accuracy(g, held) >= 0.85);
}

TEST_CASE("zero epochs leave the weights untouched") {
  ToyModelSpec spec;
  spec.mode = WeightMode::Random;
  Graph g = build_toy_pid(spec);
  std::vector<std::vector<double>> before;
  for (const Node& n : g.nodes()) {
    before.emplace_back(n.weight.values().begin(), n.weight.values().end());
  }
  Dataset data = synth_dataset(SceneConfig{}, 2, 0);
  TrainResult r = train_sgd(g, data, TrainConfig{0, 0.05, 0});
  CHECK(r.loss_history.empty());
  for (std::size_t i = 0; i < g.nodes().size(); ++i) {
    const auto& w = g.nodes()[i].weight.values();
    REQUIRE(w.size() == before[i].size());
    for (std::size_t j = 0; j < w.size(); ++j) CHECK(w[j] == before[i][j]);
  }
}

TEST_CASE("non-finite losses abort with a report") {
  ToyModelSpec spec;
  spec.mode = WeightMode::Random;
  Graph g = build_toy_pid(spec);
  // Poison a head weight: it reaches the logits through the bilinear resize
  // only, so no ReLU can swallow the NaN.
  g.nodes()[g.index_of("head2")].weight.values()[0] = std::nan("");
  Dataset data = synth_dataset(SceneConfig{}, 2, 0);
  TrainResult r = train_sgd(g, data, TrainConfig{5, 0.01, 0});
  CHECK(r.diverged);
  CHECK(r.loss_history.size() == 1);
  CHECK(r.note.find("epoch 0") != std::string::npos);
}

TEST_CASE("detector training reduces the loss") {
  SceneConfig c;
  c.car_count = {1, 1};
  Dataset data = synth_dataset(c, 20, 0);
  ToyModelSpec spec;
  spec.arch = "toy-det";
  spec.mode = WeightMode::Random;
  spec.seed = 2;
  Graph g = build_toy_detector(spec);
  TrainResult r = train_sgd(g, data, TrainConfig{8, 0.05, 0});
  REQUIRE(r.loss_history.size() == 8);
  CHECK(r.loss_history.back() < 0.5 * r.loss_history.front());
}

TEST_CASE("trainer rejects wrong graphs and configs") {
  Graph g = build_toy_pid(ToyModelSpec{});
  Dataset data = synth_dataset(SceneConfig{}, 2, 0);
  CHECK_THROWS_AS(train_sgd(g, data, TrainConfig{1, 0.0, 0}), ConfigError);
  CHECK_THROWS_AS(train_sgd(g, Dataset{}, TrainConfig{1, 0.1, 0}), DataError);

  Graph headless;
  {
    Node in;
    in.id = "in";
    in.kind = NodeKind::Input;
    in.input_shape = Shape4{1, 3, 64, 64};
    headless.add(std::move(in));
    Node out;
    out.id = "other";
    out.kind = NodeKind::Output;
    out.inputs = {"in"};
    headless.add(std::move(out));
    headless.declare_output("other");
  }
  CHECK_THROWS_AS(train_sgd(headless, data, TrainConfig{1, 0.1, 0}),
                  ConfigError);
}

TEST_CASE("a full lrp pass over toy-pid starves both gates and conserves") {
  Graph g = build_toy_pid(ToyModelSpec{});
  Scene scene = render_scene(SceneConfig{}, 9);
  ForwardTape tape = forward(g, scene.image);

  TargetSpec target;
  target.head = "seg";
  target.class_index = kClassFlood;
  SelectedScalar sel = select_scalar(tape, resolve_target(tape, target));
  REQUIRE(sel.value != 0.0);

  LrpResult res =
      lrp_backward(tape, "seg", sel.seed, RuleAssignment::standard());
  CHECK(res.report.flagged.empty());
  CHECK(res.tape.relevance_of("pag_gate").max_abs() == 0.0);
  CHECK(res.tape.relevance_of("d_conv2").max_abs() == 0.0);
  CHECK(res.tape.relevance_of("input").max_abs() > 0.0);
  const double residual =
      std::abs(res.report.seed_total -
               (res.report.input_total + res.report.absorbed_total));
  CHECK(residual <= 1e-6 * std::abs(res.report.seed_total));
}

TEST_CASE("argmax cell picks the strongest grid cell") {
  Tensor obj(Shape4{1, 1, 3, 3});
  obj.at(0, 0, 2, 1) = 4.0;
  obj.at(0, 0, 0, 0) = 3.0;
  const auto [y, x] = argmax_cell(obj);
  CHECK(y == 2);
  CHECK(x == 1);
}
