#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "relprop/crp.hpp"
#include "relprop/errors.hpp"
#include "relprop/image.hpp"

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

// in -> conv -> relu -> conv -> out; the relu layer is the concept layer.
struct ConceptNet {
  Graph g;
  ForwardTape tape;
  Tensor seed;

  explicit ConceptNet(std::uint64_t s) {
    Rng rng(s);
    g.add(input_node("in", Shape4{1, 3, 8, 8}));
    g.add(conv_node("c1", "in",
                    random_tensor(Shape4{5, 3, 3, 3}, rng, -0.6, 0.6),
                    {0.1, -0.1, 0.0, 0.2, 0.05}, 1, 1));
    g.add(unary_node("r1", NodeKind::ReLU, "c1"));
    g.add(conv_node("c2", "r1",
                    random_tensor(Shape4{2, 5, 1, 1}, rng, -1, 1), {}));
    g.add(unary_node("out", NodeKind::Output, "c2"));
    g.declare_output("out");
    tape = forward(g, random_tensor(Shape4{1, 3, 8, 8}, rng));
    seed = random_tensor(tape.output_of("out").shape(), rng);
  }
};

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("concept vector of an all-zero tape is zero") {
  ConceptNet net(1);
  Tensor zero(net.tape.output_of("out").shape());
  LrpResult res =
      lrp_backward(net.tape, "out", zero, RuleAssignment::standard());
  ConceptVector v = concept_vector(res.tape, "r1");
  CHECK(v.values.size() == 5);
  for (double x : v.values) CHECK(x == 0.0);
}

TEST_CASE("uniform quarter relevance on a 2x2 map sums to one") {
  Graph g;
  g.add(input_node("in", Shape4{1, 2, 2, 2}));
  g.add(unary_node("out", NodeKind::Output, "in"));
  g.declare_output("out");
  ForwardTape tape = forward(g, Tensor(Shape4{1, 2, 2, 2}));
  Tensor seed(Shape4{1, 2, 2, 2});
  for (std::int64_t y = 0; y < 2; ++y)
    for (std::int64_t x = 0; x < 2; ++x) seed.at(0, 1, y, x) = 0.25;
  LrpResult res = lrp_backward(tape, "out", seed, RuleAssignment::standard());
  ConceptVector v = concept_vector(res.tape, "out");
  CHECK(v.values[0] == 0.0);
  CHECK(v.values[1] == doctest::Approx(1.0));
}

TEST_CASE("concept vector matches a loop oracle") {
  ConceptNet net(2);
  LrpResult res =
      lrp_backward(net.tape, "out", net.seed, RuleAssignment::standard());
  ConceptVector v = concept_vector(res.tape, "r1");
  const Tensor& r = res.tape.relevance_of("r1");
  for (std::int64_t c = 0; c < 5; ++c) {
    double want = 0.0;
    for (std::int64_t y = 0; y < r.shape().h; ++y)
      for (std::int64_t x = 0; x < r.shape().w; ++x) want += r.at(0, c, y, x);
    CHECK(std::abs(v.values[c] - want) < 1e-12);
  }
  CHECK_THROWS_AS(concept_vector(res.tape, "ghost"), DataError);
}

TEST_CASE("conditioning on all channels equals the plain heatmap") {
  ConceptNet net(3);
  RuleAssignment a = RuleAssignment::standard();
  std::map<std::string, Tensor> seeds{{"out", net.seed}};
  LrpResult plain = lrp_backward(net.tape, seeds, a);
  Tensor cond =
      conditional_heatmap(net.tape, "r1", {0, 1, 2, 3, 4}, seeds, a);
  CHECK(max_abs_diff(cond, plain.tape.relevance_of("in")) < 1e-12);
}

TEST_CASE("a channel set and its complement add to the plain heatmap") {
  ConceptNet net(4);
  RuleAssignment a = RuleAssignment::standard();
  std::map<std::string, Tensor> seeds{{"out", net.seed}};
  LrpResult plain = lrp_backward(net.tape, seeds, a);
  Tensor left = conditional_heatmap(net.tape, "r1", {0, 2}, seeds, a);
  Tensor right = conditional_heatmap(net.tape, "r1", {1, 3, 4}, seeds, a);
  Tensor sum = binary(left, right, BinOp::Add);
  CHECK(max_abs_diff(sum, plain.tape.relevance_of("in")) < 1e-9);
}

TEST_CASE("singleton heatmaps add to the plain heatmap") {
  ConceptNet net(5);
  RuleAssignment a = RuleAssignment::standard();
  std::map<std::string, Tensor> seeds{{"out", net.seed}};
  LrpResult plain = lrp_backward(net.tape, seeds, a);
  Tensor sum(Shape4{1, 3, 8, 8});
  for (std::int64_t c = 0; c < 5; ++c) {
    Tensor h = conditional_heatmap(net.tape, "r1", {c}, seeds, a);
    sum = binary(sum, h, BinOp::Add);
  }
  CHECK(max_abs_diff(sum, plain.tape.relevance_of("in")) < 1e-9);
}

TEST_CASE("concept vectors add over a channel partition") {
  ConceptNet net(6);
  RuleAssignment a = RuleAssignment::standard();
  std::map<std::string, Tensor> seeds{{"out", net.seed}};

  LrpResult plain = lrp_backward(net.tape, seeds, a);
  ConceptVector whole = concept_vector(plain.tape, "r1");

  std::vector<double> acc(5, 0.0);
  for (const std::vector<std::int64_t>& part :
       {std::vector<std::int64_t>{0, 4}, {1}, {2, 3}}) {
    ChannelCondition cond{"r1", part};
    LrpResult res = lrp_backward(net.tape, seeds, a, cond);
    ConceptVector v = concept_vector(res.tape, "r1");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v.values[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    CHECK(std::abs(acc[i] - whole.values[i]) < 1e-9);
  }
}

TEST_CASE("relmax picks the highest concept relevance") {
  std::vector<ConceptSample> run(3);
  const double vals[] = {0.2, 0.9, 0.5};
  for (int i = 0; i < 3; ++i) {
    run[i].sample_id = "000" + std::to_string(i);
    run[i].vector.layer_id = "r1";
    run[i].vector.values = {vals[i]};
    run[i].argmax = {{i, i + 1}};
  }
  ReferenceSet top = relmax_references(run, "r1", 0, 1);
  REQUIRE(top.entries.size() == 1);
  CHECK(top.entries[0].sample_id == "0001");
  CHECK(top.entries[0].value == 0.9);
  CHECK(top.entries[0].y == 1);
  CHECK(top.entries[0].x == 2);
}

TEST_CASE("relmax breaks ties by sample id and clamps k") {
  std::vector<ConceptSample> run(3);
  for (int i = 0; i < 3; ++i) {
    run[i].sample_id = "000" + std::to_string(i);
    run[i].vector.layer_id = "r1";
    run[i].vector.values = {0.4};
    run[i].argmax = {{0, 0}};
  }
  ReferenceSet two = relmax_references(run, "r1", 0, 2);
  REQUIRE(two.entries.size() == 2);
  CHECK(two.entries[0].sample_id == "0000");
  CHECK(two.entries[1].sample_id == "0001");

  ReferenceSet all = relmax_references(run, "r1", 0, 10);
  CHECK(all.entries.size() == 3);

  CHECK_THROWS_AS(relmax_references(run, "r1", 0, 0), ConfigError);
}

TEST_CASE("relmax ranking ignores dataset order") {
  std::vector<ConceptSample> run(4);
  const double vals[] = {0.1, 0.8, 0.8, 0.3};
  for (int i = 0; i < 4; ++i) {
    run[i].sample_id = "000" + std::to_string(i);
    run[i].vector.layer_id = "r1";
    run[i].vector.values = {vals[i]};
    run[i].argmax = {{0, 0}};
  }
  ReferenceSet a = relmax_references(run, "r1", 0, 3);
  std::swap(run[0], run[3]);
  std::swap(run[1], run[2]);
  ReferenceSet b = relmax_references(run, "r1", 0, 3);
  REQUIRE(a.entries.size() == b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].sample_id == b.entries[i].sample_id);
  }
  CHECK(a.entries[0].sample_id == "0001");  // tie: lower id first
}

TEST_CASE("crop windows center and clamp") {
  CropRect mid = crop_around(20, 20, 64, 64);
  CHECK(mid.h == 16);
  CHECK(mid.w == 16);
  CHECK(mid.y0 == 12);
  CHECK(mid.x0 == 12);

  CropRect corner = crop_around(1, 62, 64, 64);
  CHECK(corner.y0 == 0);
  CHECK(corner.x0 == 48);

  CropRect tiny = crop_around(3, 3, 8, 8);
  CHECK(tiny.h == 8);
  CHECK(tiny.w == 8);
  CHECK(tiny.y0 == 0);
  CHECK(tiny.x0 == 0);
}

TEST_CASE("png round trip preserves bytes") {
  Rng rng(7);
  ImageU8 img;
  img.h = 9;
  img.w = 11;
  img.channels = 3;
  img.pixels.resize(9 * 11 * 3);
  for (auto& p : img.pixels) {
    p = static_cast<std::uint8_t>(rng.uniform_index(256));
  }
  auto path = std::filesystem::temp_directory_path() / "relprop_rt.png";
  write_png(path, img);
  ImageU8 back = read_png(path);
  CHECK(back.h == img.h);
  CHECK(back.w == img.w);
  CHECK(back.channels == 3);
  CHECK(back.pixels == img.pixels);

  ImageU8 gray;
  gray.h = 4;
  gray.w = 5;
  gray.channels = 1;
  gray.pixels = {0,  10, 20,  30,  40,  50,  60,  70,  80,  90,
                 99, 110, 120, 130, 140, 150, 160, 170, 180, 250};
  auto gpath = std::filesystem::temp_directory_path() / "relprop_gray.png";
  write_png(gpath, gray);
  CHECK(read_png(gpath).pixels == gray.pixels);
}

TEST_CASE("all-zero heatmap renders to the neutral color") {
  Tensor zero(Shape4{1, 1, 4, 4});
  auto path = std::filesystem::temp_directory_path() / "relprop_neutral.png";
  render_heatmap(zero, path);
  ImageU8 img = read_png(path);
  for (std::int64_t y = 0; y < 4; ++y) {
    for (std::int64_t x = 0; x < 4; ++x) {
      CHECK(img.at(y, x, 0) == 255);
      CHECK(img.at(y, x, 1) == 255);
      CHECK(img.at(y, x, 2) == 255);
    }
  }
}

TEST_CASE("a single positive pixel renders at the warm extreme") {
  Tensor map(Shape4{1, 1, 3, 3});
  map.at(0, 0, 1, 2) = 0.4;
  auto path = std::filesystem::temp_directory_path() / "relprop_warm.png";
  render_heatmap(map, path);
  ImageU8 img = read_png(path);
  CHECK(img.at(1, 2, 0) == 180);
  CHECK(img.at(1, 2, 1) == 4);
  CHECK(img.at(1, 2, 2) == 38);
  CHECK(img.at(0, 0, 0) == 255);  // zeros stay neutral
}

TEST_CASE("negative relevance renders on the cool side") {
  Tensor map(Shape4{1, 1, 1, 2});
  map.at(0, 0, 0, 0) = -1.0;
  map.at(0, 0, 0, 1) = 1.0;
  auto path = std::filesystem::temp_directory_path() / "relprop_cool.png";
  render_heatmap(map, path);
  ImageU8 img = read_png(path);
  CHECK(img.at(0, 0, 2) == 192);  // blue end
  CHECK(img.at(0, 1, 0) == 180);  // red end
}

TEST_CASE("rendering twice is byte-identical") {
  ConceptNet net(8);
  LrpResult res =
      lrp_backward(net.tape, "out", net.seed, RuleAssignment::standard());
  Tensor flat = flatten_heatmap(res.tape.relevance_of("in"));
  auto p1 = std::filesystem::temp_directory_path() / "relprop_det1.png";
  auto p2 = std::filesystem::temp_directory_path() / "relprop_det2.png";
  render_heatmap(flat, p1);
  render_heatmap(flat, p2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(!slurp(p1).empty());
}

TEST_CASE("flatten sums across channels") {
  Rng rng(9);
  Tensor r = random_tensor(Shape4{1, 3, 4, 4}, rng);
  Tensor flat = flatten_heatmap(r);
  for (std::int64_t y = 0; y < 4; ++y) {
    for (std::int64_t x = 0; x < 4; ++x) {
      double want = r.at(0, 0, y, x) + r.at(0, 1, y, x) + r.at(0, 2, y, x);
      CHECK(flat.at(0, 0, y, x) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}
