#include "relprop/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <thread>
#include <utility>

#include <nlohmann/json.hpp>

#include "relprop/errors.hpp"
#include "relprop/gradient.hpp"
#include "relprop/image.hpp"

namespace relprop {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kBackgroundColor[3] = {0.20, 0.55, 0.15};
constexpr double kFloodColor[3] = {0.10, 0.25, 0.70};
constexpr double kRoadColor[3] = {0.45, 0.45, 0.48};

std::string frame_name(std::int64_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", static_cast<int>(i));
  return buf;
}

void check_range(const IntRange& r, const char* what) {
  if (r.lo > r.hi || r.lo < 0) {
    throw ConfigError(std::string(what) + ": bad range [" +
                      std::to_string(r.lo) + ", " + std::to_string(r.hi) +
                      "]");
  }
}

}  // namespace

const std::vector<CarColor>& car_palette() {
  static const std::vector<CarColor> palette{
      {"white", 0.92, 0.92, 0.92},
      {"dark", 0.08, 0.08, 0.10},
      {"red", 0.85, 0.10, 0.10},
      {"yellow", 0.92, 0.80, 0.12},
  };
  return palette;
}

const CarColor& car_color(const std::string& name) {
  for (const CarColor& c : car_palette()) {
    if (c.name == name) return c;
  }
  throw DataError("unknown car color '" + name + "'");
}

int car_color_index(const std::string& name) {
  const auto& palette = car_palette();
  for (std::size_t i = 0; i < palette.size(); ++i) {
    if (palette[i].name == name) return static_cast<int>(i);
  }
  throw DataError("unknown car color '" + name + "'");
}

void validate(const SceneConfig& c) {
  const auto s = c.image_size;
  if (s < 32 || s % 8 != 0) {
    throw ConfigError("image_size must be a multiple of 8 and at least 32");
  }
  if (!(c.noise >= 0.0 && c.noise <= 1.0)) {
    throw ConfigError("noise amplitude must lie in [0, 1]");
  }
  check_range(c.flood_blobs, "flood_blobs");
  check_range(c.road_thickness, "road_thickness");
  check_range(c.car_count, "car_count");
  check_range(c.car_width, "car_width");
  check_range(c.car_height, "car_height");
  if (c.flood_blobs.hi > 2) {
    throw ConfigError("at most 2 flood blobs are supported");
  }
  if (c.car_count.hi > 2) {
    throw ConfigError("at most 2 cars are supported");
  }
  if (!(c.flood_radius.lo >= 2.0 && c.flood_radius.lo <= c.flood_radius.hi)) {
    throw ConfigError("flood_radius must satisfy 2 <= lo <= hi");
  }
  if (c.flood_radius.hi > 0.14 * static_cast<double>(s)) {
    throw ConfigError("flood_radius.hi too large for the blob slots");
  }
  if (c.road_thickness.lo < 2 || c.road_thickness.hi > s - (s * 3 + 4) / 5) {
    throw ConfigError("road_thickness out of range for the band region");
  }
  if (c.car_width.lo < 4 || c.car_width.hi > s / 2 - 4) {
    throw ConfigError("car_width out of range for the car slots");
  }
  if (c.car_height.lo < 4 || c.car_height.hi > s / 2) {
    throw ConfigError("car_height out of range");
  }
  if (c.palette.empty()) throw ConfigError("palette must not be empty");
  for (const std::string& name : c.palette) car_color(name);  // throws
}

std::vector<double> expected_class_fractions(const SceneConfig& c) {
  const double area = static_cast<double>(c.image_size * c.image_size);
  const double mean_count =
      0.5 * static_cast<double>(c.flood_blobs.lo + c.flood_blobs.hi);
  const double mean_r = 0.5 * (c.flood_radius.lo + c.flood_radius.hi);
  const double flood = mean_count * M_PI * mean_r * mean_r / area;
  const double road =
      0.5 * static_cast<double>(c.road_thickness.lo + c.road_thickness.hi) /
      static_cast<double>(c.image_size);
  return {1.0 - flood - road, flood, road};
}

Scene render_scene(const SceneConfig& config, std::uint64_t seed) {
  validate(config);
  const std::int64_t s = config.image_size;
  Rng rng(seed);

  Scene scene;
  scene.image = Tensor(Shape4{1, 3, s, s});
  scene.mask.assign(static_cast<std::size_t>(s * s), kClassBackground);

  auto paint = [&](std::int64_t y, std::int64_t x, const double* rgb) {
    for (int c = 0; c < 3; ++c) scene.image.at(0, c, y, x) = rgb[c];
  };
  for (std::int64_t y = 0; y < s; ++y)
    for (std::int64_t x = 0; x < s; ++x) paint(y, x, kBackgroundColor);

  // Road: one horizontal band in the lower 2/5 of the frame.
  const int thickness = rng.uniform_int(
      static_cast<int>(config.road_thickness.lo),
      static_cast<int>(config.road_thickness.hi));
  const int band_lo = static_cast<int>((s * 3 + 4) / 5);
  const int band_y =
      rng.uniform_int(band_lo, static_cast<int>(s) - thickness);

  // Flood: ellipses in two disjoint slots above the road region.
  const double sd = static_cast<double>(s);
  const int blob_count = rng.uniform_int(
      static_cast<int>(config.flood_blobs.lo),
      static_cast<int>(config.flood_blobs.hi));
  const double slot_x[2][2] = {{0.14 * sd, 0.36 * sd}, {0.64 * sd, 0.86 * sd}};
  int first_slot = 0;
  if (blob_count == 1) first_slot = static_cast<int>(rng.uniform_index(2));
  for (int b = 0; b < blob_count; ++b) {
    const int slot = blob_count == 1 ? first_slot : b;
    const double rx = rng.uniform(config.flood_radius.lo, config.flood_radius.hi);
    const double ry = rng.uniform(config.flood_radius.lo, config.flood_radius.hi);
    const double cx = rng.uniform(slot_x[slot][0], slot_x[slot][1]);
    const double cy = rng.uniform(0.14 * sd, 0.42 * sd);
    const auto y0 = static_cast<std::int64_t>(std::floor(cy - ry));
    const auto y1 = static_cast<std::int64_t>(std::ceil(cy + ry));
    const auto x0 = static_cast<std::int64_t>(std::floor(cx - rx));
    const auto x1 = static_cast<std::int64_t>(std::ceil(cx + rx));
    for (std::int64_t y = std::max<std::int64_t>(0, y0);
         y <= std::min(s - 1, y1); ++y) {
      for (std::int64_t x = std::max<std::int64_t>(0, x0);
           x <= std::min(s - 1, x1); ++x) {
        const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
        const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
        if (dy * dy + dx * dx <= 1.0) {
          paint(y, x, kFloodColor);
          scene.mask[static_cast<std::size_t>(y * s + x)] = kClassFlood;
        }
      }
    }
  }

  for (std::int64_t y = band_y; y < band_y + thickness; ++y) {
    for (std::int64_t x = 0; x < s; ++x) {
      paint(y, x, kRoadColor);
      scene.mask[static_cast<std::size_t>(y * s + x)] = kClassRoad;
    }
  }

  // Cars: axis-aligned rectangles centered on the band, one per slot so two
  // cars never overlap. They do not change the segmentation mask.
  const int car_count = rng.uniform_int(static_cast<int>(config.car_count.lo),
                                        static_cast<int>(config.car_count.hi));
  int car_slot = 0;
  if (car_count == 1) car_slot = static_cast<int>(rng.uniform_index(2));
  for (int k = 0; k < car_count; ++k) {
    const int slot = car_count == 1 ? car_slot : k;
    const int w = rng.uniform_int(static_cast<int>(config.car_width.lo),
                                  static_cast<int>(config.car_width.hi));
    const int h = rng.uniform_int(static_cast<int>(config.car_height.lo),
                                  static_cast<int>(config.car_height.hi));
    const std::size_t color_i = rng.uniform_index(config.palette.size());
    const CarColor& color = car_color(config.palette[color_i]);
    const int jitter = rng.uniform_int(-2, 2);
    const int half = static_cast<int>(s) / 2;
    const int x_lo = slot == 0 ? 2 : half + 2;
    const int x_hi = slot == 0 ? half - w - 2 : static_cast<int>(s) - w - 2;
    const int x = rng.uniform_int(x_lo, std::max(x_lo, x_hi));
    const int cy = band_y + thickness / 2 + jitter;
    const int y = std::clamp(cy - h / 2, 0, static_cast<int>(s) - h);
    const double rgb[3] = {color.r, color.g, color.b};
    for (std::int64_t yy = y; yy < y + h; ++yy)
      for (std::int64_t xx = x; xx < x + w; ++xx) paint(yy, xx, rgb);
    scene.cars.push_back(CarBox{x, y, w, h, color.name});
  }

  if (config.noise > 0.0) {
    for (std::int64_t y = 0; y < s; ++y) {
      for (std::int64_t x = 0; x < s; ++x) {
        for (int c = 0; c < 3; ++c) {
          double& v = scene.image.at(0, c, y, x);
          v += config.noise * (2.0 * rng.uniform() - 1.0);
          v = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return scene;
}

namespace {

ordered_json config_json(const SceneConfig& c) {
  ordered_json j;
  j["image_size"] = c.image_size;
  j["flood_blobs"] = {c.flood_blobs.lo, c.flood_blobs.hi};
  j["flood_radius"] = {c.flood_radius.lo, c.flood_radius.hi};
  j["road_thickness"] = {c.road_thickness.lo, c.road_thickness.hi};
  j["car_count"] = {c.car_count.lo, c.car_count.hi};
  j["car_width"] = {c.car_width.lo, c.car_width.hi};
  j["car_height"] = {c.car_height.lo, c.car_height.hi};
  j["palette"] = c.palette;
  j["noise"] = c.noise;
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed for " + path.string());
}

ImageU8 mask_image(const std::vector<std::uint8_t>& mask, std::int64_t s) {
  ImageU8 img;
  img.h = s;
  img.w = s;
  img.channels = 1;
  img.pixels = mask;
  return img;
}

}  // namespace

void write_dataset(const SceneConfig& config, std::int64_t n,
                   std::uint64_t seed, const std::filesystem::path& dir,
                   int jobs) {
  validate(config);
  if (n < 1 || n > 9999) throw ConfigError("dataset size must be in [1, 9999]");
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  std::filesystem::create_directories(dir / "masks", ec);
  if (ec) throw DataError("cannot create dataset directory: " + ec.message());

  std::vector<std::vector<CarBox>> boxes(static_cast<std::size_t>(n));
  const int workers = std::clamp<int>(jobs, 1, static_cast<int>(std::min<std::int64_t>(n, 64)));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  auto run = [&](int t) {
    try {
      for (std::int64_t i = t; i < n; i += workers) {
        Scene scene = render_scene(config, derive_seed(seed, i));
        const std::string name = frame_name(i);
        write_png(dir / "images" / (name + ".png"),
                  tensor_to_image(scene.image));
        write_png(dir / "masks" / (name + ".png"),
                  mask_image(scene.mask, config.image_size));
        boxes[static_cast<std::size_t>(i)] = std::move(scene.cars);
      }
    } catch (...) {
      errors[static_cast<std::size_t>(t)] = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) pool.emplace_back(run, t);
    for (std::thread& th : pool) th.join();
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  ordered_json box_list = ordered_json::array();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::string name = frame_name(i);
    ordered_json entry;
    entry["image"] = "images/" + name + ".png";
    entry["mask"] = "masks/" + name + ".png";
    entry["boxes"] = ordered_json::array();
    for (const CarBox& b : boxes[static_cast<std::size_t>(i)]) {
      entry["boxes"].push_back({{"x", b.x},
                                {"y", b.y},
                                {"w", b.w},
                                {"h", b.h},
                                {"color", b.color}});
    }
    box_list.push_back(std::move(entry));
  }
  write_text(dir / "boxes.json", box_list.dump(2) + "\n");

  ordered_json manifest;
  manifest["format_version"] = 1;
  manifest["kind"] = "relprop-dataset";
  manifest["seed"] = seed;
  manifest["count"] = n;
  manifest["image_size"] = config.image_size;
  manifest["class_map"] = {{"0", "background"}, {"1", "flood"}, {"2", "road"}};
  manifest["config"] = config_json(config);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw DataError("missing manifest.json in " + dir.string());
  ordered_json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    throw DataError("bad manifest.json: " + std::string(e.what()));
  }
  std::ifstream bf(dir / "boxes.json");
  if (!bf) throw DataError("missing boxes.json in " + dir.string());
  ordered_json box_list;
  try {
    bf >> box_list;
  } catch (const std::exception& e) {
    throw DataError("bad boxes.json: " + std::string(e.what()));
  }

  Dataset data;
  try {
    data.image_size = manifest.at("image_size").get<std::int64_t>();
    data.seed = manifest.at("seed").get<std::uint64_t>();
  } catch (const std::exception& e) {
    throw DataError("bad manifest.json: " + std::string(e.what()));
  }
  const auto n = manifest.at("count").get<std::int64_t>();
  if (!box_list.is_array() ||
      box_list.size() != static_cast<std::size_t>(n)) {
    throw DataError("boxes.json does not list every image");
  }

  for (std::int64_t i = 0; i < n; ++i) {
    DatasetSample sample;
    sample.name = frame_name(i);
    ImageU8 img = read_png(dir / "images" / (sample.name + ".png"));
    if (img.channels != 3 || img.h != data.image_size ||
        img.w != data.image_size) {
      throw DataError("image " + sample.name + " has unexpected shape");
    }
    sample.image = image_to_tensor(img);
    ImageU8 mask = read_png(dir / "masks" / (sample.name + ".png"));
    if (mask.channels != 1 || mask.h != data.image_size ||
        mask.w != data.image_size) {
      throw DataError("mask " + sample.name + " has unexpected shape");
    }
    for (std::uint8_t v : mask.pixels) {
      if (v >= kSegClasses) {
        throw DataError("mask " + sample.name + " has class index " +
                        std::to_string(v));
      }
    }
    sample.mask = std::move(mask.pixels);
    for (const auto& b : box_list[static_cast<std::size_t>(i)].at("boxes")) {
      sample.cars.push_back(CarBox{b.at("x").get<std::int64_t>(),
                                   b.at("y").get<std::int64_t>(),
                                   b.at("w").get<std::int64_t>(),
                                   b.at("h").get<std::int64_t>(),
                                   b.at("color").get<std::string>()});
    }
    data.samples.push_back(std::move(sample));
  }
  return data;
}

Dataset synth_dataset(const SceneConfig& config, std::int64_t n,
                      std::uint64_t seed) {
  validate(config);
  if (n < 1 || n > 9999) throw ConfigError("dataset size must be in [1, 9999]");
  Dataset data;
  data.image_size = config.image_size;
  data.seed = seed;
  for (std::int64_t i = 0; i < n; ++i) {
    Scene scene = render_scene(config, derive_seed(seed, i));
    data.samples.push_back(DatasetSample{frame_name(i), std::move(scene.image),
                                         std::move(scene.mask),
                                         std::move(scene.cars)});
  }
  return data;
}

// ---------------------------------------------------------------------------
// Toy model builders.
// ---------------------------------------------------------------------------

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
  n.conv = ConvParams{stride, pad};
  return n;
}

Node unary_node(const std::string& id, NodeKind kind, const std::string& src) {
  Node n;
  n.id = id;
  n.kind = kind;
  n.inputs = {src};
  return n;
}

Node gated_node(const std::string& id, const std::string& signal,
                const std::string& gate, GateMode mode) {
  Node n;
  n.id = id;
  n.kind = NodeKind::GatedMul;
  n.inputs = {signal, gate};
  n.gate_mode = mode;
  return n;
}

Node resize_node(const std::string& id, const std::string& src,
                 std::int64_t out_h, std::int64_t out_w) {
  Node n;
  n.id = id;
  n.kind = NodeKind::BilinearResize;
  n.inputs = {src};
  n.resize = ResizeParams{out_h, out_w, true};
  return n;
}

// 2x2 stride-2 block average on the first `live` channels; the rest stay 0.
Tensor block_avg_weight(std::int64_t channels, std::int64_t live) {
  Tensor w(Shape4{channels, channels, 2, 2});
  for (std::int64_t c = 0; c < live; ++c)
    for (std::int64_t y = 0; y < 2; ++y)
      for (std::int64_t x = 0; x < 2; ++x) w.at(c, c, y, x) = 0.25;
  return w;
}

// Center-tap 3x3 conv computing the six signed color differences
//   0: R-G  1: G-R  2: G-B  3: B-G  4: B-(R+G)/2  5: (R+G)/2-B
// from RGB living in channels 0..2.
Tensor color_feature_weight(std::int64_t channels) {
  Tensor w(Shape4{channels, channels, 3, 3});
  auto tap = [&](std::int64_t out, std::int64_t in, double v) {
    w.at(out, in, 1, 1) = v;
  };
  tap(0, 0, 1.0);
  tap(0, 1, -1.0);
  tap(1, 1, 1.0);
  tap(1, 0, -1.0);
  tap(2, 1, 1.0);
  tap(2, 2, -1.0);
  tap(3, 2, 1.0);
  tap(3, 1, -1.0);
  tap(4, 2, 1.0);
  tap(4, 0, -0.5);
  tap(4, 1, -0.5);
  tap(5, 0, 0.5);
  tap(5, 1, 0.5);
  tap(5, 2, -1.0);
  return w;
}

Tensor identity_1x1(std::int64_t channels) {
  Tensor w(Shape4{channels, channels, 1, 1});
  for (std::int64_t c = 0; c < channels; ++c) w.at(c, c, 0, 0) = 1.0;
  return w;
}

void randomize(Graph& g, std::uint64_t seed) {
  Rng rng(seed);
  for (Node& node : g.nodes()) {
    if (node.kind != NodeKind::Conv2D) continue;
    const Shape4& s = node.weight.shape();
    const double fan_in = static_cast<double>(s.c * s.h * s.w);
    const double stddev = std::sqrt(2.0 / fan_in);
    for (double& v : node.weight.values()) v = rng.normal(0.0, stddev);
    std::fill(node.bias.begin(), node.bias.end(), 0.0);
  }
}

}  // namespace

Graph build_toy_pid(const ToyModelSpec& spec) {
  const std::int64_t w = spec.width;
  const std::int64_t s = spec.image_size;
  if (w < 6 && spec.mode == WeightMode::Handcrafted) {
    throw ConfigError("handcrafted toy-pid needs width >= 6");
  }
  if (w < 3) throw ConfigError("toy-pid needs width >= 3");
  if (s < 16 || s % 8 != 0) {
    throw ConfigError("toy-pid image size must be a multiple of 8");
  }

  auto zeros = [&](std::int64_t out, std::int64_t in, std::int64_t k) {
    return Tensor(Shape4{out, in, k, k});
  };
  auto bias = [](std::int64_t n, double v = 0.0) {
    return std::vector<double>(static_cast<std::size_t>(n), v);
  };

  Graph g;
  g.add(input_node("input", Shape4{1, 3, s, s}));

  // Stem: two stride-2 convs; handcrafted = per-channel 2x2 block averages,
  // leaving RGB block means in channels 0..2 at quarter resolution.
  {
    Tensor stem1(Shape4{w, 3, 2, 2});
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < 2; ++y)
        for (std::int64_t x = 0; x < 2; ++x) stem1.at(c, c, y, x) = 0.25;
    g.add(conv_node("stem1", "input", std::move(stem1), bias(w), 2));
  }
  g.add(unary_node("stem1_relu", NodeKind::ReLU, "stem1"));
  g.add(conv_node("stem2", "stem1_relu", block_avg_weight(w, 3), bias(w), 2));
  g.add(unary_node("stem2_relu", NodeKind::ReLU, "stem2"));

  // P branch: fine color features at stride 4.
  g.add(conv_node("p_conv", "stem2_relu", color_feature_weight(w), bias(w), 1,
                  1));
  g.add(unary_node("p_relu", NodeKind::ReLU, "p_conv"));

  // I branch: the same features from a coarser (stride 8) view, brought back
  // up with a x2 bilinear resize and a 1x1 mix.
  g.add(conv_node("i_down", "stem2_relu", block_avg_weight(w, 3), bias(w), 2));
  g.add(unary_node("i_down_relu", NodeKind::ReLU, "i_down"));
  g.add(conv_node("i_conv", "i_down_relu", color_feature_weight(w), bias(w), 1,
                  1));
  g.add(unary_node("i_relu", NodeKind::ReLU, "i_conv"));
  g.add(resize_node("i_up", "i_relu", s / 4, s / 4));
  g.add(conv_node("i_mix", "i_up", identity_1x1(w), bias(w)));

  // Pixel-attention fusion: fused = P + I * sigma(g), gate from both views.
  {
    Node cat;
    cat.id = "pag_cat";
    cat.kind = NodeKind::ConcatC;
    cat.inputs = {"p_relu", "i_mix"};
    g.add(std::move(cat));
  }
  g.add(conv_node("pag_gate", "pag_cat", zeros(w, 2 * w, 1), bias(w, 10.0)));
  g.add(gated_node("pag_mul", "i_mix", "pag_gate", GateMode::Sigmoid));
  {
    Node add;
    add.id = "fuse";
    add.kind = NodeKind::Add;
    add.inputs = {"p_relu", "pag_mul"};
    g.add(std::move(add));
  }

  // Boundary-attention gate: out = fused * (1 - sigma(d)). The handcrafted
  // d is a large negative constant, so the gate sits fully open.
  g.add(conv_node("d_conv1", "stem2_relu", zeros(w, w, 3), bias(w), 1, 1));
  g.add(unary_node("d_relu", NodeKind::ReLU, "d_conv1"));
  g.add(conv_node("d_conv2", "d_relu", zeros(w, w, 3), bias(w, -10.0), 1, 1));
  g.add(gated_node("bag_mul", "fuse", "d_conv2", GateMode::OneMinusSigmoid));

  // Head: combined features are ~2x the single-branch values inside uniform
  // regions, so with F = 2f the logits come out as
  //   background = 2*F[G-R] + 2*F[G-B] - 2
  //   flood      = 3*F[B-(R+G)/2] - 1
  //   road       = 1 - 1.5 * sum(F)
  g.add(conv_node("head1", "bag_mul", identity_1x1(w), bias(w)));
  g.add(unary_node("head1_relu", NodeKind::ReLU, "head1"));
  {
    Tensor hw(Shape4{3, w, 1, 1});
    hw.at(0, 1, 0, 0) = 2.0;
    hw.at(0, 2, 0, 0) = 2.0;
    hw.at(1, 4, 0, 0) = 3.0;
    for (std::int64_t c = 0; c < 6; ++c) hw.at(2, c, 0, 0) = -1.5;
    g.add(conv_node("head2", "head1_relu", std::move(hw), {-2.0, -1.0, 1.0}));
  }
  g.add(resize_node("head_up", "head2", s, s));
  g.add(unary_node("seg", NodeKind::Output, "head_up"));
  g.declare_output("seg");

  if (spec.mode == WeightMode::Random) randomize(g, spec.seed);
  g.propagate_shapes();
  return g;
}

Graph build_toy_detector(const ToyModelSpec& spec) {
  const std::int64_t w = spec.width;
  const std::int64_t s = spec.image_size;
  if (w < 3) throw ConfigError("toy-det needs width >= 3");
  if (s < 16 || s % 8 != 0) {
    throw ConfigError("toy-det image size must be a multiple of 8");
  }

  auto bias = [](std::int64_t n, double v = 0.0) {
    return std::vector<double>(static_cast<std::size_t>(n), v);
  };

  Graph g;
  g.add(input_node("input", Shape4{1, 3, s, s}));

  // Backbone: three stride-2 stages. Handcrafted weights turn the three live
  // channels into thresholded car-paint evidence:
  //   whiteness = brightness - 0.55, darkness = 0.25 - brightness,
  //   redness = R - G/2 - B/2 - 0.3,
  // each block-averaged on the way down to the 8x8 grid.
  {
    Tensor b1(Shape4{w, 3, 2, 2});
    for (std::int64_t c = 0; c < 3; ++c)
      for (std::int64_t y = 0; y < 2; ++y)
        for (std::int64_t x = 0; x < 2; ++x) b1.at(c, c, y, x) = 0.25;
    g.add(conv_node("b1", "input", std::move(b1), bias(w), 2));
  }
  g.add(unary_node("b1_relu", NodeKind::ReLU, "b1"));
  {
    Tensor b2(Shape4{w, w, 2, 2});
    std::vector<double> b2_bias = bias(w);
    for (std::int64_t y = 0; y < 2; ++y) {
      for (std::int64_t x = 0; x < 2; ++x) {
        for (std::int64_t c = 0; c < 3; ++c) {
          b2.at(0, c, y, x) = 0.25 / 3.0;   // whiteness
          b2.at(1, c, y, x) = -0.25 / 3.0;  // darkness
        }
        b2.at(2, 0, y, x) = 0.25;  // redness
        b2.at(2, 1, y, x) = -0.125;
        b2.at(2, 2, y, x) = -0.125;
      }
    }
    b2_bias[0] = -0.55;
    b2_bias[1] = 0.25;
    b2_bias[2] = -0.3;
    g.add(conv_node("b2", "b1_relu", std::move(b2), std::move(b2_bias), 2));
  }
  g.add(unary_node("b2_relu", NodeKind::ReLU, "b2"));
  g.add(conv_node("b3", "b2_relu", block_avg_weight(w, 3), bias(w), 2));
  g.add(unary_node("b3_relu", NodeKind::ReLU, "b3"));

  {
    Tensor ow(Shape4{1, w, 1, 1});
    ow.at(0, 0, 0, 0) = 10.0;
    ow.at(0, 1, 0, 0) = 15.0;
    ow.at(0, 2, 0, 0) = 10.0;
    g.add(conv_node("obj_conv", "b3_relu", std::move(ow), {-2.0}));
  }
  {
    Tensor cw(Shape4{3, w, 1, 1});
    for (std::int64_t c = 0; c < 3; ++c) cw.at(c, c, 0, 0) = 20.0;
    g.add(conv_node("cls_conv", "b3_relu", std::move(cw), bias(3)));
  }
  g.add(conv_node("box_conv", "b3_relu", Tensor(Shape4{4, w, 1, 1}), bias(4)));
  g.add(unary_node("obj", NodeKind::Output, "obj_conv"));
  g.add(unary_node("cls", NodeKind::Output, "cls_conv"));
  g.add(unary_node("box", NodeKind::Output, "box_conv"));
  g.declare_output("obj");
  g.declare_output("cls");
  g.declare_output("box");

  if (spec.mode == WeightMode::Random) randomize(g, spec.seed);
  g.propagate_shapes();
  return g;
}

Graph build_toy_model(const ToyModelSpec& spec) {
  if (spec.arch == "toy-pid") return build_toy_pid(spec);
  if (spec.arch == "toy-det") return build_toy_detector(spec);
  throw ConfigError("unknown architecture '" + spec.arch +
                    "' (expected toy-pid or toy-det)");
}

// ---------------------------------------------------------------------------
// Trainer and evaluation helpers.
// ---------------------------------------------------------------------------

namespace {

bool has_output(const Graph& g, const std::string& id) {
  const auto& ids = g.output_ids();
  return std::find(ids.begin(), ids.end(), id) != ids.end();
}

// Per-pixel softmax cross-entropy; fills the seed with d(loss)/d(logit).
double seg_loss(const Tensor& logits, const std::vector<std::uint8_t>& mask,
                Tensor& seed) {
  const Shape4& s = logits.shape();
  const double inv_n = 1.0 / static_cast<double>(s.h * s.w);
  double loss = 0.0;
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      double max_z = logits.at(0, 0, y, x);
      for (std::int64_t c = 1; c < s.c; ++c) {
        max_z = std::max(max_z, logits.at(0, c, y, x));
      }
      double denom = 0.0;
      for (std::int64_t c = 0; c < s.c; ++c) {
        denom += std::exp(logits.at(0, c, y, x) - max_z);
      }
      const int label = mask[static_cast<std::size_t>(y * s.w + x)];
      loss -= inv_n * (logits.at(0, label, y, x) - max_z - std::log(denom));
      for (std::int64_t c = 0; c < s.c; ++c) {
        const double p = std::exp(logits.at(0, c, y, x) - max_z) / denom;
        seed.at(0, c, y, x) = inv_n * (p - (c == label ? 1.0 : 0.0));
      }
    }
  }
  return loss;
}

struct CellLabel {
  bool positive = false;
  int color = 0;
};

std::vector<CellLabel> cell_labels(const DatasetSample& sample,
                                   std::int64_t grid, std::int64_t image_size) {
  std::vector<CellLabel> labels(static_cast<std::size_t>(grid * grid));
  const std::int64_t stride = image_size / grid;
  for (const CarBox& car : sample.cars) {
    const std::int64_t cy = (car.y + car.h / 2) / stride;
    const std::int64_t cx = (car.x + car.w / 2) / stride;
    CellLabel& cell = labels[static_cast<std::size_t>(
        std::clamp<std::int64_t>(cy, 0, grid - 1) * grid +
        std::clamp<std::int64_t>(cx, 0, grid - 1))];
    if (!cell.positive) {
      cell.positive = true;
      cell.color = car_color_index(car.color);
    }
  }
  return labels;
}

double det_loss(const ForwardTape& tape, const DatasetSample& sample,
                std::int64_t image_size, Tensor& obj_seed, Tensor& cls_seed) {
  const Tensor& obj = tape.output_of("obj");
  const Tensor& cls = tape.output_of("cls");
  const std::int64_t grid = obj.shape().h;
  const std::vector<CellLabel> labels =
      cell_labels(sample, grid, image_size);
  const double inv_cells = 1.0 / static_cast<double>(grid * grid);
  std::int64_t positives = 0;
  for (const CellLabel& c : labels) positives += c.positive ? 1 : 0;
  const double inv_pos = positives > 0 ? 1.0 / positives : 0.0;

  double loss = 0.0;
  for (std::int64_t y = 0; y < grid; ++y) {
    for (std::int64_t x = 0; x < grid; ++x) {
      const CellLabel& cell = labels[static_cast<std::size_t>(y * grid + x)];
      const double z = obj.at(0, 0, y, x);
      const double target = cell.positive ? 1.0 : 0.0;
      loss += inv_cells * (std::max(z, 0.0) - z * target +
                           std::log1p(std::exp(-std::abs(z))));
      obj_seed.at(0, 0, y, x) = inv_cells * (sigmoid(z) - target);
      if (!cell.positive) continue;
      double max_z = cls.at(0, 0, y, x);
      for (std::int64_t c = 1; c < cls.shape().c; ++c) {
        max_z = std::max(max_z, cls.at(0, c, y, x));
      }
      double denom = 0.0;
      for (std::int64_t c = 0; c < cls.shape().c; ++c) {
        denom += std::exp(cls.at(0, c, y, x) - max_z);
      }
      loss -= inv_pos *
              (cls.at(0, cell.color, y, x) - max_z - std::log(denom));
      for (std::int64_t c = 0; c < cls.shape().c; ++c) {
        const double p = std::exp(cls.at(0, c, y, x) - max_z) / denom;
        cls_seed.at(0, c, y, x) =
            inv_pos * (p - (c == cell.color ? 1.0 : 0.0));
      }
    }
  }
  return loss;
}

}  // namespace

TrainResult train_sgd(Graph& graph, const Dataset& data,
                      const TrainConfig& config) {
  if (config.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(config.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (data.samples.empty()) throw DataError("training dataset is empty");
  const bool seg_task = has_output(graph, "seg");
  if (!seg_task && !(has_output(graph, "obj") && has_output(graph, "cls"))) {
    throw ConfigError("trainer expects a 'seg' head or 'obj'+'cls' heads");
  }

  TrainResult result;
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    for (const DatasetSample& sample : data.samples) {
      ForwardTape tape = forward(graph, sample.image);
      std::map<std::string, Tensor> seeds;
      double loss = 0.0;
      if (seg_task) {
        const Tensor& logits = tape.output_of("seg");
        Tensor seed(logits.shape());
        loss = seg_loss(logits, sample.mask, seed);
        seeds.emplace("seg", std::move(seed));
      } else {
        Tensor obj_seed(tape.output_of("obj").shape());
        Tensor cls_seed(tape.output_of("cls").shape());
        loss = det_loss(tape, sample, data.image_size, obj_seed, cls_seed);
        seeds.emplace("obj", std::move(obj_seed));
        seeds.emplace("cls", std::move(cls_seed));
      }
      total += loss;

      GradientTape grads = backward_gradient(tape, seeds);
      for (std::size_t i = 0; i < graph.nodes().size(); ++i) {
        Node& node = graph.nodes()[i];
        if (node.kind != NodeKind::Conv2D) continue;
        auto wg = grads.weight_grads.find(i);
        if (wg != grads.weight_grads.end()) {
          auto w = node.weight.values();
          auto gw = wg->second.values();
          for (std::size_t j = 0; j < w.size(); ++j) {
            w[j] -= config.lr * gw[j];
          }
        }
        auto bg = grads.bias_grads.find(i);
        if (bg != grads.bias_grads.end()) {
          for (std::size_t j = 0; j < node.bias.size(); ++j) {
            node.bias[j] -= config.lr * bg->second[j];
          }
        }
      }
    }
    const double mean = total / static_cast<double>(data.samples.size());
    result.loss_history.push_back(mean);
    if (!std::isfinite(mean)) {
      result.diverged = true;
      result.note =
          "loss became non-finite at epoch " + std::to_string(epoch);
      break;
    }
  }
  return result;
}

double pixel_accuracy(const Graph& graph, const Dataset& data) {
  if (data.samples.empty()) throw DataError("dataset is empty");
  std::int64_t correct = 0, total = 0;
  for (const DatasetSample& sample : data.samples) {
    ForwardTape tape = forward(graph, sample.image);
    const Tensor& logits = tape.output_of("seg");
    const Shape4& s = logits.shape();
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t x = 0; x < s.w; ++x) {
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < s.c; ++c) {
          if (logits.at(0, c, y, x) > logits.at(0, best, y, x)) best = c;
        }
        correct +=
            best == sample.mask[static_cast<std::size_t>(y * s.w + x)] ? 1 : 0;
        ++total;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

double detection_hit_rate(const Graph& graph, const Dataset& data) {
  std::int64_t hits = 0, considered = 0;
  for (const DatasetSample& sample : data.samples) {
    if (sample.cars.empty()) continue;
    ++considered;
    ForwardTape tape = forward(graph, sample.image);
    const Tensor& obj = tape.output_of("obj");
    const auto [cy, cx] = argmax_cell(obj);
    const double stride =
        static_cast<double>(data.image_size) / static_cast<double>(obj.shape().h);
    const double py = (static_cast<double>(cy) + 0.5) * stride;
    const double px = (static_cast<double>(cx) + 0.5) * stride;
    for (const CarBox& car : sample.cars) {
      if (py >= car.y && py < car.y + car.h && px >= car.x &&
          px < car.x + car.w) {
        ++hits;
        break;
      }
    }
  }
  if (considered == 0) throw DataError("no samples with cars");
  return static_cast<double>(hits) / static_cast<double>(considered);
}

}  // namespace relprop
