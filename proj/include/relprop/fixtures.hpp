#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "relprop/graph.hpp"
#include "relprop/rng.hpp"
#include "relprop/tensor.hpp"

namespace relprop {

// ---------------------------------------------------------------------------
// Synthetic flood/road/car scenes.
//
// Layout is deliberately rigid so expected class areas have closed forms:
// one horizontal road band in the lower quarter, flood ellipses in up to two
// disjoint slots of the upper region, cars on the road. Segmentation classes
// are 0 background, 1 flood, 2 road; cars keep the class of the surface they
// sit on and are annotated as detection boxes instead.
// ---------------------------------------------------------------------------

inline constexpr int kClassBackground = 0;
inline constexpr int kClassFlood = 1;
inline constexpr int kClassRoad = 2;
inline constexpr int kSegClasses = 3;

struct IntRange {
  std::int64_t lo = 0;
  std::int64_t hi = 0;  // inclusive
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

struct CarColor {
  std::string name;
  double r = 0.0, g = 0.0, b = 0.0;
};

// Known paint colors: white, dark, red, yellow.
const std::vector<CarColor>& car_palette();
const CarColor& car_color(const std::string& name);  // DataError if unknown
int car_color_index(const std::string& name);        // index into car_palette()

struct SceneConfig {
  std::int64_t image_size = 64;
  IntRange flood_blobs{1, 2};        // ellipse count, at most 2
  RealRange flood_radius{5.0, 7.0};  // per-axis radius, pixels
  IntRange road_thickness{8, 12};
  IntRange car_count{0, 2};
  IntRange car_width{8, 12};
  IntRange car_height{8, 10};
  std::vector<std::string> palette{"white", "dark", "red"};
  double noise = 0.015;  // per-pixel uniform color jitter amplitude
};

void validate(const SceneConfig& config);  // ConfigError on nonsense

// Expected fraction of pixels per class under `config`, ignoring
// rasterization error (ellipses are counted as pi * rx * ry).
std::vector<double> expected_class_fractions(const SceneConfig& config);

struct CarBox {
  std::int64_t x = 0, y = 0, w = 0, h = 0;  // top-left corner, size
  std::string color;
};

struct Scene {
  Tensor image;                    // (1, 3, S, S) in [0, 1]
  std::vector<std::uint8_t> mask;  // S*S class indices
  std::vector<CarBox> cars;
};

// Fully determined by (config, seed); independent of any other state.
Scene render_scene(const SceneConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset on disk: images/NNNN.png, masks/NNNN.png, boxes.json, manifest.json.
// Image i is rendered with derive_seed(seed, i), so the tree is byte-stable
// regardless of generation order; `jobs` bounds the worker threads.
// ---------------------------------------------------------------------------

void write_dataset(const SceneConfig& config, std::int64_t n,
                   std::uint64_t seed, const std::filesystem::path& dir,
                   int jobs = 1);

struct DatasetSample {
  std::string name;                // "0003"
  Tensor image;                    // (1, 3, S, S)
  std::vector<std::uint8_t> mask;  // S*S
  std::vector<CarBox> cars;
};

struct Dataset {
  std::int64_t image_size = 0;
  std::uint64_t seed = 0;
  std::vector<DatasetSample> samples;
};

Dataset load_dataset(const std::filesystem::path& dir);

// Same samples as write_dataset + load_dataset, without touching disk (and
// therefore without the 8-bit PNG quantization).
Dataset synth_dataset(const SceneConfig& config, std::int64_t n,
                      std::uint64_t seed);

// ---------------------------------------------------------------------------
// Toy models.
//
// toy-pid: two-branch segmentation net with attention-style fusion —
//   stem (2 stride-2 convs) -> P branch (fine conv) and I branch (stride-2
//   conv, conv, bilinear x2, 1x1 conv); fused = P + GatedMul(I, sigma(g))
//   with g a 1x1 conv on ConcatC(P, I); out = GatedMul(fused, d, 1-sigma)
//   with d from a third conv branch; head convs -> 3 class logits,
//   bilinear x4 back to input resolution, head "seg".
//
// toy-det: 3 stride-2 convs to an 8x8 grid with separate heads "obj"
//   (objectness logit), "cls" (car color logits), "box" (4 offsets, unused
//   by explanation targets).
//
// Handcrafted weights are closed-form color detectors (documented in the
// builder); Random draws from N(0, sqrt(2/fan_in)) with zero biases except
// neutral gate biases.
// ---------------------------------------------------------------------------

enum class WeightMode { Handcrafted, Random };

struct ToyModelSpec {
  std::string arch = "toy-pid";  // "toy-pid" | "toy-det"
  std::int64_t width = 6;        // feature channels; handcrafted needs >= 6 (pid) / >= 3 (det)
  WeightMode mode = WeightMode::Handcrafted;
  std::uint64_t seed = 0;  // Random mode only
  std::int64_t image_size = 64;
};

Graph build_toy_pid(const ToyModelSpec& spec);
Graph build_toy_detector(const ToyModelSpec& spec);
Graph build_toy_model(const ToyModelSpec& spec);  // dispatch on spec.arch

// ---------------------------------------------------------------------------
// Minimal trainer: per-sample gradient descent in a fixed order, no momentum.
// Segmentation (head "seg"): per-pixel softmax cross-entropy against the
// mask. Detection (heads "obj"/"cls"): sigmoid cross-entropy on objectness
// over all cells plus softmax cross-entropy on the color at each cell that
// contains a box center; the box head is not trained.
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::int64_t epochs = 30;
  double lr = 0.05;
  std::uint64_t seed = 0;  // reserved for future stochastic variants
};

struct TrainResult {
  std::vector<double> loss_history;  // mean loss per epoch
  bool diverged = false;
  std::string note;
};

TrainResult train_sgd(Graph& graph, const Dataset& data,
                      const TrainConfig& config);

// Mean per-pixel argmax accuracy of head "seg" against the masks.
double pixel_accuracy(const Graph& graph, const Dataset& data);

// Fraction of samples whose argmax "obj" cell has its center inside some
// ground-truth box. Samples without cars are skipped.
double detection_hit_rate(const Graph& graph, const Dataset& data);

}  // namespace relprop
