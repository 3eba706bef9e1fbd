#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relprop/image.hpp"
#include "relprop/pcx.hpp"
#include "relprop/perturb.hpp"

namespace relprop {

// Everything `prototypes assign` needs from a `prototypes fit` run, bundled
// as one JSON document (prototypes.json).
struct PrototypeStore {
  std::string layer_id;
  std::string context;  // e.g. "cls:2" — head and class the vectors explain
  std::uint64_t seed = 0;
  GmmModel gmm;
  PrototypeSummary summary;
  OutlierCalibration calibration;
  std::vector<std::string> sample_ids;  // training rows, in matrix order
  std::vector<int> assignments;         // component per training row
  std::vector<std::string> excluded;    // zero-vector samples left out
};

void save_prototype_store(const PrototypeStore& store,
                          const std::filesystem::path& path);
PrototypeStore load_prototype_store(const std::filesystem::path& path);

// One sign-test result between two methods' per-sample AOC values.
struct SignTestEntry {
  std::string layer_id;
  std::string method_a;
  std::string method_b;
  double p_value = 1.0;  // one-sided, H1: a > b
};

// All pairwise one-sided sign tests on AOC, per layer, in method order.
std::vector<SignTestEntry> aoc_sign_tests(const BenchReport& report);

void write_bench_report(const BenchReport& report,
                        const std::vector<SignTestEntry>& sign_tests,
                        const nlohmann::ordered_json& config_echo,
                        const std::filesystem::path& path);

// Grouped AOC/AUC bar chart, one panel per layer; pure function of the
// report, so re-renders are byte-identical.
ImageU8 render_bench_chart(const BenchReport& report);

// 5x7 bitmap text used by the chart; exposed for tests.
void draw_text(ImageU8& img, std::int64_t y, std::int64_t x,
               const std::string& text, const std::uint8_t rgb[3]);

}  // namespace relprop
