#include "relprop/artifacts.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include "relprop/errors.hpp"

namespace relprop {

using ordered_json = nlohmann::ordered_json;

namespace {

void dump_json(const ordered_json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

ordered_json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  try {
    ordered_json j;
    in >> j;
    return j;
  } catch (const std::exception& e) {
    throw DataError("bad JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace

void save_prototype_store(const PrototypeStore& store,
                          const std::filesystem::path& path) {
  ordered_json j;
  j["format_version"] = 1;
  j["kind"] = "relprop-prototypes";
  j["layer"] = store.layer_id;
  j["context"] = store.context;
  j["seed"] = store.seed;
  j["k"] = store.gmm.k;

  ordered_json gmm;
  gmm["weights"] = store.gmm.weights;
  gmm["means"] = store.gmm.means;
  gmm["variances"] = store.gmm.variances;
  gmm["loglik_history"] = store.gmm.loglik_history;
  gmm["notes"] = store.gmm.notes;
  j["gmm"] = std::move(gmm);

  ordered_json comps = ordered_json::array();
  for (std::size_t i = 0; i < store.summary.components.size(); ++i) {
    const auto& c = store.summary.components[i];
    comps.push_back({{"component", i},
                     {"coverage_pct", c.coverage_pct},
                     {"cosine_to_mean", c.cosine_to_mean},
                     {"top_concepts", c.top_concepts}});
  }
  j["components"] = std::move(comps);
  j["class_mean"] = store.summary.class_mean;

  ordered_json cal;
  cal["q"] = store.calibration.q;
  cal["threshold"] = store.calibration.threshold;
  cal["train_loglik"] = store.calibration.train_loglik;
  j["calibration"] = std::move(cal);

  j["sample_ids"] = store.sample_ids;
  j["assignments"] = store.assignments;
  j["excluded"] = store.excluded;
  dump_json(j, path);
}

PrototypeStore load_prototype_store(const std::filesystem::path& path) {
  const ordered_json j = load_json(path);
  PrototypeStore store;
  try {
    if (j.at("kind").get<std::string>() != "relprop-prototypes") {
      throw DataError("'" + path.string() + "' is not a prototype store");
    }
    store.layer_id = j.at("layer").get<std::string>();
    store.context = j.at("context").get<std::string>();
    store.seed = j.at("seed").get<std::uint64_t>();
    store.gmm.k = j.at("k").get<int>();
    store.gmm.layer_id = store.layer_id;
    store.gmm.seed = store.seed;
    const auto& gmm = j.at("gmm");
    store.gmm.weights = gmm.at("weights").get<std::vector<double>>();
    store.gmm.means =
        gmm.at("means").get<std::vector<std::vector<double>>>();
    store.gmm.variances =
        gmm.at("variances").get<std::vector<std::vector<double>>>();
    store.gmm.loglik_history =
        gmm.at("loglik_history").get<std::vector<double>>();
    store.gmm.notes = gmm.at("notes").get<std::vector<std::string>>();
    for (const auto& c : j.at("components")) {
      PrototypeSummary::Component comp;
      comp.coverage_pct = c.at("coverage_pct").get<double>();
      comp.cosine_to_mean = c.at("cosine_to_mean").get<double>();
      comp.top_concepts =
          c.at("top_concepts").get<std::vector<std::int64_t>>();
      store.summary.components.push_back(std::move(comp));
    }
    store.summary.class_mean = j.at("class_mean").get<std::vector<double>>();
    const auto& cal = j.at("calibration");
    store.calibration.q = cal.at("q").get<double>();
    store.calibration.threshold = cal.at("threshold").get<double>();
    store.calibration.train_loglik =
        cal.at("train_loglik").get<std::vector<double>>();
    store.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
    store.assignments = j.at("assignments").get<std::vector<int>>();
    store.excluded = j.at("excluded").get<std::vector<std::string>>();
  } catch (const ordered_json::exception& e) {
    throw DataError("bad prototype store '" + path.string() +
                    "': " + e.what());
  }
  if (store.gmm.weights.size() != static_cast<std::size_t>(store.gmm.k) ||
      store.gmm.means.size() != store.gmm.weights.size() ||
      store.gmm.variances.size() != store.gmm.weights.size()) {
    throw DataError("inconsistent component counts in '" + path.string() +
                    "'");
  }
  return store;
}

std::vector<SignTestEntry> aoc_sign_tests(const BenchReport& report) {
  // Per-sample AOC series keyed by (layer, method), in record order.
  std::map<std::pair<std::string, std::string>, std::vector<double>> series;
  std::vector<std::string> layers, methods;
  for (const CurveRecord& rec : report.curves) {
    series[{rec.layer_id, rec.method}].push_back(rec.aoc);
    if (std::find(layers.begin(), layers.end(), rec.layer_id) == layers.end())
      layers.push_back(rec.layer_id);
    if (std::find(methods.begin(), methods.end(), rec.method) ==
        methods.end())
      methods.push_back(rec.method);
  }
  std::vector<SignTestEntry> tests;
  for (const std::string& layer : layers) {
    for (const std::string& a : methods) {
      for (const std::string& b : methods) {
        if (a == b) continue;
        const auto& va = series[{layer, a}];
        const auto& vb = series[{layer, b}];
        if (va.empty() || va.size() != vb.size()) continue;
        tests.push_back({layer, a, b, paired_sign_test(va, vb)});
      }
    }
  }
  return tests;
}

void write_bench_report(const BenchReport& report,
                        const std::vector<SignTestEntry>& sign_tests,
                        const ordered_json& config_echo,
                        const std::filesystem::path& path) {
  ordered_json j;
  j["format_version"] = 1;
  j["kind"] = "relprop-bench";
  j["seed"] = report.seed;
  j["config"] = config_echo;
  j["sample_ids"] = report.sample_ids;

  ordered_json stats = ordered_json::array();
  for (const MethodLayerStat& s : report.stats) {
    stats.push_back({{"method", s.method},
                     {"layer", s.layer_id},
                     {"mean_aoc", s.mean_aoc},
                     {"mean_auc", s.mean_auc},
                     {"samples", s.samples}});
  }
  j["stats"] = std::move(stats);

  ordered_json records = ordered_json::array();
  for (const CurveRecord& rec : report.curves) {
    records.push_back({{"sample", rec.sample_id},
                       {"layer", rec.layer_id},
                       {"method", rec.method},
                       {"aoc", rec.aoc},
                       {"auc", rec.auc}});
  }
  j["records"] = std::move(records);

  ordered_json tests = ordered_json::array();
  for (const SignTestEntry& t : sign_tests) {
    tests.push_back({{"layer", t.layer_id},
                     {"a", t.method_a},
                     {"b", t.method_b},
                     {"p_one_sided_a_gt_b", t.p_value}});
  }
  j["aoc_sign_tests"] = std::move(tests);
  dump_json(j, path);
}

// ---------------------------------------------------------------------------
// Bar chart.
// ---------------------------------------------------------------------------

namespace {

// 5x7 glyphs, one byte per row, low 5 bits used (MSB = leftmost pixel).
struct Glyph {
  char ch;
  std::uint8_t rows[7];
};

constexpr Glyph kFont[] = {
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
    {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
};

const Glyph* find_glyph(char ch) {
  const char up = static_cast<char>(
      std::toupper(static_cast<unsigned char>(ch)));
  for (const Glyph& g : kFont) {
    if (g.ch == up) return &g;
  }
  return nullptr;
}

void put_pixel(ImageU8& img, std::int64_t y, std::int64_t x,
               const std::uint8_t rgb[3]) {
  if (y < 0 || x < 0 || y >= img.h || x >= img.w) return;
  for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
}

void fill_rect(ImageU8& img, std::int64_t y0, std::int64_t x0, std::int64_t h,
               std::int64_t w, const std::uint8_t rgb[3]) {
  for (std::int64_t y = y0; y < y0 + h; ++y)
    for (std::int64_t x = x0; x < x0 + w; ++x) put_pixel(img, y, x, rgb);
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

constexpr std::uint8_t kWhiteRgb[3] = {255, 255, 255};
constexpr std::uint8_t kBlackRgb[3] = {20, 20, 20};
constexpr std::uint8_t kAxisRgb[3] = {120, 120, 120};

// One fill per method, reused in order.
constexpr std::uint8_t kBarColors[][3] = {
    {57, 106, 177},  // blue
    {218, 124, 48},  // orange
    {62, 150, 81},   // green
    {204, 37, 41},   // red
    {107, 76, 154},  // purple
    {146, 36, 40},   // maroon
};

}  // namespace

void draw_text(ImageU8& img, std::int64_t y, std::int64_t x,
               const std::string& text, const std::uint8_t rgb[3]) {
  std::int64_t cx = x;
  for (char ch : text) {
    const Glyph* g = find_glyph(ch);
    if (g != nullptr) {
      for (int ry = 0; ry < 7; ++ry) {
        for (int rx = 0; rx < 5; ++rx) {
          if ((g->rows[ry] >> (4 - rx)) & 1) {
            put_pixel(img, y + ry, cx + rx, rgb);
          }
        }
      }
    }
    cx += 6;
  }
}

ImageU8 render_bench_chart(const BenchReport& report) {
  // Stats grouped per layer, preserving method order.
  std::vector<std::string> layers;
  for (const MethodLayerStat& s : report.stats) {
    if (std::find(layers.begin(), layers.end(), s.layer_id) == layers.end()) {
      layers.push_back(s.layer_id);
    }
  }

  double max_abs = 1e-12;
  std::size_t max_methods = 1;
  for (const MethodLayerStat& s : report.stats) {
    max_abs = std::max({max_abs, std::abs(s.mean_aoc), std::abs(s.mean_auc)});
  }
  for (const std::string& layer : layers) {
    std::size_t n = 0;
    for (const MethodLayerStat& s : report.stats) {
      n += s.layer_id == layer ? 1 : 0;
    }
    max_methods = std::max(max_methods, n);
  }

  constexpr std::int64_t kBarW = 16, kPairGap = 4, kGroupGap = 26;
  constexpr std::int64_t kChartH = 120, kMargin = 14;
  const std::int64_t group_w = 2 * kBarW + kPairGap;
  const std::int64_t panel_w =
      static_cast<std::int64_t>(max_methods) * (group_w + kGroupGap);
  const std::int64_t panel_h = 12 + kChartH + 34;

  ImageU8 img;
  img.w = std::max<std::int64_t>(2 * kMargin + panel_w, 300);
  img.h = kMargin + 18 +
          static_cast<std::int64_t>(layers.size()) * panel_h + kMargin;
  img.channels = 3;
  img.pixels.assign(static_cast<std::size_t>(img.h * img.w * 3), 0);
  fill_rect(img, 0, 0, img.h, img.w, kWhiteRgb);

  draw_text(img, kMargin, kMargin, "mean aoc (solid) / auc (light) per layer",
            kBlackRgb);

  std::int64_t top = kMargin + 18;
  for (const std::string& layer : layers) {
    draw_text(img, top, kMargin, "layer " + layer, kBlackRgb);
    const std::int64_t axis_y = top + 12 + kChartH / 2;
    fill_rect(img, axis_y, kMargin, 1, panel_w, kAxisRgb);

    std::int64_t gx = kMargin;
    int method_i = 0;
    for (const MethodLayerStat& s : report.stats) {
      if (s.layer_id != layer) continue;
      const std::uint8_t* fill =
          kBarColors[method_i % (sizeof(kBarColors) / sizeof(kBarColors[0]))];
      std::uint8_t light[3];
      for (int c = 0; c < 3; ++c) {
        light[c] = static_cast<std::uint8_t>(128 + fill[c] / 2);
      }
      const double scale = (kChartH / 2 - 2) / max_abs;
      auto bar = [&](std::int64_t x, double v, const std::uint8_t* rgb) {
        const auto len = static_cast<std::int64_t>(
            std::round(std::abs(v) * scale));
        if (v >= 0.0) {
          fill_rect(img, axis_y - len, x, len, kBarW, rgb);
        } else {
          fill_rect(img, axis_y + 1, x, len, kBarW, rgb);
        }
      };
      bar(gx, s.mean_aoc, fill);
      bar(gx + kBarW + kPairGap, s.mean_auc, light);
      draw_text(img, axis_y + kChartH / 2 + 4, gx, s.method, kBlackRgb);
      draw_text(img, axis_y + kChartH / 2 + 14, gx, format_value(s.mean_aoc),
                kBlackRgb);
      draw_text(img, axis_y + kChartH / 2 + 24, gx, format_value(s.mean_auc),
                kBlackRgb);
      gx += group_w + kGroupGap;
      ++method_i;
    }
    top += panel_h;
  }
  return img;
}

}  // namespace relprop
