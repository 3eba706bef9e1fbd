#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "relprop/lrp.hpp"
#include "relprop/target.hpp"

namespace relprop {

enum class ScoreMethodKind { LrpRelevance, Gradient, GradCam, Activation, Random };

// How to score a layer's feature maps for the perturbation ranking.
struct ScoreMethod {
  ScoreMethodKind kind = ScoreMethodKind::Activation;
  RuleAssignment assignment;  // LrpRelevance only
  std::uint64_t seed = 0;     // Random only

  static ScoreMethod lrp(RuleAssignment a) {
    ScoreMethod m;
    m.kind = ScoreMethodKind::LrpRelevance;
    m.assignment = std::move(a);
    return m;
  }
  static ScoreMethod gradient() { return {ScoreMethodKind::Gradient, {}, 0}; }
  static ScoreMethod gradcam() { return {ScoreMethodKind::GradCam, {}, 0}; }
  static ScoreMethod activation() {
    return {ScoreMethodKind::Activation, {}, 0};
  }
  static ScoreMethod random(std::uint64_t seed) {
    return {ScoreMethodKind::Random, {}, seed};
  }

  std::string name() const;
};

ChannelVector channel_scores(const ForwardTape& tape,
                             const std::string& layer_id,
                             const TargetSpec& target,
                             const ScoreMethod& method);

// Most-relevant-first channel order; ties go to the lower channel index.
std::vector<std::int64_t> rank_channels(const ChannelVector& scores);

enum class Direction { Deletion, Insertion };

// Logit trajectory while channel groups are removed or restored in rank
// order. logits[0] is the unperturbed (deletion) or fully-ablated
// (insertion) value; steps[t] lists the channels touched at step t+1.
struct PerturbCurve {
  Direction direction = Direction::Deletion;
  std::vector<double> logits;
  std::vector<std::vector<std::int64_t>> steps;
};

PerturbCurve deletion_curve(const Graph& graph, const Tensor& input,
                            const std::string& layer_id,
                            const TargetSpec& target,
                            const std::vector<std::int64_t>& order);

PerturbCurve insertion_curve(const Graph& graph, const Tensor& input,
                             const std::string& layer_id,
                             const TargetSpec& target,
                             const std::vector<std::int64_t>& order);

// Mean logit drop below the start (deletion) / rise above it (insertion).
double aoc(const PerturbCurve& curve);
double auc(const PerturbCurve& curve);

struct BenchSample {
  std::string id;
  Tensor input;
  TargetSpec target;
};

struct BenchConfig {
  std::vector<std::string> layers;
  std::vector<ScoreMethod> methods;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;
};

struct CurveRecord {
  std::string sample_id;
  std::string layer_id;
  std::string method;
  PerturbCurve deletion;
  PerturbCurve insertion;
  double aoc = 0.0;
  double auc = 0.0;
};

struct MethodLayerStat {
  std::string method;
  std::string layer_id;
  double mean_aoc = 0.0;
  double mean_auc = 0.0;
  std::size_t samples = 0;
};

struct BenchReport {
  std::vector<std::string> sample_ids;  // the evaluated subset, id order
  std::vector<CurveRecord> curves;
  std::vector<MethodLayerStat> stats;
  std::uint64_t seed = 0;
};

// Scores, perturbs and aggregates over a seed-selected subset of samples.
// Random-method scores are reseeded per sample (derive_seed of the dataset
// index), so each sample sees its own permutation.
BenchReport run_benchmark(const Graph& graph,
                          std::span<const BenchSample> dataset,
                          const BenchConfig& config);

void write_curves_csv(const BenchReport& report,
                      const std::filesystem::path& path);

// One-sided exact binomial sign test that paired values in `a` exceed
// those in `b`; ties are discarded. Returns the p-value (1.0 when every
// pair ties).
double paired_sign_test(std::span<const double> a, std::span<const double> b);

}  // namespace relprop
