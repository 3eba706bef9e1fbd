#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "relprop/crp.hpp"

namespace relprop {

// N (samples) x C (concepts) of L1-normalized concept relevance. Raw
// all-zero rows cannot be normalized; they are dropped and logged in
// `excluded` instead of poisoning the fit.
struct ConceptMatrix {
  std::vector<std::vector<double>> rows;
  std::vector<std::string> sample_ids;
  std::vector<std::string> excluded;
  std::string layer_id;
  std::string context;  // class or head the vectors were extracted for

  std::int64_t cols() const {
    return rows.empty() ? 0 : static_cast<std::int64_t>(rows[0].size());
  }
};

// v / sum|v_i|, preserving sign; zero vector returned unchanged.
std::vector<double> normalize_l1(std::span<const double> v);

ConceptMatrix make_concept_matrix(std::span<const ConceptVector> raw,
                                  const std::string& context = "");

// Diagonal-covariance Gaussian mixture over concept vectors.
struct GmmModel {
  std::int64_t k = 0;
  std::vector<double> weights;                // sum 1, each > 0
  std::vector<std::vector<double>> means;     // K x C
  std::vector<std::vector<double>> variances; // K x C, floored at 1e-6
  std::string layer_id;
  std::uint64_t seed = 0;
  std::vector<double> loglik_history;  // total data log-likelihood per step
  std::vector<std::string> notes;      // degenerate-component events
};

GmmModel fit_gmm(const ConceptMatrix& matrix, int k, std::uint64_t seed,
                 int max_iter = 300, double tol = 1e-8);

// Mean per-row log-likelihood of held-out data; the per-K diagnostic.
double mean_log_likelihood(const GmmModel& gmm, const ConceptMatrix& matrix);

struct GmmAssignment {
  std::int64_t component = 0;  // argmax responsibility, ties to lower id
  double log_likelihood = 0.0;
  std::vector<double> responsibilities;
};

GmmAssignment assign(std::span<const double> vec, const GmmModel& gmm);

struct PrototypeSummary {
  struct Component {
    double coverage_pct = 0.0;
    double cosine_to_mean = 0.0;
    std::vector<std::int64_t> top_concepts;  // by |mu_kc| descending
  };
  std::vector<Component> components;
  std::vector<double> class_mean;  // uncentered mean of the matrix rows
};

PrototypeSummary prototype_summary(const GmmModel& gmm,
                                   const ConceptMatrix& matrix,
                                   int top_m = 5);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct OutlierCalibration {
  std::vector<double> train_loglik;  // ascending
  double q = 5.0;
  double threshold = 0.0;  // q-th percentile (nearest rank) of train_loglik
};

OutlierCalibration calibrate_outliers(const GmmModel& gmm,
                                      const ConceptMatrix& matrix,
                                      double q = 5.0);

struct OutlierScore {
  double log_likelihood = 0.0;
  double percentile = 0.0;  // share of training values strictly below
  bool flagged = false;
};

OutlierScore outlier_score(std::span<const double> vec, const GmmModel& gmm,
                           const OutlierCalibration& calibration);

struct DiffEntry {
  std::int64_t concept_index = 0;
  double test_value = 0.0;
  double prototype_value = 0.0;
  double delta = 0.0;  // test - prototype; > 0 means over-used
};

struct DiffReport {
  std::int64_t component = 0;
  std::vector<DiffEntry> entries;  // sorted by |delta| descending
};

DiffReport difference_to_prototype(std::span<const double> vec,
                                   const GmmModel& gmm,
                                   std::int64_t component);

}  // namespace relprop
